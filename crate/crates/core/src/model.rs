//! LN-Nets: alternating affine maps and (group) layer normalizations.
//!
//! Layers are stored and applied in data-flow order: `layers[0]` is the
//! first map applied to the input. A network always starts and ends with an
//! affine layer and never has two normalizations back to back.
//!
//! Spherical projection on `R^n` is realized exactly by an LN on `R^(n+1)`
//! sandwiched between two linear maps built from an orthogonal matrix `Q`
//! whose last column is `1/sqrt(n+1)`. [`compile`] uses that embedding to
//! turn a pipeline of affine and spherical-projection stages into an LN-Net.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix, DEFAULT_EPS_ZERO};

/// `x -> W x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if w.rows() != b.len() {
            return Err(Error::Shape(format!(
                "bias of length {} for a {}x{} weight",
                b.len(),
                w.rows(),
                w.cols()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine bias"));
        }
        Ok(Self { w, b })
    }

    pub fn linear(w: Matrix) -> Self {
        let b = vec![0.0; w.rows()];
        Self { w, b }
    }

    pub fn identity(dim: usize) -> Self {
        Self::linear(Matrix::identity(dim))
    }

    pub fn translation(b: Vec<f64>) -> Self {
        Self {
            w: Matrix::identity(b.len()),
            b,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        tensor::apply_affine(&self.w, &self.b, x)
    }

    /// The map "`self`, then `next`".
    pub fn then(&self, next: &Affine) -> Result<Affine> {
        let (w, b) = tensor::compose_affine(&self.w, &self.b, &next.w, &next.b)?;
        Ok(Affine { w, b })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Ln,
    Lng { groups: usize },
}

impl Layer {
    fn is_norm(&self) -> bool {
        !matches!(self, Layer::Affine(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnNet {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

impl LnNet {
    /// Validates the layer sequence.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let (input_dim, output_dim) = validate(&layers)?;
        Ok(Self {
            layers,
            input_dim,
            output_dim,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Number of normalization layers (the depth of the net).
    pub fn norm_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_norm()).count()
    }

    /// Widest layer, counting the input.
    pub fn max_width(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Affine(a) => Some(a.out_dim()),
                _ => None,
            })
            .chain(std::iter::once(self.input_dim))
            .max()
            .unwrap_or(0)
    }

    /// Width of every hidden (normalized) layer.
    pub fn hidden_widths(&self) -> Vec<usize> {
        let mut widths = Vec::new();
        let mut dim = self.input_dim;
        for layer in &self.layers {
            match layer {
                Layer::Affine(a) => dim = a.out_dim(),
                _ => widths.push(dim),
            }
        }
        widths
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        self.check_input(x)?;
        for (idx, layer) in self.layers.iter().enumerate() {
            h = apply_layer(layer, &h, idx)?;
        }
        Ok(h)
    }

    /// Forward pass that also returns the activation after every layer.
    pub fn forward_traced(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            h = apply_layer(layer, &h, idx)?;
            acts.push(h.clone());
        }
        Ok(acts)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Collapses an affine-only network into one map.
    pub fn as_single_affine(&self) -> Option<Affine> {
        let mut acc: Option<Affine> = None;
        for layer in &self.layers {
            let Layer::Affine(a) = layer else {
                return None;
            };
            acc = Some(match acc {
                None => a.clone(),
                Some(prev) => prev.then(a).ok()?,
            });
        }
        acc
    }

    pub fn to_document(&self) -> NetDocument {
        NetDocument {
            version: DOCUMENT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Affine(a) => LayerDocument::Affine {
                        rows: a.w.rows(),
                        cols: a.w.cols(),
                        w: a.w.data().to_vec(),
                        b: a.b.clone(),
                    },
                    Layer::Ln => LayerDocument::Ln,
                    Layer::Lng { groups } => LayerDocument::Lng { groups: *groups },
                })
                .collect(),
        }
    }

    pub fn from_document(doc: NetDocument) -> Result<Self> {
        if doc.version != DOCUMENT_VERSION {
            return Err(Error::Document(format!(
                "unsupported version {} (expected {DOCUMENT_VERSION})",
                doc.version
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerDocument::Affine { rows, cols, w, b } => {
                    let w = Matrix::new(rows, cols, w)
                        .map_err(|e| Error::Document(format!("layer {i}: {e}")))?;
                    Affine::new(w, b)
                        .map(Layer::Affine)
                        .map_err(|e| Error::Document(format!("layer {i}: {e}")))
                }
                LayerDocument::Ln => Ok(Layer::Ln),
                LayerDocument::Lng { groups } => Ok(Layer::Lng { groups }),
            })
            .collect::<Result<Vec<_>>>()?;
        LnNet::new(layers).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(msg),
            other => Error::Validation(other.to_string()),
        })
    }

    /// JSON document; floats use the shortest representation that
    /// round-trips exactly (at most 17 significant digits).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("network document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetDocument =
            serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
        Self::from_document(doc)
    }
}

fn apply_layer(layer: &Layer, h: &[f64], idx: usize) -> Result<Vec<f64>> {
    let degenerate = |e: Error| match e {
        Error::Degenerate(message) => Error::DegenerateLayer {
            layer: idx,
            message,
        },
        other => other,
    };
    match layer {
        Layer::Affine(a) => a.apply(h),
        Layer::Ln => tensor::layer_norm_eps(h, DEFAULT_EPS_ZERO).map_err(degenerate),
        Layer::Lng { groups } => {
            tensor::group_layer_norm_eps(h, *groups, DEFAULT_EPS_ZERO).map_err(degenerate)
        }
    }
}

fn validate(layers: &[Layer]) -> Result<(usize, usize)> {
    let (Some(Layer::Affine(first)), Some(Layer::Affine(_))) = (layers.first(), layers.last())
    else {
        return Err(Error::Validation(if layers.is_empty() {
            "network has no layers".into()
        } else {
            "network must start and end with an affine layer".into()
        }));
    };
    let input_dim = first.in_dim();
    let mut dim = input_dim;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 && layer.is_norm() && layers[i - 1].is_norm() {
            return Err(Error::Validation(format!(
                "normalization layers {} and {i} are adjacent",
                i - 1
            )));
        }
        match layer {
            Layer::Affine(a) => {
                if a.in_dim() != dim {
                    return Err(Error::Validation(format!(
                        "layer {i} expects {} inputs but receives {dim}",
                        a.in_dim()
                    )));
                }
                dim = a.out_dim();
            }
            Layer::Ln => {
                if dim < 2 {
                    return Err(Error::Validation(format!(
                        "layer {i}: LN on {dim} neuron(s)"
                    )));
                }
            }
            Layer::Lng { groups } => {
                tensor::group_size(dim, *groups)
                    .map_err(|e| Error::Validation(format!("layer {i}: {e}")))?;
            }
        }
    }
    Ok((input_dim, dim))
}

pub const DOCUMENT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDocument {
    pub version: u32,
    pub layers: Vec<LayerDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerDocument {
    Affine {
        rows: usize,
        cols: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Ln,
    Lng {
        groups: usize,
    },
}

/// Orthogonal `d x d` matrix with last column `1/sqrt(d)`; the other columns
/// come from Gram–Schmidt on `e_1, ..., e_(d-1)` in that order.
pub fn build_orthogonal_q(d: usize) -> Result<Matrix> {
    if d < 2 {
        return Err(Error::Shape(format!("orthogonal Q needs d >= 2, got {d}")));
    }
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for k in 0..d - 1 {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        // Two passes of modified Gram–Schmidt keep Q orthogonal to round-off.
        for _ in 0..2 {
            for q in basis.iter().chain(std::iter::once(&ones)) {
                let c = tensor::dot(&v, q);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let n = tensor::norm(&v);
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    basis.push(ones);
    Matrix::from_columns(&basis)
}

/// Linear maps that realize spherical projection on `R^d_sp` through an LN
/// on `R^(d_sp + 1)`: `post(LN(pre(x))) = x / ||x||`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpEmbedding {
    pub pre: Affine,
    pub post: Affine,
    pub q: Matrix,
}

impl SpEmbedding {
    pub fn sp_dim(&self) -> usize {
        self.pre.in_dim()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.pre.apply(x)?;
        let y = tensor::layer_norm(&z)?;
        self.post.apply(&y)
    }

    pub fn as_net(&self) -> LnNet {
        LnNet::new(vec![
            Layer::Affine(self.pre.clone()),
            Layer::Ln,
            Layer::Affine(self.post.clone()),
        ])
        .expect("embedding layers chain")
    }
}

pub fn sp_as_lnnet(d_sp: usize) -> Result<SpEmbedding> {
    if d_sp < 2 {
        return Err(Error::Shape(format!(
            "spherical projection embedding needs d_sp >= 2, got {d_sp}"
        )));
    }
    let d = d_sp + 1;
    let q = build_orthogonal_q(d)?;
    // Q [I; 0] keeps the first d_sp columns of Q.
    let mut lift = Matrix::zeros(d, d_sp);
    for i in 0..d {
        for j in 0..d_sp {
            lift[(i, j)] = q[(i, j)];
        }
    }
    // (1/sqrt(d)) [I 0] Q^T keeps the first d_sp rows of Q^T.
    let post = lift.transpose().scaled(1.0 / (d as f64).sqrt());
    Ok(SpEmbedding {
        pre: Affine::linear(lift),
        post: Affine::linear(post),
        q,
    })
}

/// One step of a reference pipeline built from affine maps and spherical
/// projections.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Affine(Affine),
    Sp { dim: usize },
}

impl Stage {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Stage::Affine(a) => a.apply(x),
            Stage::Sp { dim } => {
                if x.len() != *dim {
                    return Err(Error::Shape(format!(
                        "spherical stage on R^{dim} received {} values",
                        x.len()
                    )));
                }
                tensor::spherical_project(x)
            }
        }
    }
}

/// Evaluates a stage pipeline directly, with true spherical projections.
pub fn evaluate_stages(stages: &[Stage], x: &[f64]) -> Result<Vec<f64>> {
    let mut h = x.to_vec();
    for (i, s) in stages.iter().enumerate() {
        h = s.apply(&h).map_err(|e| match e {
            Error::Degenerate(message) => Error::DegenerateLayer { layer: i, message },
            other => other,
        })?;
    }
    Ok(h)
}

/// Replaces every spherical stage with its LN embedding and merges adjacent
/// affine maps.
pub fn compile(stages: &[Stage]) -> Result<LnNet> {
    let mut layers = Vec::new();
    let mut pending: Option<Affine> = None;
    let mut dim: Option<usize> = None;
    for (i, stage) in stages.iter().enumerate() {
        match stage {
            Stage::Affine(a) => {
                if let Some(d) = dim {
                    if a.in_dim() != d {
                        return Err(Error::Shape(format!(
                            "stage {i} expects {} inputs but receives {d}",
                            a.in_dim()
                        )));
                    }
                }
                dim = Some(a.out_dim());
                pending = Some(match pending {
                    None => a.clone(),
                    Some(p) => p.then(a)?,
                });
            }
            Stage::Sp { dim: sp_dim } => {
                if let Some(d) = dim {
                    if *sp_dim != d {
                        return Err(Error::Shape(format!(
                            "stage {i} projects R^{sp_dim} but receives {d} values"
                        )));
                    }
                }
                let emb = sp_as_lnnet(*sp_dim)?;
                let pre = match pending.take() {
                    None => emb.pre,
                    Some(p) => p.then(&emb.pre)?,
                };
                layers.push(Layer::Affine(pre));
                layers.push(Layer::Ln);
                pending = Some(emb.post);
                dim = Some(*sp_dim);
            }
        }
    }
    match pending {
        Some(p) => layers.push(Layer::Affine(p)),
        None => return Err(Error::Validation("cannot compile an empty pipeline".into())),
    }
    LnNet::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_net() {
        let net = LnNet::new(vec![Layer::Affine(Affine::identity(3))]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(net.norm_layer_count(), 0);
    }

    #[test]
    fn ln_sandwich() {
        let net = LnNet::new(vec![
            Layer::Affine(Affine::identity(2)),
            Layer::Ln,
            Layer::Affine(Affine::identity(2)),
        ])
        .unwrap();
        let y = net.forward(&[0.0, 2.0]).unwrap();
        assert!(max_diff(&y, &[-1.0, 1.0]) < 1e-15);
    }

    #[test]
    fn degenerate_layer_reports_index() {
        let net = LnNet::new(vec![
            Layer::Affine(Affine::identity(2)),
            Layer::Ln,
            Layer::Affine(Affine::identity(2)),
        ])
        .unwrap();
        match net.forward(&[3.0, 3.0]) {
            Err(Error::DegenerateLayer { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_rules() {
        assert!(LnNet::new(vec![]).is_err());
        assert!(LnNet::new(vec![Layer::Ln]).is_err());
        let id = || Layer::Affine(Affine::identity(4));
        assert!(LnNet::new(vec![id(), Layer::Ln, Layer::Ln, id()]).is_err());
        assert!(LnNet::new(vec![id(), Layer::Lng { groups: 3 }, id()]).is_err());
        assert!(LnNet::new(vec![id(), Layer::Lng { groups: 2 }, id()]).is_ok());
        let narrow = Layer::Affine(Affine::linear(Matrix::zeros(1, 4)));
        assert!(LnNet::new(vec![narrow, Layer::Ln, Layer::Affine(Affine::identity(1))]).is_err());
        let mismatch = Layer::Affine(Affine::identity(3));
        assert!(LnNet::new(vec![id(), mismatch]).is_err());
    }

    #[test]
    fn orthogonal_q_properties() {
        let q2 = build_orthogonal_q(2).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((q2[(0, 1)] - r).abs() < 1e-15 && (q2[(1, 1)] - r).abs() < 1e-15);
        assert!((q2[(0, 0)] * r + q2[(1, 0)] * r).abs() < 1e-15);
        for d in 2..9 {
            let q = build_orthogonal_q(d).unwrap();
            let qtq = q.transpose().matmul(&q).unwrap();
            assert!(qtq.sub(&Matrix::identity(d)).unwrap().frobenius_norm() < 1e-12);
            for i in 0..d {
                assert!((q[(i, d - 1)] - 1.0 / (d as f64).sqrt()).abs() < 1e-15);
            }
            let mut rng = SplitMix64::new(d as u64);
            let mut z = rng.normal_vec(d - 1);
            z.push(0.0);
            let lifted = q.matvec(&z).unwrap();
            assert!(lifted.iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(build_orthogonal_q(1).is_err());
    }

    #[test]
    fn sp_embedding_matches_projection() {
        let emb = sp_as_lnnet(2).unwrap();
        let y = emb.apply(&[3.0, 4.0]).unwrap();
        assert!(max_diff(&y, &[0.6, 0.8]) < 1e-12);
        assert!(emb.apply(&[0.0, 0.0]).is_err());
        let mut rng = SplitMix64::new(11);
        for d_sp in [2, 3, 5] {
            let emb = sp_as_lnnet(d_sp).unwrap();
            assert_eq!(emb.pre.w.shape(), (d_sp + 1, d_sp));
            assert_eq!(emb.post.w.shape(), (d_sp, d_sp + 1));
            for _ in 0..100 {
                let x = rng.normal_vec(d_sp);
                let want = tensor::spherical_project(&x).unwrap();
                assert!(max_diff(&emb.apply(&x).unwrap(), &want) <= 1e-9);
            }
        }
    }

    #[test]
    fn compile_merges_affines() {
        let stages = [
            Stage::Affine(Affine::identity(2)),
            Stage::Affine(Affine::identity(2)),
        ];
        let net = compile(&stages).unwrap();
        assert_eq!(net.layers().len(), 1);
        assert_eq!(net.layers()[0], Layer::Affine(Affine::identity(2)));
    }

    #[test]
    fn compile_single_sp_stage() {
        let net = compile(&[Stage::Sp { dim: 2 }]).unwrap();
        assert_eq!(net.norm_layer_count(), 1);
        assert_eq!(net.hidden_widths(), vec![3]);
        let y = net.forward(&[3.0, 4.0]).unwrap();
        assert!(max_diff(&y, &[0.6, 0.8]) < 1e-12);
    }

    #[test]
    fn compile_rejects_broken_chain() {
        let stages = [Stage::Affine(Affine::identity(3)), Stage::Sp { dim: 2 }];
        assert!(matches!(compile(&stages), Err(Error::Shape(_))));
        assert!(compile(&[]).is_err());
    }

    #[test]
    fn affine_only_net_collapses() {
        let mut rng = SplitMix64::new(5);
        let mut rand_affine = |r: usize, c: usize| {
            Affine::new(
                Matrix::new(r, c, rng.normal_vec(r * c)).unwrap(),
                rng.normal_vec(r),
            )
            .unwrap()
        };
        let layers = vec![
            Layer::Affine(rand_affine(4, 3)),
            Layer::Affine(rand_affine(2, 4)),
            Layer::Affine(rand_affine(5, 2)),
        ];
        let net = LnNet::new(layers).unwrap();
        let single = net.as_single_affine().unwrap();
        let x = [0.3, -1.1, 2.0];
        assert!(max_diff(&net.forward(&x).unwrap(), &single.apply(&x).unwrap()) < 1e-10);
    }

    #[test]
    fn document_rejects_invalid_nets() {
        let adjacent = r#"{"version":1,"layers":[
            {"kind":"affine","rows":2,"cols":2,"w":[1,0,0,1],"b":[0,0]},
            {"kind":"ln"},{"kind":"ln"},
            {"kind":"affine","rows":2,"cols":2,"w":[1,0,0,1],"b":[0,0]}]}"#;
        assert!(matches!(LnNet::from_json(adjacent), Err(Error::Validation(_))));
        let empty = r#"{"version":1,"layers":[]}"#;
        assert!(matches!(LnNet::from_json(empty), Err(Error::Validation(_))));
        let bad_version = r#"{"version":2,"layers":[]}"#;
        assert!(matches!(LnNet::from_json(bad_version), Err(Error::Document(_))));
        let garbage = "{\"version\":1,\n\"layers\":[{\"kind\":\"conv\"}]}";
        match LnNet::from_json(garbage) {
            Err(Error::Document(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let short = r#"{"version":1,"layers":[{"kind":"affine","rows":2,"cols":2,"w":[1,0,0],"b":[0,0]}]}"#;
        assert!(matches!(LnNet::from_json(short), Err(Error::Document(_))));
    }
}
