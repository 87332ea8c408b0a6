use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use lnnet::datasets::{self, TableRow};
use lnnet::model::NetDocument;
use lnnet::nonlinearity::{self, NormKind};
use lnnet::rng::SplitMix64;
use lnnet::ssr::{self, ClassPair};
use lnnet::synthesis::{self, Readout, SynthesisResult};
use lnnet::{tensor, Error, LabeledDataset, LnNet, Tolerances};
use serde::{Deserialize, Serialize};

use crate::{BreakArgs, Failure, Format, GenArgs, HessianArgs, Kind, Mode, ShatterArgs, SsrArgs, SynthArgs, VerifyArgs};

const MODEL_VERSION: u32 = 1;

/// What `synth` writes and `verify` reads.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelBundle {
    version: u32,
    net: NetDocument,
    readout: Readout,
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Domain(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Failure::Domain(e.to_string()))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// Reads a dataset, honouring an overridden point-equality tolerance.
fn load(path: &Path, tol: &Tolerances) -> Result<LabeledDataset, Failure> {
    let data = datasets::load_csv(path).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
    if tol.eps_eq == Tolerances::default().eps_eq {
        return Ok(data);
    }
    Ok(LabeledDataset::with_eps(data.points().clone(), data.labels().to_vec(), tol.eps_eq)?)
}

pub fn gen(a: &GenArgs, _tol: &Tolerances) -> Result<(), Failure> {
    let data = match a.kind {
        Kind::Xor => datasets::gen_xor(),
        Kind::Table => {
            let name = a.row.as_deref().unwrap_or_default();
            let row = TableRow::from_name(name)
                .ok_or_else(|| Failure::Usage(format!("unknown table row {name:?}; expected a, b, c or d")))?;
            row.sample(a.m, a.seed)?
        }
        Kind::Random => datasets::gen_random_labels(a.m, a.dim, a.classes, a.seed)?,
    };
    let mut buf = Vec::new();
    datasets::write_csv(&data, &mut buf)?;
    emit(a.output.as_deref(), std::str::from_utf8(&buf).expect("csv is utf-8"))?;
    eprintln!("generated {} points in {} dimensions", data.len(), data.dim());
    Ok(())
}

pub fn ssr(a: &SsrArgs, tol: &Tolerances) -> Result<(), Failure> {
    let data = load(&a.input, tol)?;
    let pair = ClassPair::from_dataset(&data)?;
    let report = ssr::lssr(&pair)?;
    let text = match a.format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut s = String::from("quantity,value\n");
            for (k, v) in [
                ("ssr", report.ssr),
                ("lssr", report.lssr),
                ("lambda_star", report.lambda_star),
                ("ssr_along_u", report.ssr_along_u),
                ("residual", report.residual),
                ("fprime0", report.fprime0),
                ("t1", report.t1),
                ("t2", report.t2),
                ("t3", report.t3),
            ] {
                writeln!(s, "{k},{v:e}").unwrap();
            }
            writeln!(s, "multiplicity,{}", report.multiplicity).unwrap();
            s
        }
    };
    emit(a.output.as_deref(), &text)?;
    eprintln!("ssr {:.6}  lssr {:.6}  f'(0) {:.3e}", report.ssr, report.lssr, report.fprime0);
    Ok(())
}

pub fn break_lssr(a: &BreakArgs, tol: &Tolerances) -> Result<(), Failure> {
    let data = load(&a.input, tol)?;
    let pair = ClassPair::from_dataset(&data)?;
    let result = ssr::break_lssr(&pair, a.budget)?;
    if let Some(path) = &a.net {
        emit(Some(path), &result.net().to_json())?;
    }
    emit(a.output.as_deref(), &to_json(&result))?;
    eprintln!("lssr {:.6} -> ssr {:.6} at t = {:.3e}", result.lssr, result.ssr_after, result.t_star);
    Ok(())
}

pub fn synth(a: &SynthArgs, tol: &Tolerances) -> Result<(), Failure> {
    let data = load(&a.input, tol)?;
    let binary = match a.mode {
        Mode::Auto => data.classes().len() == 2,
        Mode::Binary => true,
        Mode::Multiclass => false,
    };
    let result: SynthesisResult = if binary {
        synthesis::synthesize_binary(&data, a.seed, tol)?
    } else {
        synthesis::synthesize_multiclass(&data, a.seed, tol)?
    };
    let bundle = ModelBundle {
        version: MODEL_VERSION,
        net: result.net.to_document(),
        readout: result.readout.clone(),
    };
    emit(Some(&a.out), &to_json(&bundle))?;
    if let Some(path) = &a.trace {
        emit(Some(path), &to_json(&result.trace))?;
    }
    eprintln!(
        "synthesized {} LN layers, width {}, {} attempt(s)",
        result.depth,
        result.net.max_width(),
        result.attempts
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    index: usize,
    label: usize,
    predicted: Option<usize>,
    output: f64,
    distance: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct LayerActivity {
    layer: usize,
    kind: &'static str,
    width: usize,
    mean: f64,
    stddev: f64,
}

#[derive(Serialize)]
struct VerifyReport {
    points: usize,
    correct: usize,
    accuracy: f64,
    predictions: Vec<Prediction>,
    layers: Vec<LayerActivity>,
}

fn layer_kind(layer: &lnnet::Layer) -> &'static str {
    match layer {
        lnnet::Layer::Affine(_) => "affine",
        lnnet::Layer::Ln => "ln",
        lnnet::Layer::Lng { .. } => "lng",
    }
}

pub fn verify(a: &VerifyArgs, tol: &Tolerances) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.net).map_err(|e| Failure::Domain(format!("{}: {e}", a.net.display())))?;
    let bundle: ModelBundle =
        serde_json::from_str(&text).map_err(|e| Failure::Domain(format!("{}: {e}", a.net.display())))?;
    if bundle.version != MODEL_VERSION {
        return Err(Failure::Domain(format!("unsupported model version {}", bundle.version)));
    }
    let net = LnNet::from_document(bundle.net)?;
    let data = load(&a.input, tol)?;
    if data.is_empty() {
        return Err(Error::Validation("dataset is empty".into()).into());
    }
    if data.dim() != net.input_dim() {
        return Err(Error::Shape(format!("net expects {} inputs, data has {}", net.input_dim(), data.dim())).into());
    }

    let mut predictions = Vec::with_capacity(data.len());
    // Per-layer running sums of activations over all points.
    let mut sums = vec![(0.0_f64, 0.0_f64, 0usize); net.layers().len()];
    for (index, x) in data.points().columns().enumerate() {
        let trace = net.forward_traced(&x)?;
        for (acc, act) in sums.iter_mut().zip(trace.iter().skip(1)) {
            acc.0 += act.iter().sum::<f64>();
            acc.1 += act.iter().map(|v| v * v).sum::<f64>();
            acc.2 += act.len();
        }
        let output = trace.last().map_or(f64::NAN, |y| y[0]);
        let label = data.labels()[index];
        let p = match bundle.readout.classify(output) {
            Ok(c) => Prediction { index, label, predicted: Some(c.label), output, distance: Some(c.distance), error: None },
            Err(e) => Prediction { index, label, predicted: None, output, distance: None, error: Some(e.to_string()) },
        };
        predictions.push(p);
    }
    let layers = net
        .layers()
        .iter()
        .zip(&sums)
        .enumerate()
        .map(|(layer, (l, &(s, s2, n)))| {
            let mean = s / n as f64;
            LayerActivity {
                layer,
                kind: layer_kind(l),
                width: n / data.len(),
                mean,
                stddev: (s2 / n as f64 - mean * mean).max(0.0).sqrt(),
            }
        })
        .collect();
    let correct = predictions.iter().filter(|p| p.predicted == Some(p.label)).count();
    let report = VerifyReport {
        points: data.len(),
        correct,
        accuracy: correct as f64 / data.len() as f64,
        predictions,
        layers,
    };

    let text = match a.format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut s = String::from("index,label,predicted,output,distance\n");
            for p in &report.predictions {
                let predicted = p.predicted.map_or_else(|| "ambiguous".to_string(), |v| v.to_string());
                let distance = p.distance.map_or_else(String::new, |v| format!("{v:e}"));
                writeln!(s, "{},{},{},{:e},{}", p.index, p.label, predicted, p.output, distance).unwrap();
            }
            s
        }
    };
    emit(a.output.as_deref(), &text)?;
    eprintln!("accuracy {}/{} = {:.4}", report.correct, report.points, report.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct HessianRow {
    groups: usize,
    group_size: usize,
    samples: usize,
    mean: f64,
    min: f64,
    max: f64,
    /// Mean of the per-sample ratio against plain LN.
    mean_ratio_vs_ln: f64,
    /// Largest relative error against finite differences, when checked.
    fd_max_rel_err: Option<f64>,
}

pub fn hessian(a: &HessianArgs) -> Result<(), Failure> {
    if a.samples == 0 {
        return Err(Failure::Usage("--samples must be positive".into()));
    }
    if a.groups.is_empty() {
        return Err(Failure::Usage("--groups must list at least one group count".into()));
    }
    for &g in &a.groups {
        tensor::group_size(a.dim, g)?;
    }
    let mut rng = SplitMix64::new(a.seed);
    let xs: Vec<Vec<f64>> = (0..a.samples).map(|_| rng.normal_vec(a.dim)).collect();
    let ln: Vec<f64> = xs.iter().map(|x| nonlinearity::hessian_measure_ln_closed(x)).collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(a.groups.len());
    for &g in &a.groups {
        let kind = if g == 1 { NormKind::Ln } else { NormKind::Lng(g) };
        let h: Vec<f64> = xs.iter().map(|x| kind.closed_form(x)).collect::<Result<_, _>>()?;
        let n = h.len() as f64;
        let fd_max_rel_err = if a.fd_samples > 0 {
            let mut worst = 0.0_f64;
            for x in xs.iter().take(a.fd_samples) {
                worst = worst.max(nonlinearity::nonlinearity_report(kind, x, None)?.rel_err);
            }
            Some(worst)
        } else {
            None
        };
        rows.push(HessianRow {
            groups: g,
            group_size: a.dim / g,
            samples: a.samples,
            mean: h.iter().sum::<f64>() / n,
            min: h.iter().copied().fold(f64::INFINITY, f64::min),
            max: h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_ratio_vs_ln: h.iter().zip(&ln).map(|(a, b)| a / b).sum::<f64>() / n,
            fd_max_rel_err,
        });
    }

    let text = match a.format {
        Format::Json => to_json(&rows),
        Format::Csv => {
            let mut s = String::from("groups,group_size,samples,mean,min,max,mean_ratio_vs_ln,fd_max_rel_err\n");
            for r in &rows {
                let fd = r.fd_max_rel_err.map_or_else(String::new, |v| format!("{v:e}"));
                writeln!(
                    s,
                    "{},{},{},{:e},{:e},{:e},{:e},{}",
                    r.groups, r.group_size, r.samples, r.mean, r.min, r.max, r.mean_ratio_vs_ln, fd
                )
                .unwrap();
            }
            s
        }
    };
    emit(a.output.as_deref(), &text)?;
    for r in &rows {
        eprintln!("g = {:>3}: mean {:.4e}  ratio vs LN {:.3}", r.groups, r.mean, r.mean_ratio_vs_ln);
    }
    Ok(())
}

pub fn shatter(a: &ShatterArgs, tol: &Tolerances) -> Result<(), Failure> {
    if a.points < 2 {
        return Err(Failure::Usage("--points must be at least 2".into()));
    }
    let mut rng = SplitMix64::new(a.seed);
    let cols: Vec<Vec<f64>> = (0..a.points).map(|_| rng.normal_vec(a.dim)).collect();
    let points = lnnet::Matrix::from_columns(&cols)?;
    let max_layers = a.max_layers.unwrap_or(a.points - 2);
    let report = synthesis::shatter_check(&points, max_layers, a.seed, tol)?;
    emit(a.output.as_deref(), &to_json(&report))?;
    eprintln!(
        "{}/{} labelings classified with at most {} LN layers (deepest {})",
        report.successes, report.labelings, max_layers, report.max_depth
    );
    if report.shattered {
        Ok(())
    } else {
        Err(Failure::Domain(format!("{} labelings failed", report.failures.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip_keeps_the_classifier() {
        let data = datasets::gen_xor();
        let r = synthesis::synthesize_binary(&data, 0, &Tolerances::default()).unwrap();
        let bundle = ModelBundle { version: MODEL_VERSION, net: r.net.to_document(), readout: r.readout.clone() };
        let back: ModelBundle = serde_json::from_str(&to_json(&bundle)).unwrap();
        let net = LnNet::from_document(back.net).unwrap();
        for (k, x) in data.points().columns().enumerate() {
            let y = net.forward(&x).unwrap()[0];
            assert_eq!(back.readout.classify(y).unwrap().label, data.labels()[k]);
        }
    }

    #[test]
    fn unknown_bundle_fields_are_rejected() {
        let text = r#"{"version":1,"net":{"version":1,"layers":[]},"readout":{"prototypes":[],"eps_proto":0.0},"extra":1}"#;
        assert!(serde_json::from_str::<ModelBundle>(text).is_err());
    }
}
