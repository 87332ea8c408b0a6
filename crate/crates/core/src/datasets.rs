//! Labeled point sets, the generators used throughout the experiments, and
//! CSV persistence (`x1,...,xd,label`).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{self, Matrix};
use crate::Tolerances;

/// `d x m` points with one class id per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    points: Matrix,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(points: Matrix, labels: Vec<usize>) -> Result<Self> {
        Self::with_eps(points, labels, Tolerances::default().eps_eq)
    }

    /// Validates with a custom "same point" threshold.
    pub fn with_eps(points: Matrix, labels: Vec<usize>, eps_eq: f64) -> Result<Self> {
        if points.cols() != labels.len() {
            return Err(Error::Shape(format!(
                "{} points but {} labels",
                points.cols(),
                labels.len()
            )));
        }
        if points.cols() == 0 {
            return Err(Error::Validation("dataset has no points".into()));
        }
        if points.rows() == 0 {
            return Err(Error::Validation("points have dimension 0".into()));
        }
        let cols: Vec<Vec<f64>> = points.columns().collect();
        for a in 0..cols.len() {
            for b in a + 1..cols.len() {
                if labels[a] != labels[b] && distance(&cols[a], &cols[b]) <= eps_eq {
                    return Err(Error::Validation(format!(
                        "points {a} and {b} coincide but carry labels {} and {}",
                        labels[a], labels[b]
                    )));
                }
            }
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.points.rows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        self.points.column(k)
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Same points, new labels (revalidated).
    pub fn relabeled(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.points.clone(), labels)
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// The four XOR corners: `(0,0)` and `(1,1)` are class 0, `(0,1)` and
/// `(1,0)` class 1.
pub fn gen_xor() -> LabeledDataset {
    let points = Matrix::from_columns(&[[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        .expect("static points");
    LabeledDataset::new(points, vec![0, 0, 1, 1]).expect("XOR is consistent")
}

/// A multivariate normal distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    covariance: Matrix,
    #[serde(skip)]
    factor: Option<Matrix>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, covariance: Matrix) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "covariance {:?} for a mean of length {d}",
                covariance.shape()
            )));
        }
        if covariance.asymmetry() > 1e-12 {
            return Err(Error::Validation("covariance is not symmetric".into()));
        }
        let factor = psd_factor(&covariance)?;
        Ok(Self {
            mean,
            covariance,
            factor: Some(factor),
        })
    }

    /// Axis-aligned Gaussian with the given per-axis variances.
    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        let mut cov = Matrix::zeros(variances.len(), variances.len());
        for (i, v) in variances.iter().enumerate() {
            cov[(i, i)] = *v;
        }
        Self::new(mean, cov)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> Vec<f64> {
        let l = self.factor.as_ref().expect("factor is set by the constructor");
        let z = rng.normal_vec(self.mean.len());
        let lz = l.matvec(&z).expect("square factor");
        lz.iter().zip(&self.mean).map(|(a, m)| a + m).collect()
    }
}

/// Cholesky factor that tolerates zero pivots, so degenerate covariances
/// still produce a factor with `L L^T = C`.
fn psd_factor(c: &Matrix) -> Result<Matrix> {
    let n = c.rows();
    let scale = (0..n).map(|i| c[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-12 * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = c[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag < -tol {
            return Err(Error::Validation(format!(
                "covariance is not positive semidefinite (pivot {j} = {diag:e})"
            )));
        }
        if diag <= tol {
            // Zero pivot: the rest of this column must vanish too.
            for i in j + 1..n {
                let mut s = c[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > tol.sqrt() * scale.sqrt() {
                    return Err(Error::Validation(
                        "covariance is not positive semidefinite".into(),
                    ));
                }
            }
            continue;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = c[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// `m` samples from each spec; class 0 first, then class 1.
pub fn gen_gaussian_pair(
    spec1: &GaussianSpec,
    spec2: &GaussianSpec,
    m: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if m == 0 {
        return Err(Error::Validation("need at least one sample per class".into()));
    }
    if spec1.mean.len() != spec2.mean.len() {
        return Err(Error::Shape("specs have different dimensions".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut cols = Vec::with_capacity(2 * m);
    for _ in 0..m {
        cols.push(spec1.sample(&mut rng));
    }
    for _ in 0..m {
        cols.push(spec2.sample(&mut rng));
    }
    let labels = (0..2 * m).map(|k| usize::from(k >= m)).collect();
    // Degenerate specs can repeat points; only genuine conflicts are errors.
    LabeledDataset::new(Matrix::from_columns(&cols)?, labels)
}

/// The four reference distributions of the SSR/LSSR table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableRow {
    /// `X1 = (X, X)`, `X2 = (X, 1 - X)` with `X` a fair coin.
    BernoulliXor,
    /// Concentric: `N(0, 4I)` against `N(0, 9I)`.
    Concentric,
    /// Well separated: `N((-3,-3), 4I)` against `N((3,3), I)`.
    Separated,
    /// Elongated: `N((-2,0), diag(1,9))` against `N((2,0), diag(1,9))`.
    Elongated,
}

impl TableRow {
    pub const ALL: [TableRow; 4] = [
        TableRow::BernoulliXor,
        TableRow::Concentric,
        TableRow::Separated,
        TableRow::Elongated,
    ];

    /// Published `(SSR, LSSR)` for 256 samples per class.
    pub fn reference(self) -> (f64, f64) {
        match self {
            TableRow::BernoulliXor => (0.9963, 0.9929),
            TableRow::Concentric => (0.9929, 0.9859),
            TableRow::Separated => (0.2304, 0.1312),
            TableRow::Elongated => (0.7536, 0.2157),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TableRow::BernoulliXor => "a",
            TableRow::Concentric => "b",
            TableRow::Separated => "c",
            TableRow::Elongated => "d",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }

    pub fn specs(self) -> Option<(GaussianSpec, GaussianSpec)> {
        let g = |m: [f64; 2], v: [f64; 2]| {
            GaussianSpec::diagonal(m.to_vec(), &v).expect("static spec is valid")
        };
        match self {
            TableRow::BernoulliXor => None,
            TableRow::Concentric => Some((g([0.0, 0.0], [4.0, 4.0]), g([0.0, 0.0], [9.0, 9.0]))),
            TableRow::Separated => Some((g([-3.0, -3.0], [4.0, 4.0]), g([3.0, 3.0], [1.0, 1.0]))),
            TableRow::Elongated => Some((g([-2.0, 0.0], [1.0, 9.0]), g([2.0, 0.0], [1.0, 9.0]))),
        }
    }

    pub fn sample(self, m: usize, seed: u64) -> Result<LabeledDataset> {
        match self.specs() {
            Some((a, b)) => gen_gaussian_pair(&a, &b, m, seed),
            None => gen_bernoulli_xor(m, seed),
        }
    }
}

fn gen_bernoulli_xor(m: usize, seed: u64) -> Result<LabeledDataset> {
    if m == 0 {
        return Err(Error::Validation("need at least one sample per class".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut cols = Vec::with_capacity(2 * m);
    for _ in 0..m {
        let x = rng.next_below(2) as f64;
        cols.push([x, x]);
    }
    for _ in 0..m {
        let x = rng.next_below(2) as f64;
        cols.push([x, 1.0 - x]);
    }
    let labels = (0..2 * m).map(|k| usize::from(k >= m)).collect();
    LabeledDataset::new(Matrix::from_columns(&cols)?, labels)
}

/// Standard normal points with uniform labels; every class appears.
pub fn gen_random_labels(m: usize, d: usize, classes: usize, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || m < classes {
        return Err(Error::Validation(format!(
            "need m >= classes >= 2, got m = {m}, classes = {classes}"
        )));
    }
    if d == 0 {
        return Err(Error::Validation("dimension must be positive".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let cols: Vec<Vec<f64>> = (0..m).map(|_| rng.normal_vec(d)).collect();
    let labels = loop {
        let labels: Vec<usize> = (0..m).map(|_| rng.next_below(classes as u64) as usize).collect();
        let seen: BTreeSet<usize> = labels.iter().copied().collect();
        if seen.len() == classes {
            break labels;
        }
    };
    LabeledDataset::new(Matrix::from_columns(&cols)?, labels)
}

/// Writes `x1,...,xd,label` rows. Floats use the shortest representation
/// that parses back to the same bits.
pub fn write_csv<W: Write>(data: &LabeledDataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<String> = (1..=data.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_io)?;
    for (k, col) in data.points().columns().enumerate() {
        let mut rec: Vec<String> = col.iter().map(|v| format!("{v:?}")).collect();
        rec.push(data.labels()[k].to_string());
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_csv(data, std::io::BufWriter::new(file))
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Validation(format!("{other:?}")),
    }
}

pub fn read_csv<R: Read>(input: R) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
        Some(r) => r.map_err(|e| parse_error(&e, 1))?,
    };
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    let d = fields.len().saturating_sub(1);
    let expected: Vec<String> = (1..=d).map(|i| format!("x{i}")).chain(["label".into()]).collect();
    if d == 0 || fields != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header x1,...,xd,label, found {:?}", fields.join(",")),
        });
    }
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| parse_error(&e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec.get(0).is_some_and(|f| f.trim().is_empty()) {
            continue;
        }
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let mut col = Vec::with_capacity(d);
        for (i, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("x{} = {field:?} is not a number", i + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("x{} is not finite", i + 1),
                });
            }
            col.push(v);
        }
        let label_field = rec[d].trim();
        let label: usize = label_field.parse().map_err(|_| Error::Parse {
            line,
            message: format!("label {label_field:?} is not a non-negative integer"),
        })?;
        cols.push(col);
        labels.push(label);
    }
    if cols.is_empty() {
        return Err(Error::Validation("dataset has no points".into()));
    }
    LabeledDataset::new(Matrix::from_columns(&cols)?, labels)
}

fn parse_error(e: &csv::Error, fallback_line: u64) -> Error {
    Error::Parse {
        line: e.position().map_or(fallback_line, |p| p.line()),
        message: e.to_string(),
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    read_csv(File::open(path)?)
}

/// Splits a dataset into per-class point matrices in ascending label order.
pub fn split_by_class(data: &LabeledDataset) -> Vec<(usize, Matrix)> {
    data.classes()
        .into_iter()
        .map(|c| {
            let cols: Vec<Vec<f64>> = data
                .points()
                .columns()
                .zip(data.labels())
                .filter(|(_, l)| **l == c)
                .map(|(p, _)| p)
                .collect();
            (c, Matrix::from_columns(&cols).expect("columns share a dimension"))
        })
        .collect()
}

/// Sample mean and (population) covariance of the columns.
pub fn sample_covariance(x: &Matrix) -> (Vec<f64>, Matrix) {
    let d = x.rows();
    let m = x.cols() as f64;
    let mean: Vec<f64> = (0..d).map(|i| tensor::mean(x.row(i))).collect();
    let mut cov = Matrix::zeros(d, d);
    for col in x.columns() {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (col[i] - mean[i]) * (col[j] - mean[j]) / m;
            }
        }
    }
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_layout() {
        let x = gen_xor();
        assert_eq!(x.len(), 4);
        assert_eq!(x.point(1), vec![1.0, 1.0]);
        assert_eq!(x.labels()[1], x.labels()[0]);
        assert_ne!(x.labels()[2], x.labels()[0]);
    }

    #[test]
    fn conflicting_duplicates_rejected() {
        let p = Matrix::from_columns(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(LabeledDataset::new(p.clone(), vec![0, 1]), Err(Error::Validation(_))));
        assert!(LabeledDataset::new(p, vec![1, 1]).is_ok());
    }

    #[test]
    fn zero_covariance_gives_the_mean() {
        let spec = GaussianSpec::diagonal(vec![1.5, -2.0], &[0.0, 0.0]).unwrap();
        let data = gen_gaussian_pair(&spec, &spec, 3, 5).unwrap_err();
        // Same spec on both classes puts conflicting labels on one point.
        assert!(matches!(data, Error::Validation(_)));
        let other = GaussianSpec::diagonal(vec![0.0, 0.0], &[0.0, 0.0]).unwrap();
        let data = gen_gaussian_pair(&spec, &other, 3, 5).unwrap();
        for k in 0..3 {
            assert_eq!(data.point(k), vec![1.5, -2.0]);
        }
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let cov = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(GaussianSpec::new(vec![0.0, 0.0], cov), Err(Error::Validation(_))));
    }

    #[test]
    fn rank_deficient_covariance_accepted() {
        let cov = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let spec = GaussianSpec::new(vec![0.0, 0.0], cov).unwrap();
        let mut rng = SplitMix64::new(1);
        let p = spec.sample(&mut rng);
        assert!((p[0] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn random_labels_cover_every_class() {
        let d = gen_random_labels(4, 3, 2, 11).unwrap();
        assert_eq!(d.classes(), vec![0, 1]);
        assert!(gen_random_labels(2, 3, 3, 0).is_err());
        let a = gen_random_labels(64, 10, 2, 1).unwrap();
        let b = gen_random_labels(64, 10, 2, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn csv_round_trip_in_memory() {
        let data = gen_random_labels(10, 3, 3, 4).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, data);
        assert!(String::from_utf8(buf).unwrap().starts_with("x1,x2,x3,label\n"));
    }

    #[test]
    fn csv_errors_carry_lines() {
        let text = "x1,x2,label\n0,0,0\n1,2,3,1\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "x1,x2,label\n0,0,0\n1,abc,1\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let text = "x1,x2,label\n0,0,-1\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_csv("".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}
