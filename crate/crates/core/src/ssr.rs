//! Sum-of-squares ratios between two classes.
//!
//! `SSR = (SS(X1) + SS(X2)) / SS([X1, X2])` compares within-class spread to
//! total spread. Its infimum over linear maps (LSSR) is the smallest
//! generalized eigenvalue of `M u = lambda N u`, where `M` is the
//! within-class scatter and `N` the total scatter. No affine network can go
//! below LSSR, but a single LN layer can: [`break_lssr`] builds such a map
//! along the minimizing direction.

use serde::{Deserialize, Serialize};

use crate::datasets::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, Affine, Layer, LnNet};
use crate::rng::SplitMix64;
use crate::tensor::{self, Matrix};

/// Smallest `|f'(0)|` for which a first-order break is attempted.
pub const EPS_DERIV: f64 = 1e-8;
/// A break must undercut LSSR by at least this much.
pub const EPS_MARGIN: f64 = 1e-10;
/// `N` counts as singular when its smallest eigenvalue is below this
/// fraction of its trace.
pub const EPS_PD: f64 = 1e-10;

/// Two classes of points in the same space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPair {
    x1: Matrix,
    x2: Matrix,
}

impl ClassPair {
    pub fn new(x1: Matrix, x2: Matrix) -> Result<Self> {
        if x1.rows() != x2.rows() {
            return Err(Error::Shape(format!(
                "classes live in R^{} and R^{}",
                x1.rows(),
                x2.rows()
            )));
        }
        if x1.cols() == 0 || x2.cols() == 0 {
            return Err(Error::Validation("each class needs at least one point".into()));
        }
        Ok(Self { x1, x2 })
    }

    /// Class with the smaller label becomes `X1`.
    pub fn from_dataset(data: &LabeledDataset) -> Result<Self> {
        let mut parts = datasets::split_by_class(data);
        if parts.len() != 2 {
            return Err(Error::NotBinary {
                classes: parts.len(),
            });
        }
        let (_, x2) = parts.pop().expect("two parts");
        let (_, x1) = parts.pop().expect("two parts");
        Self::new(x1, x2)
    }

    pub fn x1(&self) -> &Matrix {
        &self.x1
    }

    pub fn x2(&self) -> &Matrix {
        &self.x2
    }

    pub fn dim(&self) -> usize {
        self.x1.rows()
    }

    pub fn all(&self) -> Matrix {
        self.x1.hcat(&self.x2).expect("same row count")
    }

    /// One-dimensional images `u^T x` of both classes.
    pub fn project(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = |x: &Matrix| x.columns().map(|c| tensor::dot(u, &c)).collect();
        (p(&self.x1), p(&self.x2))
    }

    /// Applies an arbitrary map to every point.
    pub fn map<F>(&self, mut f: F) -> Result<ClassPair>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut m = |x: &Matrix| -> Result<Matrix> {
            let cols = x.columns().map(|c| f(&c)).collect::<Result<Vec<_>>>()?;
            Matrix::from_columns(&cols)
        };
        ClassPair::new(m(&self.x1)?, m(&self.x2)?)
    }
}

pub fn ssr(pair: &ClassPair) -> Result<f64> {
    let total = tensor::sum_of_squares(&pair.all())?;
    if total <= tensor::DEFAULT_EPS_ZERO {
        return Err(Error::Degenerate("total sum of squares is zero".into()));
    }
    let within = tensor::sum_of_squares(&pair.x1)? + tensor::sum_of_squares(&pair.x2)?;
    Ok((within / total).clamp(0.0, 1.0))
}

/// SSR of two scalar samples.
pub fn ssr_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let total = tensor::sum_of_squares_1d(&all);
    if !(total > 0.0) {
        return Err(Error::Degenerate("projected samples are all equal".into()));
    }
    let within = tensor::sum_of_squares_1d(a) + tensor::sum_of_squares_1d(b);
    Ok((within / total).clamp(0.0, 1.0))
}

/// Within-class scatter `M` and total scatter `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPair {
    pub m: Matrix,
    pub n: Matrix,
}

/// `u^T M u = SS(u^T X1) + SS(u^T X2)` and `u^T N u = SS([u^T X1, u^T X2])`.
/// `N` is taken about the pooled mean, which is the midpoint of the class
/// means when the classes have equal size.
pub fn scatter_matrices(pair: &ClassPair) -> ScatterPair {
    let d = pair.dim();
    let mut m = Matrix::zeros(d, d);
    for x in [&pair.x1, &pair.x2] {
        accumulate_scatter(&mut m, x, &column_mean(x));
    }
    let all = pair.all();
    let mut n = Matrix::zeros(d, d);
    accumulate_scatter(&mut n, &all, &column_mean(&all));
    ScatterPair { m, n }
}

fn column_mean(x: &Matrix) -> Vec<f64> {
    (0..x.rows()).map(|i| tensor::mean(x.row(i))).collect()
}

fn accumulate_scatter(acc: &mut Matrix, x: &Matrix, mean: &[f64]) {
    let d = x.rows();
    for col in x.columns() {
        let dev: Vec<f64> = col.iter().zip(mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                acc[(i, j)] += dev[i] * dev[j];
            }
        }
    }
}

/// First-order statistics of `f_SSR` at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeStats {
    pub fprime0: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

/// `f'(0) = -2 (T1 + T2) / T3` for the scalar samples `a` (class 1) and
/// `b` (class 2).
///
/// With `m1 = m2` the statistics are the familiar
/// `T1 = Δ² (κ1 + κ2)`, `T3 = (2σ1² + 2σ2² + Δ²)²`; unequal sizes are
/// weighted by `s = 2 m1 m2 / (m1 + m2)`.
pub fn derivative_stats(a: &[f64], b: &[f64]) -> Result<DerivativeStats> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("each class needs at least one point".into()));
    }
    let moments = |x: &[f64]| {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let skew = x.iter().map(|v| (v - mu).powi(3)).sum::<f64>() / n;
        let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
        (n, mu, var, skew, sq)
    };
    let (m1, mu1, v1, k1, e1) = moments(a);
    let (m2, mu2, v2, k2, e2) = moments(b);
    let s = 2.0 * m1 * m2 / (m1 + m2);
    let delta = mu1 - mu2;
    let spread = m1 * v1 + m2 * v2;
    let t1 = delta * delta * (m1 * k1 + m2 * k2) / s;
    let t2 = (2.0 * delta * delta * (m1 * mu1 * v1 + m2 * mu2 * v2) - delta * (e1 - e2) * spread) / s;
    let t3 = (2.0 * spread / s + delta * delta).powi(2);
    if !(t3 > 0.0) {
        return Err(Error::Degenerate("all projected points coincide (T3 = 0)".into()));
    }
    Ok(DerivativeStats {
        fprime0: -2.0 * (t1 + t2) / t3,
        t1,
        t2,
        t3,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsrReport {
    pub ssr: f64,
    pub lssr: f64,
    pub lambda_star: f64,
    /// Unit minimizing direction; sign fixed so its largest-magnitude entry
    /// is positive.
    pub u_star: Vec<f64>,
    /// `SSR(u*^T X1, u*^T X2)`; equals `lambda_star` up to round-off.
    pub ssr_along_u: f64,
    /// `||N^-1 M u* - lambda* u*||`.
    pub residual: f64,
    /// Number of generalized eigenvalues within 1e-8 of `lambda_star`.
    pub multiplicity: usize,
    pub fprime0: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    /// Optimal `W^T W` for a linear map to one dimension: `u* u*^T`.
    pub optimal_w_diagnostic: Matrix,
    pub scatter: ScatterPair,
}

/// Minimum generalized eigenpair of `(M, N)` via Cholesky whitening.
fn min_generalized_eigen(scatter: &ScatterPair) -> Result<(f64, Vec<f64>, usize)> {
    let n = &scatter.n;
    let trace = n.trace();
    let threshold = EPS_PD * trace;
    let n_eig = linalg::symmetric_eigen(n)?;
    let min_n = n_eig.values.first().copied().unwrap_or(0.0);
    if !(trace > 0.0) || min_n < threshold {
        return Err(Error::SingularScatter {
            min_eigenvalue: min_n,
            threshold,
        });
    }
    let l = linalg::cholesky(n)?;
    let d = n.rows();
    // A = L^-1 M L^-T, built column by column.
    let mut linv_m = Matrix::zeros(d, d);
    for j in 0..d {
        let col = linalg::solve_lower(&l, &scatter.m.column(j));
        for i in 0..d {
            linv_m[(i, j)] = col[i];
        }
    }
    let mut a = Matrix::zeros(d, d);
    for i in 0..d {
        let row = linalg::solve_lower(&l, linv_m.row(i));
        for j in 0..d {
            a[(i, j)] = row[j];
        }
    }
    let eig = linalg::symmetric_eigen(&a)?;
    let lambda = eig.values[0];
    let multiplicity = eig.values.iter().filter(|v| (*v - lambda).abs() < 1e-8).count();
    let y = eig.vectors.column(0);
    let mut u = linalg::solve_lower_transpose(&l, &y);
    let nu = tensor::norm(&u);
    u.iter_mut().for_each(|v| *v /= nu);
    let lead = u.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    if lead < 0.0 {
        u.iter_mut().for_each(|v| *v = -*v);
    }
    Ok((lambda, u, multiplicity))
}

pub fn lssr(pair: &ClassPair) -> Result<SsrReport> {
    let total_ssr = ssr(pair)?;
    let scatter = scatter_matrices(pair);
    let (lambda, u, multiplicity) = min_generalized_eigen(&scatter)?;
    let (a, b) = pair.project(&u);
    let ssr_along_u = ssr_1d(&a, &b)?;
    let stats = derivative_stats(&a, &b)?;

    let mu = scatter.m.matvec(&u)?;
    let l = linalg::cholesky(&scatter.n)?;
    let ninv_mu = linalg::solve_lower_transpose(&l, &linalg::solve_lower(&l, &mu));
    let residual = tensor::norm(
        &ninv_mu.iter().zip(&u).map(|(x, y)| x - lambda * y).collect::<Vec<_>>(),
    );

    let d = u.len();
    let mut w = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            w[(i, j)] = u[i] * u[j];
        }
    }
    Ok(SsrReport {
        ssr: total_ssr,
        lssr: lambda.clamp(0.0, 1.0),
        lambda_star: lambda,
        u_star: u,
        ssr_along_u,
        residual,
        multiplicity,
        fprime0: stats.fprime0,
        t1: stats.t1,
        t2: stats.t2,
        t3: stats.t3,
        optimal_w_diagnostic: w,
        scatter,
    })
}

/// Smallest SSR over `trials` random unit directions.
pub fn lssr_bruteforce(pair: &ClassPair, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Validation("need at least one trial".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut best = f64::INFINITY;
    for _ in 0..trials {
        let u = rng.unit_vector(pair.dim());
        let (a, b) = pair.project(&u);
        if let Ok(v) = ssr_1d(&a, &b) {
            best = best.min(v);
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Degenerate("every sampled projection collapsed".into()))
    }
}

/// `t -> SSR(psi(t; X1), psi(t; X2))` with `psi(t; x) = (x t + 1) / sqrt(1 + x² t²)`
/// applied to the projections `x = u*^T x`.
#[derive(Clone, Debug)]
pub struct FssrCurve {
    a: Vec<f64>,
    b: Vec<f64>,
    lssr: f64,
}

impl FssrCurve {
    pub fn new(pair: &ClassPair) -> Result<Self> {
        let report = lssr(pair)?;
        Ok(Self::from_report(pair, &report))
    }

    pub fn from_report(pair: &ClassPair, report: &SsrReport) -> Self {
        let (a, b) = pair.project(&report.u_star);
        Self {
            a,
            b,
            lssr: report.lssr,
        }
    }

    pub fn lssr(&self) -> f64 {
        self.lssr
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        if t == 0.0 {
            return Ok(self.lssr);
        }
        // psi - 1, written without cancellation; SSR ignores the shift.
        let g = |x: &f64| {
            let a = x * t;
            let r = (1.0 + a * a).sqrt();
            (a - a * a / (1.0 + r)) / r
        };
        let a: Vec<f64> = self.a.iter().map(g).collect();
        let b: Vec<f64> = self.b.iter().map(g).collect();
        ssr_1d(&a, &b)
    }

    pub fn derivative_at_zero(&self) -> Result<DerivativeStats> {
        derivative_stats(&self.a, &self.b)
    }
}

pub fn fssr(t: f64, pair: &ClassPair) -> Result<f64> {
    FssrCurve::new(pair)?.eval(t)
}

pub fn fssr_derivative_at_zero(pair: &ClassPair) -> Result<DerivativeStats> {
    FssrCurve::new(pair)?.derivative_at_zero()
}

/// An LN map that pushes SSR below the linear bound.
#[derive(Clone, Debug, Serialize)]
pub struct BreakResult {
    pub t_star: f64,
    /// `x -> Q [I; 0] (t u*^T x, 1)`, into the LN on `R^3`.
    pub psi_affine_in: Affine,
    /// `y -> v^T (1/sqrt(3)) [I 0] Q^T y` with `v = (1, 1)`.
    pub psi_affine_out: Affine,
    pub ssr_after: f64,
    pub lssr: f64,
    pub fprime0: f64,
    /// Line-search evaluations used.
    pub steps: usize,
}

impl BreakResult {
    /// `psi_affine_in`, LN, `psi_affine_out` as a network.
    pub fn net(&self) -> LnNet {
        LnNet::new(vec![
            Layer::Affine(self.psi_affine_in.clone()),
            Layer::Ln,
            Layer::Affine(self.psi_affine_out.clone()),
        ])
        .expect("break network layers chain")
    }
}

/// Line search along the descent direction of `f_SSR`: `|t|` starts at 0.1
/// and halves for up to `search_budget` steps; the opposite sign is tried if
/// the first one fails.
pub fn break_lssr(pair: &ClassPair, search_budget: usize) -> Result<BreakResult> {
    let report = lssr(pair)?;
    let curve = FssrCurve::from_report(pair, &report);
    let fprime0 = report.fprime0;
    if !(fprime0.abs() > EPS_DERIV) {
        return Err(Error::NoDescent {
            fprime0,
            threshold: EPS_DERIV,
        });
    }
    let target = report.lssr - EPS_MARGIN;
    let descent = -fprime0.signum();
    let mut steps = 0;
    let mut found = None;
    'search: for sign in [descent, -descent] {
        let mut t = 0.1;
        for _ in 0..search_budget {
            steps += 1;
            let value = curve.eval(sign * t)?;
            if value < target {
                found = Some((sign * t, value));
                break 'search;
            }
            t *= 0.5;
        }
    }
    let Some((t_star, ssr_after)) = found else {
        return Err(Error::SearchFailure { steps });
    };

    let emb = model::sp_as_lnnet(2)?;
    let lift = &emb.pre.w;
    let d = pair.dim();
    let mut inner = Matrix::zeros(2, d);
    for j in 0..d {
        inner[(0, j)] = t_star * report.u_star[j];
    }
    let w_in = lift.matmul(&inner)?;
    let b_in = lift.matvec(&[0.0, 1.0])?;
    let v = Matrix::from_rows(&[[1.0, 1.0]])?;
    let w_out = v.matmul(&emb.post.w)?;
    Ok(BreakResult {
        t_star,
        psi_affine_in: Affine::new(w_in, b_in)?,
        psi_affine_out: Affine::new(w_out, vec![0.0])?,
        ssr_after,
        lssr: report.lssr,
        fprime0,
        steps,
    })
}
