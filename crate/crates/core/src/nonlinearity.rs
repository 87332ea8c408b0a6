//! Hessian-based nonlinearity of LN and group LN.
//!
//! For `f: R^d -> R^d` the indicator is `H(f; x) = sum_i ||∇² f_i(x)||_F²`.
//! It vanishes for affine maps. For LN it has the closed form
//! `3 (d - 2) / (d σ⁴)`; for group LN with `g` groups of size `c` it is
//! `sum_i 3 (c - 2) / (c σ_i⁴)`, where `σ_i` is the standard deviation of
//! group `i`. Grouping amplifies the measure: `H_G >= H_L` whenever
//! `g <= d / 3`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, NormStats, DEFAULT_EPS_ZERO};

fn stddev_checked(x: &[f64]) -> Result<f64> {
    let s = NormStats::of(x).stddev;
    if !(s > DEFAULT_EPS_ZERO) {
        return Err(Error::Degenerate("constant input has no defined LN Hessian".into()));
    }
    Ok(s)
}

pub fn hessian_measure_ln_closed(x: &[f64]) -> Result<f64> {
    let d = x.len();
    if d < 2 {
        return Err(Error::Shape(format!("LN needs d >= 2, got {d}")));
    }
    let s2 = stddev_checked(x)?.powi(2);
    Ok(3.0 * (d as f64 - 2.0) / (d as f64 * s2 * s2))
}

pub fn hessian_measure_lng_closed(x: &[f64], groups: usize) -> Result<f64> {
    let c = tensor::group_size(x.len(), groups)?;
    x.chunks(c).map(hessian_measure_ln_closed).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Ln,
    Lng(usize),
}

impl NormKind {
    pub fn apply(self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            NormKind::Ln => tensor::layer_norm(x),
            NormKind::Lng(g) => tensor::group_layer_norm(x, g),
        }
    }

    pub fn groups(self) -> usize {
        match self {
            NormKind::Ln => 1,
            NormKind::Lng(g) => g,
        }
    }

    pub fn closed_form(self, x: &[f64]) -> Result<f64> {
        match self {
            NormKind::Ln => hessian_measure_ln_closed(x),
            NormKind::Lng(g) => hessian_measure_lng_closed(x, g),
        }
    }
}

/// Default finite-difference step for `x`.
pub fn default_step(x: &[f64]) -> f64 {
    1e-4 * (1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// `sum_i ||∇² f_i(x)||_F²` by central differences with step `h`:
/// `∂²f/∂x_j∂x_k ≈ [f(x+he_j+he_k) - f(x+he_j-he_k) - f(x-he_j+he_k) + f(x-he_j-he_k)] / 4h²`.
pub fn hessian_measure_fd_fn<F>(f: F, x: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d = x.len();
    let mut total = 0.0;
    let mut probe = x.to_vec();
    let mut eval = |dj: f64, j: usize, dk: f64, k: usize| -> Result<Vec<f64>> {
        probe.copy_from_slice(x);
        probe[j] += dj;
        probe[k] += dk;
        f(&probe)
    };
    for j in 0..d {
        for k in j..d {
            let pp = eval(h, j, h, k)?;
            let pm = eval(h, j, -h, k)?;
            let mp = eval(-h, j, h, k)?;
            let mm = eval(-h, j, -h, k)?;
            let entry: f64 = (0..pp.len())
                .map(|i| ((pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * h * h)).powi(2))
                .sum();
            // Off-diagonal entries appear twice in a symmetric Hessian.
            total += if j == k { entry } else { 2.0 * entry };
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FdEstimate {
    pub value: f64,
    pub step: f64,
    /// The step is not small against the smallest group spread, so the
    /// truncation error may dominate.
    pub ill_conditioned: bool,
}

pub fn hessian_measure_fd(kind: NormKind, x: &[f64], h: Option<f64>) -> Result<FdEstimate> {
    let c = tensor::group_size(x.len(), kind.groups())?;
    let min_sigma = x
        .chunks(c)
        .map(stddev_checked)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let step = h.unwrap_or_else(|| default_step(x));
    let value = hessian_measure_fd_fn(|p| kind.apply(p), x, step)?;
    Ok(FdEstimate {
        value,
        step,
        ill_conditioned: step > 1e-2 * min_sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NonlinearityReport {
    pub h_closed: f64,
    pub h_fd: f64,
    pub rel_err: f64,
    pub ill_conditioned: bool,
    pub per_group_variances: Vec<f64>,
    pub global_variance: f64,
    pub group_count: usize,
    pub group_size: usize,
}

/// Closed form and finite-difference oracle side by side.
pub fn nonlinearity_report(kind: NormKind, x: &[f64], h: Option<f64>) -> Result<NonlinearityReport> {
    let g = kind.groups();
    let c = tensor::group_size(x.len(), g)?;
    let h_closed = kind.closed_form(x)?;
    let fd = hessian_measure_fd(kind, x, h)?;
    Ok(NonlinearityReport {
        h_closed,
        h_fd: fd.value,
        rel_err: (h_closed - fd.value).abs() / h_closed.max(1e-12),
        ill_conditioned: fd.ill_conditioned,
        per_group_variances: x.chunks(c).map(|s| NormStats::of(s).variance()).collect(),
        global_variance: NormStats::of(x).variance(),
        group_count: g,
        group_size: c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupRatioReport {
    pub h_ln: f64,
    pub h_lng: f64,
    /// `h_lng / h_ln`.
    pub ratio: f64,
    pub group_count: usize,
    pub group_size: usize,
    pub per_group_variances: Vec<f64>,
    pub global_variance: f64,
    /// `σ² - mean(σ_i²)`; never negative.
    pub variance_gap: f64,
    pub variance_gap_holds: bool,
    /// `sum 1/σ_i⁴ >= g / σ⁴`.
    pub inverse_quartic_holds: bool,
    /// `g (d - 2g) / (d - 2)`, the guaranteed lower bound on the ratio.
    pub ratio_lower_bound: f64,
}

/// Compares grouped and plain LN at `x` through the closed forms.
pub fn group_ratio_report(x: &[f64], groups: usize) -> Result<GroupRatioReport> {
    let d = x.len();
    if d <= 2 {
        return Err(Error::UndefinedRatio(format!(
            "the LN measure vanishes identically at d = {d}"
        )));
    }
    let c = tensor::group_size(d, groups)?;
    let h_ln = hessian_measure_ln_closed(x)?;
    let h_lng = hessian_measure_lng_closed(x, groups)?;
    let vars: Vec<f64> = x.chunks(c).map(|s| NormStats::of(s).variance()).collect();
    let global = NormStats::of(x).variance();
    let gap = global - vars.iter().sum::<f64>() / groups as f64;
    let inv4: f64 = vars.iter().map(|v| 1.0 / (v * v)).sum();
    let bound = groups as f64 / (global * global);
    let (df, gf) = (d as f64, groups as f64);
    Ok(GroupRatioReport {
        h_ln,
        h_lng,
        ratio: h_lng / h_ln,
        group_count: groups,
        group_size: c,
        per_group_variances: vars,
        global_variance: global,
        variance_gap: gap,
        variance_gap_holds: gap >= -1e-12 * global.max(1.0),
        inverse_quartic_holds: inv4 >= bound * (1.0 - 1e-9),
        ratio_lower_bound: gf * (df - 2.0 * gf) / (df - 2.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(hessian_measure_ln_closed(&[3.0, -1.0]).unwrap(), 0.0);
        let alt = [1.0, -1.0, 1.0, -1.0];
        assert!((hessian_measure_ln_closed(&alt).unwrap() - 1.5).abs() < 1e-15);
        let doubled: Vec<f64> = alt.iter().map(|v| 2.0 * v).collect();
        assert!((hessian_measure_ln_closed(&doubled).unwrap() - 1.5 / 16.0).abs() < 1e-15);
        assert!(hessian_measure_ln_closed(&[2.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn grouped_examples() {
        let alt8 = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        assert!((hessian_measure_lng_closed(&alt8, 2).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(hessian_measure_lng_closed(&alt8, 4).unwrap(), 0.0);
        let x = [0.3, -1.2, 2.0, 0.7, 1.1, -0.4];
        assert_eq!(
            hessian_measure_lng_closed(&x, 1).unwrap(),
            hessian_measure_ln_closed(&x).unwrap()
        );
    }

    #[test]
    fn finite_differences_agree() {
        let alt = [1.0, -1.0, 1.0, -1.0];
        let fd = hessian_measure_fd(NormKind::Ln, &alt, None).unwrap();
        assert!((fd.value - 1.5).abs() < 1e-3);
        assert!(!fd.ill_conditioned);
        let alt8 = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let fd = hessian_measure_fd(NormKind::Lng(2), &alt8, None).unwrap();
        assert!((fd.value - 3.0).abs() < 2e-3);
    }

    #[test]
    fn affine_maps_have_no_curvature() {
        let f = |x: &[f64]| Ok(vec![2.0 * x[0] - x[1] + 3.0, 0.5 * x[1]]);
        let v = hessian_measure_fd_fn(f, &[0.7, -2.0], 1e-4).unwrap();
        assert!(v < 1e-6);
    }

    #[test]
    fn ratio_examples() {
        let alt8 = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let r = group_ratio_report(&alt8, 2).unwrap();
        assert!((r.ratio - 4.0 / 3.0).abs() < 1e-12);
        let r = group_ratio_report(&alt8, 1).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-15);
        assert!(matches!(group_ratio_report(&[1.0, 2.0], 1), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn step_large_against_spread_is_flagged() {
        let x = [1.0, 1.0 + 1e-5, 1.0 - 1e-5];
        assert!(hessian_measure_fd(NormKind::Ln, &x, None).unwrap().ill_conditioned);
    }
}
