use serde::{Deserialize, Serialize};

/// Thresholds shared by validation, synthesis and readout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Norms and standard deviations at or below this count as zero.
    pub eps_zero: f64,
    /// Two input points closer than this are the same point.
    pub eps_eq: f64,
    /// Relative gap below which two pair sums count as equal
    /// (a parallelogram among projected points).
    pub eps_par: f64,
    /// Readout margin: prototypes closer than this to being equidistant are
    /// ambiguous.
    pub eps_proto: f64,
    /// Relative separation a sampled direction must keep between distinct points.
    pub eps_sep: f64,
    /// Rejection-sampling budget for directions.
    pub direction_budget: usize,
    /// Admissible directions compared before the best-conditioned one is kept.
    pub direction_candidates: usize,
    /// A fold whose smallest remaining cross-label gap (relative to the value range) is
    /// below this triggers a search over other pivot pairs and offsets.
    pub fold_gap_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            eps_zero: 1e-12,
            eps_eq: 1e-9,
            eps_par: 1e-9,
            eps_proto: 1e-6,
            eps_sep: 1e-6,
            direction_budget: 1000,
            direction_candidates: 16,
            fold_gap_floor: 1e-3,
        }
    }
}
