//! Constructive synthesis of LN-Nets that classify a finite point set.
//!
//! All points are first projected onto a line by a direction that keeps
//! distinct points distinct. After that every point lives on the x-axis of
//! the plane, and each merge layer does three things:
//!
//! 1. shift so that the leftmost point `p_i` and the leftmost other point
//!    `p_j` with the same label sit at `(-h, h)` and `(h, h)`;
//! 2. project onto the unit circle, which folds `p_i` and `p_j` together;
//! 3. read the y-coordinate back onto the x-axis.
//!
//! Every layer joins at least two points of one label, so a binary problem
//! with `m` points needs at most `m - 2` layers. With more than two labels a
//! fold can also join an unrelated pair of points whose coordinates have the
//! same sum as the pivots; a breaking layer (lift by `(0, 1)`, project to the
//! circle, project onto a random direction) is inserted before each merge to
//! rule that out.
//!
//! Each fold is a two-to-one map of the line onto itself, so round-off
//! roughly doubles per layer at the worst-placed points and gaps between
//! unrelated points shrink. The engine therefore tracks an estimate of the
//! round-off every cluster carries, and when the default fold (leftmost pair,
//! offset `h`) would leave two clusters of different labels too close
//! relative to that round-off, it picks another same-label pair and another
//! offset instead. A synthesized net is verified on its training points
//! and, if verification fails, synthesis is repeated with fresh directions.
//!
//! Merged points are tracked as clusters by identity. A fold sends both
//! pivots to the same point exactly, but floating point may leave them a few
//! ulps apart, and genuinely distinct points can end up far closer than any
//! fixed tolerance after many folds; comparing values would therefore
//! either split clusters or join unrelated points.

use serde::{Deserialize, Serialize};

use crate::datasets::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{self, Affine, LnNet, Stage};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{self, Matrix};
use crate::Tolerances;

/// Two cluster values closer than this many ulps (relative to the unit
/// interval they live in) count as an accidental coincidence.
const COINCIDENCE_ULPS: f64 = 64.0;

/// Fold offsets tried when the default fold is poorly conditioned, as powers
/// of two times the current value range.
const OFFSET_EXPONENTS: [i32; 8] = [-8, -6, -4, -2, -1, 0, 1, 4];

/// Cluster count up to which a poorly conditioned fold triggers the
/// exhaustive pair search.
const WIDE_SEARCH_CLUSTERS: usize = 24;

/// Gap-to-round-off ratio above which the default fold is kept.
const SAFE_GAP_RATIO: f64 = 1e6;

/// Fresh round-off a single layer adds to a value in `[0, 1]`; generous so
/// that error estimates stay over-estimates.
const ROUNDING_PER_LAYER: f64 = 16.0 * f64::EPSILON;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Fold two same-label points together.
    Merge,
    /// Break parallelograms before a merge.
    Pba,
}

/// Two clusters that became one. Clusters are named by their lowest point
/// index.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MergeEvent {
    pub kept: usize,
    pub absorbed: usize,
    pub kept_label: usize,
    pub absorbed_label: usize,
    /// Joined by numerical coincidence rather than as the fold pivots.
    pub accidental: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRecord {
    /// Index of the normalization layer in the compiled net.
    pub layer: usize,
    pub kind: LayerKind,
    /// `(i, j)` for merge layers.
    pub pivots: Option<(usize, usize)>,
    /// Bias of the shift: `(-(p_i + p_j)/2, (p_j - p_i)/2)`.
    pub shift: Option<[f64; 2]>,
    /// Angle of each cluster seen from the shifted origin, in cluster order.
    pub angles: Vec<f64>,
    pub merges: Vec<MergeEvent>,
    /// Projection direction of a breaking layer.
    pub direction: Option<[f64; 2]>,
    pub distinct_before: usize,
    pub distinct_after: usize,
    /// Smallest gap between distinct cluster values after the layer.
    pub min_gap: f64,
    /// Breaking layers: smallest gap between sums of disjoint pairs,
    /// relative to the largest value.
    pub min_pair_sum_gap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SynthesisTrace {
    /// Direction of the initial projection onto the x-axis.
    pub init_direction: Vec<f64>,
    pub layers: Vec<LayerRecord>,
}

/// Summary of the structural guarantees a trace must satisfy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceAudit {
    pub merge_layers: usize,
    pub pba_layers: usize,
    pub cross_label_merges: usize,
    /// Merge layers that did not reduce the number of distinct points.
    pub stalled_merges: usize,
    /// Breaking layers that changed the number of distinct points.
    pub lossy_pba_layers: usize,
}

impl TraceAudit {
    pub fn is_clean(&self) -> bool {
        self.cross_label_merges == 0 && self.stalled_merges == 0 && self.lossy_pba_layers == 0
    }
}

impl SynthesisTrace {
    pub fn audit(&self) -> TraceAudit {
        let mut a = TraceAudit {
            merge_layers: 0,
            pba_layers: 0,
            cross_label_merges: 0,
            stalled_merges: 0,
            lossy_pba_layers: 0,
        };
        for r in &self.layers {
            a.cross_label_merges +=
                r.merges.iter().filter(|m| m.kept_label != m.absorbed_label).count();
            match r.kind {
                LayerKind::Merge => {
                    a.merge_layers += 1;
                    if r.distinct_after >= r.distinct_before {
                        a.stalled_merges += 1;
                    }
                }
                LayerKind::Pba => {
                    a.pba_layers += 1;
                    if r.distinct_after != r.distinct_before {
                        a.lossy_pba_layers += 1;
                    }
                }
            }
        }
        a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub label: usize,
    pub value: f64,
}

/// Nearest-prototype decision on the scalar output of a net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub prototypes: Vec<Prototype>,
    pub eps_proto: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Classification {
    pub label: usize,
    pub distance: f64,
    pub output: f64,
}

impl Readout {
    pub fn classify(&self, output: f64) -> Result<Classification> {
        let mut ranked: Vec<(usize, f64)> = self
            .prototypes
            .iter()
            .enumerate()
            .map(|(k, p)| (k, (output - p.value).abs()))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        let Some(&(best, d1)) = ranked.first() else {
            return Err(Error::Validation("readout has no prototypes".into()));
        };
        if let Some(&(second, d2)) = ranked.get(1) {
            if d2 - d1 <= self.eps_proto {
                return Err(Error::Ambiguous {
                    first: self.prototypes[best].label,
                    second: self.prototypes[second].label,
                    distance: d1,
                });
            }
        }
        Ok(Classification {
            label: self.prototypes[best].label,
            distance: d1,
            output,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub net: LnNet,
    pub trace: SynthesisTrace,
    pub readout: Readout,
    /// Number of LN layers.
    pub depth: usize,
    /// The affine / spherical-projection pipeline the net was compiled from.
    pub stages: Vec<Stage>,
    /// Largest distance from a training point's output to its prototype.
    pub max_training_error: f64,
    /// Synthesis runs needed; more than one when verification rejected a net.
    pub attempts: usize,
}

impl SynthesisResult {
    pub fn classify(&self, x: &[f64]) -> Result<Classification> {
        let y = self.net.forward(x)?;
        self.readout.classify(y[0])
    }
}

/// Random unit direction along which all distinct points keep distinct
/// projections: `|u^T (x_i - x_j)| > eps_sep ||x_i - x_j||`.
pub fn init_direction(points: &Matrix, seed: u64, tol: &Tolerances) -> Result<Vec<f64>> {
    init_direction_with(points, &mut SplitMix64::new(seed), tol)
}

fn init_direction_with(points: &Matrix, rng: &mut SplitMix64, tol: &Tolerances) -> Result<Vec<f64>> {
    let cols: Vec<Vec<f64>> = points.columns().collect();
    let mut diffs = Vec::new();
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            let diff: Vec<f64> = cols[a].iter().zip(&cols[b]).map(|(x, y)| x - y).collect();
            let n = tensor::norm(&diff);
            if n > tol.eps_eq {
                diffs.push((diff, n));
            }
        }
    }
    // Among admissible directions keep the one that spreads the projections
    // most evenly; later folds only shrink the smallest gap.
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut seen = 0;
    for _ in 0..tol.direction_budget {
        let u = rng.unit_vector(points.rows());
        if diffs.iter().all(|(d, n)| tensor::dot(&u, d).abs() > tol.eps_sep * n) {
            let proj: Vec<f64> = cols.iter().map(|c| tensor::dot(&u, c)).collect();
            let score = relative_min_gap(&proj, None);
            if best.as_ref().map_or(true, |b| score > b.0) {
                best = Some((score, u));
            }
            seen += 1;
            if seen >= tol.direction_candidates.max(1) {
                break;
            }
        }
    }
    best.map(|(_, u)| u).ok_or(Error::SeparationFailure {
        draws: tol.direction_budget,
        what: "initial projection",
    })
}

fn lift(p: [f64; 2]) -> Result<[f64; 2]> {
    let v = tensor::spherical_project(&[p[0], p[1] + 1.0])?;
    Ok([v[0], v[1]])
}

/// `SP(p + (0, 1))` followed by projection onto `u`, placed on the x-axis.
pub fn pba(points: &[[f64; 2]], u: [f64; 2]) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .map(|p| {
            let l = lift(*p)?;
            Ok([u[0] * l[0] + u[1] * l[1], 0.0])
        })
        .collect()
}

/// Direction for [`pba`] under which distinct points stay distinct and no
/// two disjoint pairs of projections have the same sum.
pub fn pba_direction(points: &[[f64; 2]], seed: u64, tol: &Tolerances) -> Result<[f64; 2]> {
    let mut distinct: Vec<[f64; 2]> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| datasets::distance(p, q) <= tol.eps_eq) {
            distinct.push(*p);
        }
    }
    let lifted = distinct.iter().map(|p| lift(*p)).collect::<Result<Vec<_>>>()?;
    let mut rng = SplitMix64::new(seed);
    sample_pba_direction(&lifted, None, &mut rng, tol).map(|(u, _)| u)
}

/// Smallest gap between sorted values divided by their range. With labels,
/// only neighbours with different labels count.
fn relative_min_gap(q: &[f64], labels: Option<&[usize]>) -> f64 {
    let mut v: Vec<(f64, usize)> = q
        .iter()
        .enumerate()
        .map(|(k, &x)| (x, labels.map_or(k, |l| l[k])))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let range = v.last().map_or(0.0, |l| l.0) - v.first().map_or(0.0, |f| f.0);
    if !(range > 0.0) {
        return f64::INFINITY;
    }
    v.windows(2)
        .filter(|w| w[0].1 != w[1].1)
        .map(|w| w[1].0 - w[0].0)
        .fold(f64::INFINITY, f64::min)
        / range
}

/// Draws admissible directions until `direction_candidates` have been seen
/// (or the budget runs out) and keeps the one whose projections are best
/// conditioned. Returns the direction and the relative pair-sum gap it
/// achieves.
///
/// Without labels every pair of points must stay apart and no two disjoint
/// pairs may share a sum. With labels only the configurations that can
/// confuse a fold matter: points of different labels must stay apart, and
/// the sum of a same-label pair must differ from the sum of any disjoint
/// cross-label pair.
fn sample_pba_direction(
    lifted: &[[f64; 2]],
    labels: Option<&[usize]>,
    rng: &mut SplitMix64,
    tol: &Tolerances,
) -> Result<([f64; 2], f64)> {
    let differ = |a: usize, b: usize| labels.map_or(true, |l| l[a] != l[b]);
    let mut best: Option<(f64, [f64; 2], f64)> = None;
    let mut seen = 0;
    for _ in 0..tol.direction_budget {
        let v = rng.unit_vector(2);
        let u = [v[0], v[1]];
        let q: Vec<f64> = lifted.iter().map(|l| u[0] * l[0] + u[1] * l[1]).collect();
        let separated = (0..q.len()).all(|a| {
            (a + 1..q.len()).all(|b| {
                !differ(a, b)
                    || (q[a] - q[b]).abs() > tol.eps_sep * datasets::distance(&lifted[a], &lifted[b])
            })
        });
        if !separated {
            continue;
        }
        let gap = pair_sum_gap(&q, labels);
        if gap > tol.eps_par {
            let score = gap.min(relative_min_gap(&q, labels));
            if best.map_or(true, |b| score > b.0) {
                best = Some((score, u, gap));
            }
            seen += 1;
            if seen >= tol.direction_candidates.max(1) {
                break;
            }
        }
    }
    best.map(|(_, u, gap)| (u, gap)).ok_or(Error::SeparationFailure {
        draws: tol.direction_budget,
        what: "parallelogram breaking",
    })
}

/// Smallest `|(q_a + q_b) - (q_c + q_d)|` over disjoint pairs, divided by
/// `max |q|`. Infinite when fewer than four values exist.
pub fn min_pair_sum_gap(q: &[f64]) -> f64 {
    pair_sum_gap(q, None)
}

fn pair_sum_gap(q: &[f64], labels: Option<&[usize]>) -> f64 {
    let scale = q.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let same = |a: usize, b: usize| labels.map(|l| l[a] == l[b]);
    let mut sums = Vec::with_capacity(q.len() * q.len() / 2);
    for a in 0..q.len() {
        for b in a + 1..q.len() {
            sums.push((q[a] + q[b], a, b, same(a, b)));
        }
    }
    sums.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut best = f64::INFINITY;
    for i in 0..sums.len() {
        let (s, a, b, ab) = sums[i];
        for &(t, c, d, cd) in &sums[i + 1..] {
            if t - s >= best * scale {
                break;
            }
            let relevant = match (ab, cd) {
                (Some(x), Some(y)) => x != y,
                _ => true,
            };
            if relevant && a != c && a != d && b != c && b != d {
                best = best.min((t - s) / scale);
            }
        }
    }
    best
}

#[derive(Clone, Copy)]
struct Folded {
    cluster: usize,
    value: f64,
    err: f64,
}

#[derive(Clone, Debug)]
struct Cluster {
    rep: usize,
    label: usize,
    value: f64,
    alive: bool,
    /// Estimated absolute round-off carried by `value`.
    err: f64,
}

/// Scalar bookkeeping behind the merge and breaking layers.
struct Engine<'a> {
    tol: &'a Tolerances,
    clusters: Vec<Cluster>,
    cluster_of: Vec<usize>,
    stages: Vec<Stage>,
    records: Vec<LayerRecord>,
}

impl<'a> Engine<'a> {
    /// Points whose values coincide within `eps_eq` share a cluster.
    fn from_scalars(values: &[f64], labels: &[usize], tol: &'a Tolerances) -> Result<Self> {
        let mut cluster_of = Vec::with_capacity(values.len());
        let mut clusters: Vec<Cluster> = Vec::new();
        for (k, (&v, &label)) in values.iter().zip(labels).enumerate() {
            match clusters.iter().position(|c| (c.value - v).abs() <= tol.eps_eq) {
                Some(c) if clusters[c].label != label => {
                    return Err(Error::Validation(format!(
                        "points {} and {k} coincide but carry labels {} and {label}",
                        clusters[c].rep, clusters[c].label
                    )))
                }
                Some(c) => cluster_of.push(c),
                None => {
                    cluster_of.push(clusters.len());
                    clusters.push(Cluster {
                        rep: k,
                        label,
                        value: v,
                        alive: true,
                        err: ROUNDING_PER_LAYER,
                    });
                }
            }
        }
        Ok(Self {
            tol,
            clusters,
            cluster_of,
            stages: Vec::new(),
            records: Vec::new(),
        })
    }

    fn alive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.clusters.len()).filter(|&c| self.clusters[c].alive)
    }

    fn distinct(&self) -> usize {
        self.alive().count()
    }

    fn sorted_alive(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.alive().collect();
        ids.sort_by(|&a, &b| {
            self.clusters[a]
                .value
                .total_cmp(&self.clusters[b].value)
                .then(self.clusters[a].rep.cmp(&self.clusters[b].rep))
        });
        ids
    }

    /// Leftmost cluster that still has a same-label partner, and that
    /// partner's leftmost member. Lowest index breaks ties.
    fn pivots(&self) -> Option<(usize, usize)> {
        let order = self.sorted_alive();
        for (pos, &i) in order.iter().enumerate() {
            let label = self.clusters[i].label;
            // Clusters to the left of i have no partner, so they never hold
            // i's label; the partner search only looks right.
            if let Some(&j) = order[pos + 1..].iter().find(|&&j| self.clusters[j].label == label) {
                return Some((i, j));
            }
        }
        None
    }

    fn layer_index(&self) -> usize {
        self.records.len()
    }

    /// Rescales alive values to `[0, 1]`; returns `(lo, range)`.
    fn normalize(&mut self) -> Result<(f64, f64)> {
        let (lo, hi) = self
            .alive()
            .map(|c| self.clusters[c].value)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let r = hi - lo;
        if !(r > 0.0) {
            return Err(Error::DegenerateLayer {
                layer: self.layer_index(),
                message: "all points collapsed to one value".into(),
            });
        }
        for c in &mut self.clusters {
            if c.alive {
                c.value = (c.value - lo) / r;
            }
        }
        Ok((lo, r))
    }

    fn absorb(&mut self, keep: usize, gone: usize, accidental: bool) -> MergeEvent {
        let (keep, gone) = if self.clusters[gone].rep < self.clusters[keep].rep {
            (gone, keep)
        } else {
            (keep, gone)
        };
        self.clusters[gone].alive = false;
        self.clusters[gone].value = self.clusters[keep].value;
        self.clusters[keep].err = self.clusters[keep].err.max(self.clusters[gone].err);
        for c in &mut self.cluster_of {
            if *c == gone {
                *c = keep;
            }
        }
        MergeEvent {
            kept: self.clusters[keep].rep,
            absorbed: self.clusters[gone].rep,
            kept_label: self.clusters[keep].label,
            absorbed_label: self.clusters[gone].label,
            accidental,
        }
    }

    /// Joins clusters whose values are numerically indistinguishable.
    /// Joining different labels is fatal. Returns the smallest remaining gap.
    fn coincidence_audit(&mut self, events: &mut Vec<MergeEvent>) -> Result<f64> {
        loop {
            let order = self.sorted_alive();
            let mut clash = None;
            let mut min_gap = f64::INFINITY;
            for w in order.windows(2) {
                let (a, b) = (&self.clusters[w[0]], &self.clusters[w[1]]);
                let gap = b.value - a.value;
                let scale = a.value.abs().max(b.value.abs()).max(1.0);
                if gap <= COINCIDENCE_ULPS * f64::EPSILON * scale {
                    clash = Some((w[0], w[1]));
                    break;
                }
                min_gap = min_gap.min(gap);
            }
            match clash {
                None => return Ok(min_gap),
                Some((a, b)) if self.clusters[a].label != self.clusters[b].label => {
                    return Err(Error::CrossLabelMerge {
                        layer: self.layer_index(),
                        a: self.clusters[a].rep,
                        b: self.clusters[b].rep,
                    })
                }
                Some((a, b)) => events.push(self.absorb(a, b, true)),
            }
        }
    }

    /// Values and error estimates of the alive clusters after folding about
    /// `mid` with offset `s` and rescaling to `[0, 1]`, or `None` if
    /// everything collapses. A fold stretches a perturbation at distance `h`
    /// from the midpoint by `s |h| / (h² + s²)^(3/2)`.
    fn folded(&self, mid: f64, s: f64) -> Option<(Vec<Folded>, f64)> {
        let ys: Vec<Folded> = self
            .alive()
            .map(|c| {
                let h = self.clusters[c].value - mid;
                let q = h * h + s * s;
                Folded {
                    cluster: c,
                    value: s / q.sqrt(),
                    err: self.clusters[c].err * s * h.abs() / (q * q.sqrt()),
                }
            })
            .collect();
        let (lo, hi) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f.value), hi.max(f.value)));
        let r = hi - lo;
        (r > 0.0 && r.is_finite()).then(|| {
            let scaled = ys
                .into_iter()
                .map(|f| Folded {
                    value: (f.value - lo) / r,
                    // Round-off in y is relative to |y| <= 1 and is
                    // magnified by the rescale like everything else.
                    err: (f.err + ROUNDING_PER_LAYER) / r + ROUNDING_PER_LAYER,
                    ..f
                })
                .collect();
            (scaled, r)
        })
    }

    /// Conditioning of the fold `(i, j, s)`: the smallest gap left between
    /// clusters of different labels, the smallest ratio of such a gap to the
    /// round-off the two clusters carry, and the sum of the inverse ratios.
    /// Clusters with the same label may come arbitrarily close; confusing
    /// them is harmless. A cross-label coincidence scores zero.
    ///
    /// `order` lists the alive clusters by value and `buf` is scratch space.
    fn fold_quality(&self, order: &[usize], i: usize, j: usize, s: f64, buf: &mut Vec<Folded>) -> (f64, f64, f64) {
        const HOPELESS: (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
        let mid = 0.5 * (self.clusters[i].value + self.clusters[j].value);
        let fold = |c: usize| {
            let h = self.clusters[c].value - mid;
            let q = h * h + s * s;
            let y = s / q.sqrt();
            Folded {
                cluster: c,
                value: y,
                err: self.clusters[c].err * y * h.abs() / q,
            }
        };
        // The fold increases left of the midpoint and decreases right of it,
        // so the folded values come out sorted by merging two runs.
        let split = order.partition_point(|&c| self.clusters[c].value < mid);
        buf.clear();
        buf.extend(order.iter().map(|&c| fold(c)));
        buf[split..].reverse();
        let (left, right) = buf.split_at(split);
        let mut merged = Vec::with_capacity(buf.len());
        let (mut a, mut b) = (0, 0);
        while a < left.len() || b < right.len() {
            if b == right.len() || (a < left.len() && left[a].value <= right[b].value) {
                merged.push(left[a]);
                a += 1;
            } else {
                merged.push(right[b]);
                b += 1;
            }
        }
        *buf = merged;
        let (Some(lo), Some(hi)) = (buf.first().map(|f| f.value), buf.last().map(|f| f.value)) else {
            return HOPELESS;
        };
        let range = hi - lo;
        if !(range > 0.0 && range.is_finite()) {
            return HOPELESS;
        }
        let ej = buf.iter().find(|f| f.cluster == j).map_or(0.0, |f| f.err);
        buf.retain(|f| f.cluster != j);
        for f in buf.iter_mut() {
            if f.cluster == i {
                f.err = f.err.max(ej);
            }
            f.value = (f.value - lo) / range;
            f.err = (f.err + ROUNDING_PER_LAYER) / range + ROUNDING_PER_LAYER;
        }
        let label = |f: &Folded| self.clusters[f.cluster].label;
        for w in buf.windows(2) {
            if w[1].value - w[0].value <= COINCIDENCE_ULPS * f64::EPSILON && label(&w[0]) != label(&w[1]) {
                return HOPELESS;
            }
        }
        let (mut gap, mut ratio, mut risk) = (f64::INFINITY, f64::INFINITY, 0.0);
        // Each cluster against its nearest cross-label cluster on either
        // side: a cluster carrying much round-off can drift past same-label
        // neighbours.
        let mut visit = |f: &Folded, last: &mut Option<usize>, last_other: &mut Option<usize>, k: usize| {
            if let Some(lk) = *last {
                let l = &buf[lk];
                let cross = if label(l) != label(f) { Some(lk) } else { *last_other };
                if let Some(ck) = cross {
                    let c = &buf[ck];
                    let g = (f.value - c.value).abs();
                    gap = gap.min(g);
                    ratio = ratio.min(g / (c.err + f.err));
                    risk += (c.err + f.err) / g;
                }
                if label(l) != label(f) {
                    *last_other = Some(lk);
                }
            }
            *last = Some(k);
        };
        let (mut last, mut last_other) = (None, None);
        for k in 0..buf.len() {
            visit(&buf[k], &mut last, &mut last_other, k);
        }
        let (mut last, mut last_other) = (None, None);
        for k in (0..buf.len()).rev() {
            visit(&buf[k], &mut last, &mut last_other, k);
        }
        (gap, ratio, risk)
    }

    /// Pivot pair and fold offset for the next merge layer.
    ///
    /// The leftmost pair with offset `h` is used unless it squeezes two
    /// clusters of different labels closer than `fold_gap_floor`, or closer
    /// than a million times the round-off they carry. Repeated folds shrink gaps geometrically, so
    /// in that case every pair of label-neighbours is tried over a range of
    /// offsets and the fold with the best gap-to-round-off ratio wins. Any
    /// positive offset folds exactly the pairs symmetric about the midpoint,
    /// so the merge itself is unaffected.
    fn choose_fold(&self) -> Option<(usize, usize, f64)> {
        let (i, j) = self.pivots()?;
        let half = 0.5 * (self.clusters[j].value - self.clusters[i].value);
        let order = self.sorted_alive();
        let mut buf = Vec::with_capacity(order.len());
        let (gap, ratio, risk) = self.fold_quality(&order, i, j, half, &mut buf);
        if gap >= self.tol.fold_gap_floor && ratio >= SAFE_GAP_RATIO {
            return Some((i, j, half));
        }
        let range = self.clusters[order[order.len() - 1]].value - self.clusters[order[0]].value;
        let mut best = (risk, ratio, i, j, half);
        let mut consider = |a: usize, c: usize, s: f64, best: &mut (f64, f64, usize, usize, f64)| {
            let (_, ratio, risk) = self.fold_quality(&order, a, c, s, &mut buf);
            if risk < best.0 {
                *best = (risk, ratio, a, c, s);
            }
        };
        let mut last_of_label: Vec<(usize, usize)> = Vec::new();
        for &c in &order {
            let label = self.clusters[c].label;
            match last_of_label.iter_mut().find(|(l, _)| *l == label) {
                Some(slot) => {
                    let a = slot.1;
                    slot.1 = c;
                    let h = 0.5 * (self.clusters[c].value - self.clusters[a].value);
                    consider(a, c, h, &mut best);
                    for &k in &OFFSET_EXPONENTS {
                        consider(a, c, range * 2f64.powi(k), &mut best);
                    }
                }
                None => last_of_label.push((label, c)),
            }
        }
        // Still poorly conditioned: widen to every same-label pair on a finer
        // grid of offsets. Only affordable, and only needed, with few
        // clusters left.
        if best.1 < SAFE_GAP_RATIO && order.len() <= WIDE_SEARCH_CLUSTERS {
            for (x, &a) in order.iter().enumerate() {
                for &c in &order[x + 1..] {
                    if self.clusters[a].label != self.clusters[c].label {
                        continue;
                    }
                    for k in -48..=24 {
                        consider(a, c, range * 2f64.powf(f64::from(k) / 4.0), &mut best);
                    }
                }
            }
        }
        Some((best.2, best.3, best.4))
    }

    fn merge_layer(&mut self, i: usize, j: usize, s: f64) -> Result<()> {
        let before = self.distinct();
        let (pi, pj) = (self.clusters[i].value, self.clusters[j].value);
        let mid = 0.5 * (pi + pj);
        let angles = self
            .sorted_alive()
            .iter()
            .map(|&c| s.atan2(self.clusters[c].value - mid))
            .collect();
        let err: Vec<(usize, f64)> = match self.folded(mid, s) {
            Some((ys, _)) => ys.iter().map(|f| (f.cluster, f.err)).collect(),
            None => Vec::new(),
        };
        for (c, e) in err {
            self.clusters[c].err = e;
        }
        for c in &mut self.clusters {
            if c.alive {
                let h = c.value - mid;
                c.value = s / (h * h + s * s).sqrt();
            }
        }
        let mut merges = vec![self.absorb(i, j, false)];
        let (lo, r) = self.normalize()?;
        let min_gap = self.coincidence_audit(&mut merges)?;

        self.stages.push(Stage::Affine(
            Affine::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]])?, vec![-mid, s])?,
        ));
        self.stages.push(Stage::Sp { dim: 2 });
        self.stages.push(Stage::Affine(Affine::new(
            Matrix::from_rows(&[[0.0, 1.0 / r], [0.0, 0.0]])?,
            vec![-lo / r, 0.0],
        )?));
        self.records.push(LayerRecord {
            layer: self.layer_index(),
            kind: LayerKind::Merge,
            pivots: Some((self.clusters[i].rep, self.clusters[j].rep)),
            shift: Some([-mid, s]),
            angles,
            merges,
            direction: None,
            distinct_before: before,
            distinct_after: self.distinct(),
            min_gap,
            min_pair_sum_gap: None,
        });
        Ok(())
    }

    fn pba_layer(&mut self, rng: &mut SplitMix64) -> Result<()> {
        let before = self.distinct();
        let order = self.sorted_alive();
        let lifted = order
            .iter()
            .map(|&c| lift([self.clusters[c].value, 0.0]))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = order.iter().map(|&c| self.clusters[c].label).collect();
        let (u, pair_gap) = sample_pba_direction(&lifted, Some(&labels), rng, self.tol)?;
        let angles = lifted.iter().map(|l| l[1].atan2(l[0])).collect();
        for (&c, l) in order.iter().zip(&lifted) {
            self.clusters[c].value = u[0] * l[0] + u[1] * l[1];
        }
        let (lo, r) = self.normalize()?;
        for (&c, l) in order.iter().zip(&lifted) {
            // d/dv SP(v, 1) = (1, -v) / (1 + v²)^(3/2), and v = l0 / l1.
            let v = l[0] / l[1];
            let slope = (u[0] - u[1] * v).abs() / (1.0 + v * v).powf(1.5);
            self.clusters[c].err = (self.clusters[c].err * slope + ROUNDING_PER_LAYER) / r + ROUNDING_PER_LAYER;
        }
        let mut merges = Vec::new();
        let min_gap = self.coincidence_audit(&mut merges)?;

        self.stages.push(Stage::Affine(Affine::translation(vec![0.0, 1.0])));
        self.stages.push(Stage::Sp { dim: 2 });
        self.stages.push(Stage::Affine(Affine::new(
            Matrix::from_rows(&[[u[0] / r, u[1] / r], [0.0, 0.0]])?,
            vec![-lo / r, 0.0],
        )?));
        self.records.push(LayerRecord {
            layer: self.layer_index(),
            kind: LayerKind::Pba,
            pivots: None,
            shift: None,
            angles,
            merges,
            direction: Some(u),
            distinct_before: before,
            distinct_after: self.distinct(),
            min_gap,
            min_pair_sum_gap: Some(pair_gap),
        });
        Ok(())
    }

    /// Merges until every label is a single cluster. With `rng`, a breaking
    /// layer precedes every merge.
    fn run(&mut self, mut rng: Option<&mut SplitMix64>) -> Result<()> {
        while self.pivots().is_some() {
            if let Some(rng) = rng.as_deref_mut() {
                self.pba_layer(rng)?;
            }
            let (i, j, s) = self.choose_fold().expect("breaking layers keep labels");
            self.merge_layer(i, j, s)?;
        }
        Ok(())
    }

    fn prototypes(&self) -> Vec<Prototype> {
        let mut p: Vec<Prototype> = self
            .alive()
            .map(|c| Prototype {
                label: self.clusters[c].label,
                value: self.clusters[c].value,
            })
            .collect();
        p.sort_by_key(|p| p.label);
        p
    }

    fn point_values(&self) -> Vec<f64> {
        self.cluster_of.iter().map(|&c| self.clusters[c].value).collect()
    }
}

/// Output of the merge algorithm on scalars placed on the x-axis.
#[derive(Clone, Debug)]
pub struct PmaOutput {
    /// Stages acting on `R^2` points `(p, 0)`.
    pub stages: Vec<Stage>,
    pub layers: Vec<LayerRecord>,
    /// Final x-coordinate of every input point.
    pub values: Vec<f64>,
    pub prototypes: Vec<Prototype>,
}

/// Runs the merge algorithm on two-label scalar data.
pub fn pma(p: &[f64], labels: &[usize], tol: &Tolerances) -> Result<PmaOutput> {
    if p.len() != labels.len() {
        return Err(Error::Shape(format!("{} points but {} labels", p.len(), labels.len())));
    }
    let classes = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if classes != 2 {
        return Err(Error::NotBinary { classes });
    }
    let mut engine = Engine::from_scalars(p, labels, tol)?;
    engine.run(None)?;
    Ok(PmaOutput {
        values: engine.point_values(),
        prototypes: engine.prototypes(),
        stages: engine.stages,
        layers: engine.records,
    })
}

pub fn synthesize_binary(data: &LabeledDataset, seed: u64, tol: &Tolerances) -> Result<SynthesisResult> {
    let classes = data.classes().len();
    if classes != 2 {
        return Err(Error::NotBinary { classes });
    }
    synthesize(data, seed, tol, false)
}

pub fn synthesize_multiclass(data: &LabeledDataset, seed: u64, tol: &Tolerances) -> Result<SynthesisResult> {
    synthesize_multiclass_with(data, seed, tol, true)
}

/// Multi-class synthesis; `breaking = false` omits the parallelogram
/// breaking layers, which can confuse labels.
pub fn synthesize_multiclass_with(
    data: &LabeledDataset,
    seed: u64,
    tol: &Tolerances,
    breaking: bool,
) -> Result<SynthesisResult> {
    let classes = data.classes().len();
    if classes < 2 {
        return Err(Error::Validation(format!(
            "need at least two classes, found {classes}"
        )));
    }
    synthesize(data, seed, tol, breaking)
}

/// Synthesis attempts before giving up. Each retry draws fresh directions;
/// the outcome is still a pure function of the seed.
const ATTEMPTS: u64 = 4;

fn synthesize(data: &LabeledDataset, seed: u64, tol: &Tolerances, breaking: bool) -> Result<SynthesisResult> {
    let mut last = None;
    for attempt in 0..ATTEMPTS {
        let attempt_seed = if attempt == 0 { seed } else { derive_seed(seed, attempt) };
        match synthesize_once(data, attempt_seed, tol, breaking) {
            Ok(mut r) => {
                r.attempts = attempt as usize + 1;
                return Ok(r);
            }
            // Round-off or an unlucky direction; another draw may succeed.
            Err(
                e @ (Error::Validation(_)
                | Error::DegenerateLayer { .. }
                | Error::CrossLabelMerge { .. }
                | Error::SeparationFailure { .. }
                | Error::Ambiguous { .. }),
            ) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn synthesize_once(data: &LabeledDataset, seed: u64, tol: &Tolerances, breaking: bool) -> Result<SynthesisResult> {
    let mut rng = SplitMix64::new(seed);
    let cols: Vec<Vec<f64>> = data.points().columns().collect();

    // Coincident inputs share a cluster from the start.
    let mut reps: Vec<usize> = Vec::new();
    let mut cluster_of = Vec::with_capacity(cols.len());
    for (k, c) in cols.iter().enumerate() {
        match reps.iter().position(|&r| datasets::distance(&cols[r], c) <= tol.eps_eq) {
            Some(idx) => cluster_of.push(idx),
            None => {
                cluster_of.push(reps.len());
                reps.push(k);
            }
        }
    }
    let rep_points = Matrix::from_columns(&reps.iter().map(|&r| cols[r].clone()).collect::<Vec<_>>())?;
    let u = init_direction_with(&rep_points, &mut rng, tol)?;

    let proj: Vec<f64> = reps.iter().map(|&r| tensor::dot(&u, &cols[r])).collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let d = data.dim();
    let mut w0 = Matrix::zeros(2, d);
    for j in 0..d {
        w0[(0, j)] = u[j] / range;
    }
    let init = Affine::new(w0, vec![-lo / range, 0.0])?;

    let mut engine = Engine {
        tol,
        clusters: reps
            .iter()
            .zip(&proj)
            .map(|(&r, &v)| Cluster {
                rep: r,
                label: data.labels()[r],
                value: (v - lo) / range,
                alive: true,
                err: ROUNDING_PER_LAYER,
            })
            .collect(),
        cluster_of,
        stages: Vec::new(),
        records: Vec::new(),
    };
    let mut init_events = Vec::new();
    engine.coincidence_audit(&mut init_events)?;
    engine.run(if breaking { Some(&mut rng) } else { None })?;

    let readout = Readout {
        prototypes: engine.prototypes(),
        eps_proto: tol.eps_proto,
    };
    let mut stages = vec![Stage::Affine(init)];
    stages.append(&mut engine.stages);
    stages.push(Stage::Affine(Affine::linear(Matrix::from_rows(&[[1.0, 0.0]])?)));
    let net = model::compile(&stages)?;

    let mut max_training_error: f64 = 0.0;
    for (k, x) in cols.iter().enumerate() {
        let out = net.forward(x)?[0];
        let label = data.labels()[k];
        let proto = readout
            .prototypes
            .iter()
            .find(|p| p.label == label)
            .expect("every label keeps a prototype");
        max_training_error = max_training_error.max((out - proto.value).abs());
        let got = readout.classify(out)?;
        if got.label != label {
            return Err(Error::Validation(format!(
                "point {k} lands at {out}, nearest to label {} instead of {label} (prototype {})",
                got.label, proto.value
            )));
        }
    }

    Ok(SynthesisResult {
        depth: net.norm_layer_count(),
        net,
        trace: SynthesisTrace {
            init_direction: u,
            layers: engine.records,
        },
        readout,
        stages,
        max_training_error,
        attempts: 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShatterReport {
    pub points: usize,
    pub labelings: usize,
    pub successes: usize,
    pub max_depth: usize,
    /// Bitmasks (bit k = label of point k) that failed, with the reason.
    pub failures: Vec<(u64, String)>,
    pub shattered: bool,
}

/// Tries every nontrivial binary labeling of `points` and checks that each
/// is classified by a synthesized net with at most `max_ln_layers` LN layers.
pub fn shatter_check(points: &Matrix, max_ln_layers: usize, seed: u64, tol: &Tolerances) -> Result<ShatterReport> {
    let m = points.cols();
    if !(2..=20).contains(&m) {
        return Err(Error::Validation(format!("shatter check needs 2..=20 points, got {m}")));
    }
    let mut report = ShatterReport {
        points: m,
        labelings: 0,
        successes: 0,
        max_depth: 0,
        failures: Vec::new(),
        shattered: false,
    };
    for mask in 1..(1u64 << m) - 1 {
        report.labelings += 1;
        let labels: Vec<usize> = (0..m).map(|k| ((mask >> k) & 1) as usize).collect();
        let outcome = LabeledDataset::new(points.clone(), labels.clone())
            .and_then(|data| synthesize_binary(&data, derive_seed(seed, mask), tol).map(|r| (data, r)));
        match outcome {
            Ok((data, r)) => {
                let correct = data
                    .points()
                    .columns()
                    .zip(&labels)
                    .all(|(x, &l)| r.classify(&x).map(|c| c.label == l).unwrap_or(false));
                report.max_depth = report.max_depth.max(r.depth);
                if !correct {
                    report.failures.push((mask, "misclassified a point".into()));
                } else if r.depth > max_ln_layers {
                    report.failures.push((mask, format!("needed {} LN layers", r.depth)));
                } else {
                    report.successes += 1;
                }
            }
            Err(e) => report.failures.push((mask, e.to_string())),
        }
    }
    report.shattered = report.failures.is_empty();
    Ok(report)
}

/// The hand-built XOR solution: rotate by 45 degrees, flatten onto the line
/// `y = 1/2`, project onto the unit circle and read the y-coordinate.
#[derive(Clone, Debug)]
pub struct XorPipeline {
    pub stages: Vec<Stage>,
    pub net: LnNet,
    pub readout: Readout,
}

impl XorPipeline {
    pub fn new() -> Self {
        let (s, c) = std::f64::consts::FRAC_PI_4.sin_cos();
        let stages = vec![
            Stage::Affine(Affine::linear(Matrix::from_rows(&[[c, -s], [s, c]]).expect("2x2"))),
            Stage::Affine(
                Affine::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).expect("2x2"), vec![0.0, 0.5])
                    .expect("shapes agree"),
            ),
            Stage::Sp { dim: 2 },
            Stage::Affine(Affine::linear(Matrix::from_rows(&[[0.0, 1.0]]).expect("1x2"))),
        ];
        let net = model::compile(&stages).expect("pipeline dimensions chain");
        let readout = Readout {
            prototypes: vec![
                Prototype { label: 0, value: 1.0 },
                Prototype {
                    label: 1,
                    value: 1.0 / 3f64.sqrt(),
                },
            ],
            eps_proto: Tolerances::default().eps_proto,
        };
        Self { stages, net, readout }
    }

    /// Points after each stage, starting with the input.
    pub fn geometry(&self, points: &Matrix) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut current: Vec<Vec<f64>> = points.columns().collect();
        let mut out = vec![current.clone()];
        for s in &self.stages {
            current = current.iter().map(|x| s.apply(x)).collect::<Result<_>>()?;
            out.push(current.clone());
        }
        Ok(out)
    }

    pub fn classify(&self, x: &[f64]) -> Result<Classification> {
        self.readout.classify(self.net.forward(x)?[0])
    }
}

impl Default for XorPipeline {
    fn default() -> Self {
        Self::new()
    }
}
