//! Penalized kernel change-point detection.
//!
//! A segment `[a, b)` of the return series is scored with the RBF kernel cost
//!
//! ```text
//! c(a, b) = (b - a) - 1/(b - a) * sum_{s,t in [a,b)} exp(-gamma (r_s - r_t)^2)
//! ```
//!
//! and a segmentation with breakpoints `T` is scored with `sum c + penalty * |T|`.
//! [`detect_changepoints`] finds the exact minimizer by optimal partitioning
//! with PELT-style pruning. Block sums are grown one column at a time as the
//! right end advances, so no Gram matrix is stored: memory is `O(n)` and the
//! work is at most `n^2 / 2` kernel evaluations.

use std::cmp::Ordering;
use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_SEGMENT_LENGTH: usize = 2;
pub const DEFAULT_BANDWIDTH_SAMPLE: usize = 1000;
pub const DEFAULT_PENALTY: f64 = 2.5;

/// Largest series accepted by [`exhaustive_segmentation_oracle`].
pub const ORACLE_MAX_LEN: usize = 64;

/// Objectives closer than this are treated as ties.
const TIE_TOLERANCE: f64 = 1e-10;
/// Slack kept when discarding candidates so rounding never prunes an optimum.
const PRUNE_MARGIN: f64 = 1e-9;

/// RBF kernel `k(x, y) = exp(-gamma (x - y)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    gamma: f64,
}

impl KernelSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel gamma must be finite and > 0, got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let d = x - y;
        (-self.gamma * d * d).exp()
    }
}

/// Breakpoints `0 < t_1 < ... < t_K < n`; each is the exclusive end of a segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    breakpoints: Vec<usize>,
    series_length: usize,
}

impl Segmentation {
    pub fn new(breakpoints: Vec<usize>, series_length: usize) -> Result<Self> {
        if series_length == 0 {
            return Err(Error::TooShort {
                required: 1,
                actual: 0,
            });
        }
        let mut last = 0;
        for &t in &breakpoints {
            if t <= last || t >= series_length {
                return Err(Error::InvalidParameter(format!(
                    "breakpoints must be strictly increasing inside (0, {series_length}), got {breakpoints:?}"
                )));
            }
            last = t;
        }
        Ok(Self {
            breakpoints,
            series_length,
        })
    }

    /// One segment covering the whole series.
    pub fn single(series_length: usize) -> Result<Self> {
        Self::new(Vec::new(), series_length)
    }

    /// Builds a segmentation from consecutive segment lengths.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.contains(&0) {
            return Err(Error::InvalidParameter(
                "segment lengths must be positive".into(),
            ));
        }
        let mut acc = 0;
        let mut breakpoints = Vec::with_capacity(lengths.len().saturating_sub(1));
        for &l in lengths {
            if acc > 0 {
                breakpoints.push(acc);
            }
            acc += l;
        }
        Self::new(breakpoints, acc)
    }

    pub fn breakpoints(&self) -> &[usize] {
        &self.breakpoints
    }

    pub fn series_length(&self) -> usize {
        self.series_length
    }

    pub fn num_segments(&self) -> usize {
        self.breakpoints.len() + 1
    }

    /// Half-open index ranges of the segments, in order.
    pub fn segments(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.breakpoints.iter().copied());
        let ends = self
            .breakpoints
            .iter()
            .copied()
            .chain(std::iter::once(self.series_length));
        starts.zip(ends).map(|(a, b)| a..b)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.segments().map(|s| s.len()).collect()
    }

    /// Segment index of every observation.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.series_length);
        for (k, seg) in self.segments().enumerate() {
            out.extend(std::iter::repeat_n(k, seg.len()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub segmentation: Segmentation,
    /// Sum of segment costs.
    pub total_cost: f64,
    /// `total_cost + penalty * breakpoints`.
    pub penalized_objective: f64,
}

impl SegmentationResult {
    fn from_costs(segmentation: Segmentation, costs: &[f64], penalty: f64) -> Self {
        let total_cost: f64 = costs.iter().sum();
        let penalized_objective = total_cost + penalty * segmentation.breakpoints().len() as f64;
        Self {
            segmentation,
            total_cost,
            penalized_objective,
        }
    }
}

/// Median-heuristic bandwidth: `gamma = 1 / median{(r_s - r_t)^2 : s < t}`.
///
/// Series longer than `max_pairs_sample` are subsampled (without replacement,
/// seeded) to that many points first. A zero median falls back to `gamma = 1`.
pub fn median_heuristic_bandwidth(
    r: &[f64],
    max_pairs_sample: usize,
    seed: u64,
) -> Result<KernelSpec> {
    if r.len() < 2 {
        return Err(Error::TooShort {
            required: 2,
            actual: r.len(),
        });
    }
    if max_pairs_sample < 2 {
        return Err(Error::InvalidParameter(
            "bandwidth sample must hold at least 2 points".into(),
        ));
    }
    let points: Vec<f64> = if r.len() <= max_pairs_sample {
        r.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, r.len(), max_pairs_sample).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| r[i]).collect()
    };

    let mut sq = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for (i, &x) in points.iter().enumerate() {
        for &y in &points[i + 1..] {
            sq.push((x - y) * (x - y));
        }
    }
    let median = median_in_place(&mut sq);
    if median > 0.0 && median.is_finite() {
        KernelSpec::new(1.0 / median)
    } else {
        KernelSpec::new(1.0)
    }
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// RBF cost of segment `[a, b)` by direct double summation.
pub fn kernel_cost(r: &[f64], a: usize, b: usize, kernel: KernelSpec) -> Result<f64> {
    if a >= b || b > r.len() {
        return Err(Error::EmptySegment { start: a, end: b });
    }
    let seg = &r[a..b];
    let m = seg.len() as f64;
    let mut off_diagonal = 0.0;
    for (i, &x) in seg.iter().enumerate() {
        for &y in &seg[i + 1..] {
            off_diagonal += kernel.eval(x, y);
        }
    }
    let block = m + 2.0 * off_diagonal;
    Ok((m - block / m).max(0.0))
}

/// Direct evaluation of `sum c(segment) + penalty * |breakpoints|`.
pub fn evaluate_segmentation(
    r: &[f64],
    segmentation: &Segmentation,
    penalty: f64,
    kernel: KernelSpec,
) -> Result<SegmentationResult> {
    if segmentation.series_length() != r.len() {
        return Err(Error::InvalidParameter(format!(
            "segmentation covers {} points, series has {}",
            segmentation.series_length(),
            r.len()
        )));
    }
    let costs = segmentation
        .segments()
        .map(|s| kernel_cost(r, s.start, s.end, kernel))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationResult::from_costs(
        segmentation.clone(),
        &costs,
        penalty,
    ))
}

fn validate_search(n: usize, penalty: f64, min_segment_length: usize) -> Result<()> {
    if !(penalty.is_finite() && penalty > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "penalty weight must be finite and > 0, got {penalty}"
        )));
    }
    if min_segment_length == 0 {
        return Err(Error::InvalidParameter(
            "min segment length must be >= 1".into(),
        ));
    }
    let required = 2 * min_segment_length;
    if n < required {
        return Err(Error::TooShort {
            required,
            actual: n,
        });
    }
    Ok(())
}

/// A still-open segment start in the dynamic program.
struct Candidate {
    start: usize,
    /// Sum of kernel entries over `[start, b)` for the current end `b`.
    block_sum: f64,
    /// First end at which this start is known to be dominated.
    retire_at: usize,
}

/// Breakpoints of the optimal prefix ending at `end`, in increasing order.
fn prefix_path(prev: &[usize], end: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut b = end;
    while b > 0 {
        let a = prev[b];
        if a > 0 {
            out.push(a);
        }
        b = a;
    }
    out.reverse();
    out
}

/// Exact minimizer of `sum c(segment) + penalty * |breakpoints|` over every
/// segmentation whose segments are at least `min_segment_length` long.
///
/// Ties within `1e-10` go to fewer breakpoints, then to the lexicographically
/// smallest breakpoint list.
pub fn detect_changepoints(
    r: &[f64],
    penalty: f64,
    kernel: KernelSpec,
    min_segment_length: usize,
) -> Result<SegmentationResult> {
    let n = r.len();
    validate_search(n, penalty, min_segment_length)?;
    let min_len = min_segment_length;

    let mut best = vec![f64::INFINITY; n + 1];
    let mut prev = vec![0usize; n + 1];
    let mut last_cost = vec![0.0; n + 1];
    let mut count = vec![0usize; n + 1];
    best[0] = 0.0;

    let mut candidates = vec![Candidate {
        start: 0,
        block_sum: 0.0,
        retire_at: usize::MAX,
    }];

    for b in 1..=n {
        candidates.retain(|c| c.retire_at > b);

        // Grow every block sum by the new point r[b-1].
        let x = r[b - 1];
        let mut u = b - 1;
        let mut column = 0.0;
        for cand in candidates.iter_mut().rev() {
            while u > cand.start {
                u -= 1;
                column += kernel.eval(r[u], x);
            }
            cand.block_sum += 1.0 + 2.0 * column;
        }

        if b < min_len {
            continue;
        }

        let mut chosen: Option<(f64, f64, usize)> = None; // (value, cost, start)
        for cand in candidates.iter().filter(|c| b - c.start >= min_len) {
            let a = cand.start;
            let len = (b - a) as f64;
            let cost = (len - cand.block_sum / len).max(0.0);
            let value = best[a] + cost + if a > 0 { penalty } else { 0.0 };
            let better = match chosen {
                None => true,
                Some((v, _, a_best)) => {
                    if value < v - TIE_TOLERANCE {
                        true
                    } else if value > v + TIE_TOLERANCE {
                        false
                    } else {
                        tie_prefers(&prev, &count, a, a_best)
                    }
                }
            };
            if better {
                chosen = Some((value, cost, a));
            }
        }
        let Some((value, cost, a)) = chosen else {
            continue;
        };
        best[b] = value;
        prev[b] = a;
        last_cost[b] = cost;
        count[b] = count[a] + usize::from(a > 0);

        // A start whose path to b already costs more than closing at b and
        // paying one more penalty can never win again once b is admissible.
        let threshold = value + penalty + PRUNE_MARGIN;
        for cand in candidates.iter_mut().filter(|c| c.retire_at == usize::MAX) {
            let a = cand.start;
            if a >= b || !best[a].is_finite() {
                continue;
            }
            let len = (b - a) as f64;
            let cost = (len - cand.block_sum / len).max(0.0);
            let v = best[a] + cost + if a > 0 { penalty } else { 0.0 };
            if v > threshold {
                cand.retire_at = b + min_len;
            }
        }

        if b >= min_len && b + min_len <= n {
            candidates.push(Candidate {
                start: b,
                block_sum: 0.0,
                retire_at: usize::MAX,
            });
        }
    }

    let breakpoints = prefix_path(&prev, n);
    let mut costs = Vec::with_capacity(breakpoints.len() + 1);
    let mut b = n;
    while b > 0 {
        costs.push(last_cost[b]);
        b = prev[b];
    }
    costs.reverse();
    let segmentation = Segmentation::new(breakpoints, n)?;
    Ok(SegmentationResult::from_costs(
        segmentation,
        &costs,
        penalty,
    ))
}

/// Whether start `a` beats `a_best` among equal-valued candidates.
fn tie_prefers(prev: &[usize], count: &[usize], a: usize, a_best: usize) -> bool {
    let ka = count[a] + usize::from(a > 0);
    let kb = count[a_best] + usize::from(a_best > 0);
    match ka.cmp(&kb) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => {
            let mut pa = prefix_path(prev, a);
            if a > 0 {
                pa.push(a);
            }
            let mut pb = prefix_path(prev, a_best);
            if a_best > 0 {
                pb.push(a_best);
            }
            pa < pb
        }
    }
}

/// Branch-and-bound enumeration of every admissible breakpoint set.
///
/// Only meant as a test oracle; refuses series longer than [`ORACLE_MAX_LEN`].
pub fn exhaustive_segmentation_oracle(
    r: &[f64],
    penalty: f64,
    kernel: KernelSpec,
    min_segment_length: usize,
) -> Result<SegmentationResult> {
    let n = r.len();
    if n > ORACLE_MAX_LEN {
        return Err(Error::TooLong {
            max: ORACLE_MAX_LEN,
            actual: n,
        });
    }
    validate_search(n, penalty, min_segment_length)?;

    let mut cost = vec![vec![f64::NAN; n + 1]; n + 1];
    for (a, row) in cost.iter_mut().enumerate().take(n) {
        for (b, c) in row.iter_mut().enumerate().skip(a + 1) {
            *c = kernel_cost(r, a, b, kernel)?;
        }
    }

    struct Search<'a> {
        n: usize,
        min_len: usize,
        penalty: f64,
        cost: &'a [Vec<f64>],
        path: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn offer(&mut self, value: f64) {
            let replace = match &self.best {
                None => true,
                Some((v, bp)) => {
                    if value < v - TIE_TOLERANCE {
                        true
                    } else if value > v + TIE_TOLERANCE {
                        false
                    } else {
                        (self.path.len(), &self.path) < (bp.len(), bp)
                    }
                }
            };
            if replace {
                self.best = Some((value, self.path.clone()));
            }
        }

        fn visit(&mut self, start: usize, partial: f64) {
            if let Some((v, _)) = &self.best {
                if partial > v + TIE_TOLERANCE {
                    return;
                }
            }
            self.offer(partial + self.cost[start][self.n]);
            for end in start + self.min_len..=self.n.saturating_sub(self.min_len) {
                self.path.push(end);
                let next = partial + self.cost[start][end] + self.penalty;
                self.visit(end, next);
                self.path.pop();
            }
        }
    }

    let mut search = Search {
        n,
        min_len: min_segment_length,
        penalty,
        cost: &cost,
        path: Vec::new(),
        best: None,
    };
    search.visit(0, 0.0);
    let (_, breakpoints) = search
        .best
        .expect("the single-segment solution is always admissible");
    let segmentation = Segmentation::new(breakpoints, n)?;
    let costs: Vec<f64> = segmentation
        .segments()
        .map(|s| cost[s.start][s.end])
        .collect();
    Ok(SegmentationResult::from_costs(
        segmentation,
        &costs,
        penalty,
    ))
}
