//! EM estimation of the two-layer mixture on a segmented return series.
//!
//! The Gaussians `(mu, sigma)` and inner weights `alpha` are shared by every
//! segment; only the scenario weights `beta[t]` are estimated per segment.
//! Responsibilities are computed in log space. Variances are floored at
//! `variance_floor_factor * var(r)`, which keeps each M-step a constrained
//! maximizer and so preserves monotone likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, ScenarioComponent, TwoLayerMixture};
use crate::segmentation::Segmentation;

/// Components whose total responsibility drops below this are re-seeded.
pub const COLLAPSE_THRESHOLD: f64 = 1e-8;

/// Per-observation log densities are floored here.
const LOG_DENSITY_FLOOR: f64 = -708.396_418_532_264_1; // ln(f64::MIN_POSITIVE)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub k2: usize,
    pub k1: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub variance_floor_factor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k2: 5,
            k1: 3,
            max_iters: 500,
            rel_tol: 1e-8,
            restarts: 10,
            seed: 0,
            variance_floor_factor: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.k2 == 0 || self.k1 == 0 {
            return bad(format!(
                "k2 and k1 must be >= 1, got k2={} k1={}",
                self.k2, self.k1
            ));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return bad(format!("rel_tol must be > 0, got {}", self.rel_tol));
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        if !(self.variance_floor_factor.is_finite() && self.variance_floor_factor > 0.0) {
            return bad(format!(
                "variance_floor_factor must be > 0, got {}",
                self.variance_floor_factor
            ));
        }
        Ok(())
    }

    fn components(&self) -> usize {
        self.k2 * self.k1
    }
}

/// Posterior membership over `(scenario j, component i)` pairs, one row per
/// observation, columns ordered `j * k1 + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    k2: usize,
    k1: usize,
    values: Vec<f64>,
    segment: Vec<usize>,
}

impl Responsibilities {
    /// Builds from explicit rows; each row must lie on the simplex.
    pub fn from_rows(
        k2: usize,
        k1: usize,
        rows: &[Vec<f64>],
        segmentation: &Segmentation,
    ) -> Result<Self> {
        let k = k2 * k1;
        if rows.len() != segmentation.series_length() {
            return Err(Error::InvalidParameter(
                "one responsibility row per observation required".into(),
            ));
        }
        let mut values = Vec::with_capacity(rows.len() * k);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidParameter(format!(
                    "row {s} has {} entries, expected {k}",
                    row.len()
                )));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (total - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParameter(format!(
                    "row {s} is not a probability vector"
                )));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            k2,
            k1,
            values,
            segment: segmentation.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        let k = self.k2 * self.k1;
        &self.values[s * k..(s + 1) * k]
    }

    pub fn get(&self, s: usize, j: usize, i: usize) -> f64 {
        self.row(s)[j * self.k1 + i]
    }

    pub fn segment_of(&self, s: usize) -> usize {
        self.segment[s]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(flatten)]
    pub model: TwoLayerMixture,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
    /// Log-likelihood before the first and after every iteration.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

fn check_inputs(r: &[f64], seg: &Segmentation) -> Result<()> {
    if seg.series_length() != r.len() {
        return Err(Error::InvalidParameter(format!(
            "segmentation covers {} observations, series has {}",
            seg.series_length(),
            r.len()
        )));
    }
    if let Some(x) = r.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite return {x}")));
    }
    Ok(())
}

fn check_model(seg: &Segmentation, m: &TwoLayerMixture) -> Result<()> {
    if m.num_segments() != seg.num_segments() {
        return Err(Error::InvalidModel(format!(
            "model has {} segments, segmentation has {}",
            m.num_segments(),
            seg.num_segments()
        )));
    }
    Ok(())
}

fn moments(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Flattened parameter view used by the inner loops.
struct Flat {
    k1: usize,
    gaussians: Vec<GaussianComponent>,
    ln_sigma: Vec<f64>,
    /// `ln beta[t][j] + ln alpha[j][i]` per segment.
    ln_weights: Vec<Vec<f64>>,
}

impl Flat {
    fn new(m: &TwoLayerMixture) -> Self {
        let gaussians: Vec<GaussianComponent> = m
            .scenarios()
            .iter()
            .flat_map(|s| s.gaussians().iter().copied())
            .collect();
        let ln_sigma = gaussians.iter().map(|g| g.sigma.ln()).collect();
        let ln_weights = m
            .segment_weights()
            .iter()
            .map(|row| {
                row.iter()
                    .zip(m.scenarios())
                    .flat_map(|(b, s)| s.weights().iter().map(move |a| b.ln() + a.ln()))
                    .collect()
            })
            .collect();
        Self {
            k1: m.k1(),
            gaussians,
            ln_sigma,
            ln_weights,
        }
    }

    /// Fills `out` with the joint log weights of observation `x` in segment `t`.
    #[inline]
    fn joint(&self, t: usize, x: f64, out: &mut [f64]) {
        const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
        for (c, o) in out.iter_mut().enumerate() {
            let g = &self.gaussians[c];
            let z = (x - g.mu) / g.sigma;
            *o = self.ln_weights[t][c] - 0.5 * z * z - self.ln_sigma[c] - LN_SQRT_2PI;
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// E-step plus the observed-data log-likelihood, sharing one pass.
fn expectation(
    r: &[f64],
    seg: &Segmentation,
    m: &TwoLayerMixture,
) -> Result<(Responsibilities, f64)> {
    check_inputs(r, seg)?;
    check_model(seg, m)?;
    let flat = Flat::new(m);
    let k = m.k2() * m.k1();
    let labels = seg.labels();
    let mut values = vec![0.0; r.len() * k];
    let mut ll = 0.0;
    for (s, (&x, &t)) in r.iter().zip(&labels).enumerate() {
        let row = &mut values[s * k..(s + 1) * k];
        flat.joint(t, x, row);
        let lse = log_sum_exp(row);
        if !lse.is_finite() {
            return Err(Error::DensityUnderflow(s));
        }
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
        ll += lse.max(LOG_DENSITY_FLOOR);
    }
    Ok((
        Responsibilities {
            k2: m.k2(),
            k1: flat.k1,
            values,
            segment: labels,
        },
        ll,
    ))
}

/// Posterior membership of every observation given the current model.
pub fn e_step(r: &[f64], seg: &Segmentation, m: &TwoLayerMixture) -> Result<Responsibilities> {
    expectation(r, seg, m).map(|(resp, _)| resp)
}

/// `sum_s ln f_{t(s)}(r_s)`, accumulated in log space.
pub fn log_likelihood(r: &[f64], seg: &Segmentation, m: &TwoLayerMixture) -> Result<f64> {
    check_inputs(r, seg)?;
    check_model(seg, m)?;
    let flat = Flat::new(m);
    let mut buf = vec![0.0; m.k2() * m.k1()];
    let mut ll = 0.0;
    for (&x, t) in r.iter().zip(seg.labels()) {
        flat.joint(t, x, &mut buf);
        ll += log_sum_exp(&buf).max(LOG_DENSITY_FLOOR);
    }
    Ok(ll)
}

/// M-step with a fresh generator derived from `cfg.seed` for collapse rescue.
pub fn m_step(
    r: &[f64],
    seg: &Segmentation,
    resp: &Responsibilities,
    cfg: &FitConfig,
) -> Result<TwoLayerMixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    maximization(r, seg, resp, cfg, &mut rng)
}

fn maximization<R: Rng>(
    r: &[f64],
    seg: &Segmentation,
    resp: &Responsibilities,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<TwoLayerMixture> {
    check_inputs(r, seg)?;
    let (k2, k1) = (resp.k2, resp.k1);
    let k = k2 * k1;
    if resp.len() != r.len() {
        return Err(Error::InvalidParameter(
            "responsibilities do not match the series".into(),
        ));
    }
    let n_seg = seg.num_segments();
    let (_, data_var) = moments(r);
    if data_var <= 0.0 {
        return Err(Error::Degenerate("returns have zero variance".into()));
    }
    let var_floor = cfg.variance_floor_factor * data_var;

    // Soft counts per segment and component, and weighted first moments.
    let mut seg_counts = vec![vec![0.0; k]; n_seg];
    let mut weighted_sum = vec![0.0; k];
    for (s, &x) in r.iter().enumerate() {
        let t = resp.segment[s];
        for (c, &eta) in resp.row(s).iter().enumerate() {
            seg_counts[t][c] += eta;
            weighted_sum[c] += eta * x;
        }
    }
    let totals: Vec<f64> = (0..k)
        .map(|c| seg_counts.iter().map(|row| row[c]).sum())
        .collect();
    let means: Vec<f64> = (0..k)
        .map(|c| {
            if totals[c] > 0.0 {
                weighted_sum[c] / totals[c]
            } else {
                0.0
            }
        })
        .collect();
    let mut sq = vec![0.0; k];
    for (s, &x) in r.iter().enumerate() {
        for (c, &eta) in resp.row(s).iter().enumerate() {
            let d = x - means[c];
            sq[c] += eta * d * d;
        }
    }

    let data_std = data_var.sqrt();
    let mut gaussians = Vec::with_capacity(k);
    for c in 0..k {
        let g = if totals[c] < COLLAPSE_THRESHOLD {
            GaussianComponent::new(r[rng.random_range(0..r.len())], data_std)?
        } else {
            let var = (sq[c] / totals[c]).max(var_floor);
            GaussianComponent::new(means[c], var.sqrt())?
        };
        gaussians.push(g);
    }

    let mut scenarios = Vec::with_capacity(k2);
    for j in 0..k2 {
        let cols = j * k1..(j + 1) * k1;
        let scenario_total: f64 = totals[cols.clone()].iter().sum();
        let alpha: Vec<f64> = if scenario_total > 0.0 {
            totals[cols.clone()]
                .iter()
                .map(|v| v / scenario_total)
                .collect()
        } else {
            vec![1.0 / k1 as f64; k1]
        };
        scenarios.push(ScenarioComponent::new(alpha, gaussians[cols].to_vec())?);
    }

    let segment_weights = seg_counts
        .iter()
        .map(|row| {
            let per_scenario: Vec<f64> = (0..k2)
                .map(|j| row[j * k1..(j + 1) * k1].iter().sum())
                .collect();
            let n_t: f64 = per_scenario.iter().sum();
            per_scenario.iter().map(|v| v / n_t).collect()
        })
        .collect();

    TwoLayerMixture::new(scenarios, segment_weights, seg.lengths())
}

fn restart_rng(cfg: &FitConfig, restart: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(restart as u64))
}

/// Seeded k-means++ initialization of the `k2 * k1` Gaussians.
///
/// Centers are drawn k-means++ style from the pooled returns, points are
/// assigned to the nearest center, and each Gaussian takes its cluster's mean
/// and population standard deviation (floored). Weights start uniform.
pub fn init_model(
    r: &[f64],
    seg: &Segmentation,
    cfg: &FitConfig,
    restart: usize,
) -> Result<TwoLayerMixture> {
    init_with_rng(r, seg, cfg, &mut restart_rng(cfg, restart))
}

fn init_with_rng<R: Rng>(
    r: &[f64],
    seg: &Segmentation,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<TwoLayerMixture> {
    cfg.validate()?;
    check_inputs(r, seg)?;
    let n = r.len();
    let k = cfg.components();
    if n < k {
        return Err(Error::TooShort {
            required: k,
            actual: n,
        });
    }
    let (_, data_var) = moments(r);
    if data_var <= 0.0 {
        return Err(Error::Degenerate("returns have zero variance".into()));
    }
    let sigma_floor = (cfg.variance_floor_factor * data_var).sqrt();

    let mut centers = Vec::with_capacity(k);
    centers.push(r[rng.random_range(0..n)]);
    let mut dist2: Vec<f64> = r.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            dist2
                .iter()
                .position(|d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = r[pick];
        centers.push(c);
        for (d, x) in dist2.iter_mut().zip(r) {
            *d = d.min((x - c).powi(2));
        }
    }

    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut members: Vec<usize> = Vec::with_capacity(n);
    for &x in r {
        let nearest = (0..k)
            .min_by(|&a, &b| (x - centers[a]).abs().total_cmp(&(x - centers[b]).abs()))
            .expect("k >= 1");
        sums[nearest] += x;
        counts[nearest] += 1;
        members.push(nearest);
    }
    let means: Vec<f64> = (0..k)
        .map(|c| {
            if counts[c] > 0 {
                sums[c] / counts[c] as f64
            } else {
                centers[c]
            }
        })
        .collect();
    let mut sq = vec![0.0; k];
    for (&x, &c) in r.iter().zip(&members) {
        sq[c] += (x - means[c]).powi(2);
    }
    let data_std = data_var.sqrt();
    let gaussians = (0..k)
        .map(|c| {
            let sd = if counts[c] > 0 {
                (sq[c] / counts[c] as f64).sqrt()
            } else {
                data_std
            };
            GaussianComponent::new(means[c], sd.max(sigma_floor))
        })
        .collect::<Result<Vec<_>>>()?;

    let alpha = vec![1.0 / cfg.k1 as f64; cfg.k1];
    let scenarios = gaussians
        .chunks(cfg.k1)
        .map(|chunk| ScenarioComponent::new(alpha.clone(), chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let beta = vec![1.0 / cfg.k2 as f64; cfg.k2];
    TwoLayerMixture::with_uniform_segments(scenarios, beta, seg.lengths())
}

/// Runs EM from `init` until the relative log-likelihood change drops below
/// `cfg.rel_tol` or `cfg.max_iters` iterations have run.
pub fn fit_from(
    r: &[f64],
    seg: &Segmentation,
    init: TwoLayerMixture,
    cfg: &FitConfig,
    restart: usize,
) -> Result<FitResult> {
    run_em(r, seg, init, cfg, restart, &mut restart_rng(cfg, restart))
}

fn run_em<R: Rng>(
    r: &[f64],
    seg: &Segmentation,
    init: TwoLayerMixture,
    cfg: &FitConfig,
    restart: usize,
    rng: &mut R,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut model = init;
    let (mut resp, mut ll) = expectation(r, seg, &model)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        model = maximization(r, seg, &resp, cfg, rng)?;
        let (next_resp, next_ll) = expectation(r, seg, &model)?;
        iterations += 1;
        trace.push(next_ll);
        let rel = (next_ll - ll).abs() / (ll.abs() + 1.0);
        resp = next_resp;
        ll = next_ll;
        if rel < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    if !ll.is_finite() {
        return Err(Error::Degenerate(format!("log-likelihood is {ll}")));
    }
    Ok(FitResult {
        model,
        log_likelihood: ll,
        iterations,
        converged,
        restart_index: restart,
        trace,
    })
}

/// One EM run from the seeded initialization for `restart`.
pub fn fit_restart(
    r: &[f64],
    seg: &Segmentation,
    cfg: &FitConfig,
    restart: usize,
) -> Result<FitResult> {
    let mut rng = restart_rng(cfg, restart);
    let init = init_with_rng(r, seg, cfg, &mut rng)?;
    run_em(r, seg, init, cfg, restart, &mut rng)
}

/// Best of `cfg.restarts` independent EM runs by final log-likelihood.
///
/// Restarts run in parallel; restart `k` is seeded with `cfg.seed + k`, so the
/// result does not depend on scheduling. Ties go to the lower restart index.
pub fn fit(r: &[f64], seg: &Segmentation, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_inputs(r, seg)?;
    if r.len() < cfg.components() {
        return Err(Error::TooShort {
            required: cfg.components(),
            actual: r.len(),
        });
    }
    let runs = (0..cfg.restarts)
        .into_par_iter()
        .map(|k| fit_restart(r, seg, cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let best = runs
        .into_iter()
        .reduce(|best, run| {
            if run.log_likelihood > best.log_likelihood {
                run
            } else {
                best
            }
        })
        .expect("restarts >= 1");
    Ok(best)
}
