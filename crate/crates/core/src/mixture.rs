//! Two-layer Gaussian mixture market model.
//!
//! Each of the `K2` scenarios is itself a `K1`-component Gaussian mixture
//! whose parameters are shared across time. Only the scenario weights change
//! from one segment to the next:
//!
//! ```text
//! f_t(x) = sum_j beta[t][j] * sum_i alpha[j][i] * N(x | mu[j][i], sigma[j][i]^2)
//! ```
//!
//! Mixture labels are not identifiable, so every constructed model is put in
//! a canonical order: scenarios by ascending variance, inner components by
//! ascending standard deviation.

use std::cmp::Ordering;
use std::f64::consts::{PI, SQRT_2};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on weight vectors summing to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF through the complementary error function.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// A univariate distribution that can be inverted by bracketing and bisection.
pub trait UnivariateDistribution {
    fn pdf(&self, x: f64) -> f64;
    fn cdf(&self, x: f64) -> f64;
    /// Interval `[min mu - 10 max sigma, max mu + 10 max sigma]` used to seed root finding.
    fn bracket(&self) -> (f64, f64);
}

fn bracket_of<'a>(gaussians: impl Iterator<Item = &'a GaussianComponent>) -> (f64, f64) {
    let (mut lo_mu, mut hi_mu, mut max_sigma) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for g in gaussians {
        lo_mu = lo_mu.min(g.mu);
        hi_mu = hi_mu.max(g.mu);
        max_sigma = max_sigma.max(g.sigma);
    }
    (lo_mu - 10.0 * max_sigma, hi_mu + 10.0 * max_sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianComponent {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::InvalidModel(format!(
                "mean must be finite, got {mu}"
            )));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidModel(format!(
                "standard deviation must be finite and > 0, got {sigma}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    #[inline]
    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        -0.5 * z * z - self.sigma.ln() - LN_SQRT_2PI
    }
}

impl UnivariateDistribution for GaussianComponent {
    #[inline]
    fn pdf(&self, x: f64) -> f64 {
        std_normal_pdf((x - self.mu) / self.sigma) / self.sigma
    }

    #[inline]
    fn cdf(&self, x: f64) -> f64 {
        std_normal_cdf((x - self.mu) / self.sigma)
    }

    fn bracket(&self) -> (f64, f64) {
        bracket_of(std::iter::once(self))
    }
}

fn check_simplex(weights: &[f64], what: &str) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidModel(format!("{what}: empty weight vector")));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidModel(format!(
            "{what}: weight {w} is not a probability"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidModel(format!(
            "{what}: weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// One market scenario: a Gaussian mixture with weights `alpha[j][.]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioComponent {
    weights: Vec<f64>,
    gaussians: Vec<GaussianComponent>,
}

impl ScenarioComponent {
    pub fn new(weights: Vec<f64>, gaussians: Vec<GaussianComponent>) -> Result<Self> {
        if weights.len() != gaussians.len() {
            return Err(Error::InvalidModel(format!(
                "{} weights for {} gaussians",
                weights.len(),
                gaussians.len()
            )));
        }
        check_simplex(&weights, "scenario")?;
        let mut s = Self { weights, gaussians };
        s.canonicalize();
        Ok(s)
    }

    pub fn gaussian(mu: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![GaussianComponent::new(mu, sigma)?])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gaussians(&self) -> &[GaussianComponent] {
        &self.gaussians
    }

    pub fn k1(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.gaussians)
            .map(|(w, g)| w * g.mu)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.weights
            .iter()
            .zip(&self.gaussians)
            .map(|(w, g)| w * (g.sigma * g.sigma + (g.mu - mean) * (g.mu - mean)))
            .sum()
    }

    fn canonicalize(&mut self) {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| {
            let (ga, gb) = (&self.gaussians[a], &self.gaussians[b]);
            ga.sigma
                .total_cmp(&gb.sigma)
                .then(ga.mu.total_cmp(&gb.mu))
                .then(self.weights[a].total_cmp(&self.weights[b]))
        });
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        self.gaussians = order.iter().map(|&i| self.gaussians[i]).collect();
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let head = self
            .variance()
            .total_cmp(&other.variance())
            .then(self.mean().total_cmp(&other.mean()));
        self.gaussians
            .iter()
            .zip(&self.weights)
            .zip(other.gaussians.iter().zip(&other.weights))
            .fold(head, |acc, ((ga, wa), (gb, wb))| {
                acc.then(ga.sigma.total_cmp(&gb.sigma))
                    .then(ga.mu.total_cmp(&gb.mu))
                    .then(wa.total_cmp(wb))
            })
    }
}

impl UnivariateDistribution for ScenarioComponent {
    fn pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.gaussians)
            .map(|(w, g)| w * g.pdf(x))
            .sum()
    }

    fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.gaussians)
            .map(|(w, g)| w * g.cdf(x))
            .sum()
    }

    fn bracket(&self) -> (f64, f64) {
        bracket_of(self.gaussians.iter())
    }
}

/// A single-layer Gaussian mixture, typically produced by [`TwoLayerMixture::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedMixture {
    weights: Vec<f64>,
    gaussians: Vec<GaussianComponent>,
}

impl FlattenedMixture {
    pub fn new(weights: Vec<f64>, gaussians: Vec<GaussianComponent>) -> Result<Self> {
        if weights.len() != gaussians.len() {
            return Err(Error::InvalidModel(
                "weights and gaussians differ in length".into(),
            ));
        }
        check_simplex(&weights, "flattened mixture")?;
        Ok(Self { weights, gaussians })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gaussians(&self) -> &[GaussianComponent] {
        &self.gaussians
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.gaussians)
            .map(|(w, g)| w * g.mu)
            .sum()
    }
}

impl UnivariateDistribution for FlattenedMixture {
    fn pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.gaussians)
            .map(|(w, g)| w * g.pdf(x))
            .sum()
    }

    fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.gaussians)
            .map(|(w, g)| w * g.cdf(x))
            .sum()
    }

    fn bracket(&self) -> (f64, f64) {
        bracket_of(self.gaussians.iter())
    }
}

/// Latent draw labels returned by [`TwoLayerMixture::sample_with_labels`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelTrace {
    pub segment: Vec<usize>,
    pub scenario: Vec<usize>,
    pub component: Vec<usize>,
}

/// `K2` shared scenarios plus one row of scenario weights per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct TwoLayerMixture {
    scenarios: Vec<ScenarioComponent>,
    segment_weights: Vec<Vec<f64>>,
    segment_lengths: Vec<usize>,
}

impl TwoLayerMixture {
    /// Validates and canonicalizes. Every scenario must have the same `K1`.
    pub fn new(
        scenarios: Vec<ScenarioComponent>,
        segment_weights: Vec<Vec<f64>>,
        segment_lengths: Vec<usize>,
    ) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::InvalidModel(
                "at least one scenario is required".into(),
            ));
        }
        let k1 = scenarios[0].k1();
        if scenarios.iter().any(|s| s.k1() != k1) {
            return Err(Error::InvalidModel(
                "all scenarios must have the same number of components".into(),
            ));
        }
        if segment_weights.is_empty() {
            return Err(Error::InvalidModel(
                "at least one segment is required".into(),
            ));
        }
        if segment_weights.len() != segment_lengths.len() {
            return Err(Error::InvalidModel(format!(
                "{} weight rows for {} segment lengths",
                segment_weights.len(),
                segment_lengths.len()
            )));
        }
        for (t, row) in segment_weights.iter().enumerate() {
            if row.len() != scenarios.len() {
                return Err(Error::InvalidModel(format!(
                    "segment {t} has {} weights for {} scenarios",
                    row.len(),
                    scenarios.len()
                )));
            }
            check_simplex(row, &format!("segment {t}"))?;
        }
        let mut m = Self {
            scenarios,
            segment_weights,
            segment_lengths,
        };
        m.canonicalize();
        Ok(m)
    }

    /// Same scenarios, every segment weighted by `weights`.
    pub fn with_uniform_segments(
        scenarios: Vec<ScenarioComponent>,
        weights: Vec<f64>,
        segment_lengths: Vec<usize>,
    ) -> Result<Self> {
        let rows = vec![weights; segment_lengths.len()];
        Self::new(scenarios, rows, segment_lengths)
    }

    fn canonicalize(&mut self) {
        let mut order: Vec<usize> = (0..self.scenarios.len()).collect();
        order.sort_by(|&a, &b| self.scenarios[a].canonical_cmp(&self.scenarios[b]));
        if order.iter().enumerate().all(|(i, &j)| i == j) {
            return;
        }
        self.scenarios = order.iter().map(|&j| self.scenarios[j].clone()).collect();
        for row in &mut self.segment_weights {
            *row = order.iter().map(|&j| row[j]).collect();
        }
    }

    pub fn scenarios(&self) -> &[ScenarioComponent] {
        &self.scenarios
    }

    pub fn segment_weights(&self) -> &[Vec<f64>] {
        &self.segment_weights
    }

    pub fn segment_lengths(&self) -> &[usize] {
        &self.segment_lengths
    }

    pub fn k2(&self) -> usize {
        self.scenarios.len()
    }

    pub fn k1(&self) -> usize {
        self.scenarios[0].k1()
    }

    pub fn num_segments(&self) -> usize {
        self.segment_weights.len()
    }

    pub fn total_count(&self) -> usize {
        self.segment_lengths.iter().sum()
    }

    fn check_segment(&self, t: usize) -> Result<()> {
        if t >= self.num_segments() {
            return Err(Error::SegmentOutOfRange {
                index: t,
                count: self.num_segments(),
            });
        }
        Ok(())
    }

    pub fn segment_pdf(&self, t: usize, x: f64) -> Result<f64> {
        self.check_segment(t)?;
        Ok(self.segment_weights[t]
            .iter()
            .zip(&self.scenarios)
            .map(|(b, s)| b * s.pdf(x))
            .sum())
    }

    pub fn segment_cdf(&self, t: usize, x: f64) -> Result<f64> {
        self.check_segment(t)?;
        Ok(self.segment_weights[t]
            .iter()
            .zip(&self.scenarios)
            .map(|(b, s)| b * s.cdf(x))
            .sum())
    }

    /// Segment `t` as a `K2 * K1` single-layer mixture with weights `beta * alpha`.
    pub fn flatten(&self, t: usize) -> Result<FlattenedMixture> {
        self.check_segment(t)?;
        self.flatten_with(&self.segment_weights[t])
    }

    /// Time-averaged scenario weights `sum_t (n_t / n) beta[t]`.
    pub fn pooled_weights(&self) -> Vec<f64> {
        let n = self.total_count() as f64;
        let mut out = vec![0.0; self.k2()];
        for (row, &len) in self.segment_weights.iter().zip(&self.segment_lengths) {
            let share = if n > 0.0 {
                len as f64 / n
            } else {
                1.0 / self.num_segments() as f64
            };
            for (o, b) in out.iter_mut().zip(row) {
                *o += share * b;
            }
        }
        out
    }

    /// Flattens with an arbitrary row of scenario weights.
    pub fn flatten_with(&self, scenario_weights: &[f64]) -> Result<FlattenedMixture> {
        if scenario_weights.len() != self.k2() {
            return Err(Error::InvalidModel(
                "scenario weight row has wrong length".into(),
            ));
        }
        let mut weights = Vec::with_capacity(self.k2() * self.k1());
        let mut gaussians = Vec::with_capacity(self.k2() * self.k1());
        for (b, s) in scenario_weights.iter().zip(&self.scenarios) {
            for (a, g) in s.weights.iter().zip(&s.gaussians) {
                weights.push(b * a);
                gaussians.push(*g);
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidModel(format!(
                "flattened weights sum to {total}"
            )));
        }
        Ok(FlattenedMixture { weights, gaussians })
    }

    /// Draws `counts[t]` returns for every segment `t`, in segment order.
    pub fn sample(&self, seed: u64, counts: &[usize]) -> Result<Vec<f64>> {
        self.draw(seed, counts, None)
    }

    /// Like [`sample`](Self::sample) but also returns the latent labels.
    pub fn sample_with_labels(
        &self,
        seed: u64,
        counts: &[usize],
    ) -> Result<(Vec<f64>, LabelTrace)> {
        let mut trace = LabelTrace::default();
        let values = self.draw(seed, counts, Some(&mut trace))?;
        Ok((values, trace))
    }

    fn draw(
        &self,
        seed: u64,
        counts: &[usize],
        mut trace: Option<&mut LabelTrace>,
    ) -> Result<Vec<f64>> {
        if counts.len() != self.num_segments() {
            return Err(Error::InvalidParameter(format!(
                "{} counts for {} segments",
                counts.len(),
                self.num_segments()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = self
            .scenarios
            .iter()
            .map(|s| WeightedIndex::new(&s.weights))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidModel(e.to_string()))?;
        let mut out = Vec::with_capacity(counts.iter().sum());
        for (t, (&count, row)) in counts.iter().zip(&self.segment_weights).enumerate() {
            let outer = WeightedIndex::new(row).map_err(|e| Error::InvalidModel(e.to_string()))?;
            for _ in 0..count {
                let j = outer.sample(&mut rng);
                let i = inner[j].sample(&mut rng);
                let g = self.scenarios[j].gaussians[i];
                let z: f64 = StandardNormal.sample(&mut rng);
                out.push(g.mu + g.sigma * z);
                if let Some(tr) = trace.as_deref_mut() {
                    tr.segment.push(t);
                    tr.scenario.push(j);
                    tr.component.push(i);
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies `x -> scale * x + shift` to every Gaussian.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self> {
        let scenarios = self
            .scenarios
            .iter()
            .map(|s| {
                let gaussians = s
                    .gaussians
                    .iter()
                    .map(|g| GaussianComponent::new(scale * g.mu + shift, scale * g.sigma))
                    .collect::<Result<Vec<_>>>()?;
                ScenarioComponent::new(s.weights.clone(), gaussians)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            scenarios,
            self.segment_weights.clone(),
            self.segment_lengths.clone(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioDocument {
    weights: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

/// Wire form of [`TwoLayerMixture`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    k2: usize,
    k1: usize,
    scenarios: Vec<ScenarioDocument>,
    segment_weights: Vec<Vec<f64>>,
    segment_lengths: Vec<usize>,
}

impl From<TwoLayerMixture> for ModelDocument {
    fn from(m: TwoLayerMixture) -> Self {
        Self {
            k2: m.k2(),
            k1: m.k1(),
            scenarios: m
                .scenarios
                .iter()
                .map(|s| ScenarioDocument {
                    weights: s.weights.clone(),
                    mu: s.gaussians.iter().map(|g| g.mu).collect(),
                    sigma: s.gaussians.iter().map(|g| g.sigma).collect(),
                })
                .collect(),
            segment_weights: m.segment_weights,
            segment_lengths: m.segment_lengths,
        }
    }
}

impl TryFrom<ModelDocument> for TwoLayerMixture {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        if doc.scenarios.len() != doc.k2 {
            return Err(Error::InvalidModel(format!(
                "k2 = {} but {} scenarios listed",
                doc.k2,
                doc.scenarios.len()
            )));
        }
        let scenarios = doc
            .scenarios
            .into_iter()
            .map(|s| {
                if s.weights.len() != doc.k1 || s.mu.len() != doc.k1 || s.sigma.len() != doc.k1 {
                    return Err(Error::InvalidModel(format!(
                        "scenario arrays must have k1 = {} entries",
                        doc.k1
                    )));
                }
                let gaussians =
                    s.mu.iter()
                        .zip(&s.sigma)
                        .map(|(&mu, &sigma)| GaussianComponent::new(mu, sigma))
                        .collect::<Result<Vec<_>>>()?;
                ScenarioComponent::new(s.weights, gaussians)
            })
            .collect::<Result<Vec<_>>>()?;
        TwoLayerMixture::new(scenarios, doc.segment_weights, doc.segment_lengths)
    }
}
