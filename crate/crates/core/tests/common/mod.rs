#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wvar::mixture::{GaussianComponent, ScenarioComponent, TwoLayerMixture};
use wvar::pipeline::simulate_prices;

pub fn simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn random_scenario<R: Rng>(rng: &mut R, k1: usize) -> ScenarioComponent {
    let gaussians = (0..k1)
        .map(|_| {
            GaussianComponent::new(rng.random_range(-0.05..0.05), rng.random_range(0.002..0.06))
                .unwrap()
        })
        .collect();
    ScenarioComponent::new(simplex(rng, k1), gaussians).unwrap()
}

pub fn random_model<R: Rng>(rng: &mut R, k2: usize, k1: usize, segments: usize) -> TwoLayerMixture {
    let scenarios = (0..k2).map(|_| random_scenario(rng, k1)).collect();
    let rows = (0..segments).map(|_| simplex(rng, k2)).collect();
    let lengths = (0..segments).map(|_| rng.random_range(5..300)).collect();
    TwoLayerMixture::new(scenarios, rows, lengths).unwrap()
}

/// Two regimes: `n1` calm draws then `n2` draws with `sigma_ratio` times the spread.
pub fn two_regime_returns(
    rng: &mut ChaCha8Rng,
    n1: usize,
    n2: usize,
    sigma: f64,
    sigma_ratio: f64,
) -> Vec<f64> {
    let calm = Normal::new(0.0, sigma).unwrap();
    let wild = Normal::new(0.0, sigma * sigma_ratio).unwrap();
    let mut r: Vec<f64> = (0..n1).map(|_| calm.sample(rng)).collect();
    r.extend((0..n2).map(|_| wild.sample(rng)));
    r
}

/// Writes a price CSV sampled from a calm/volatile two-scenario model.
pub fn write_planted_prices(path: &Path, per_segment: usize, seed: u64) {
    let calm = ScenarioComponent::gaussian(0.0005, 0.008).unwrap();
    let wild = ScenarioComponent::gaussian(-0.001, 0.03).unwrap();
    let model = TwoLayerMixture::new(
        vec![calm, wild],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        vec![per_segment, per_segment],
    )
    .unwrap();
    let prices = simulate_prices(&model, None, seed).unwrap();
    prices
        .write_csv(std::fs::File::create(path).unwrap())
        .unwrap();
}
