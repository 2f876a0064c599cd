//! VaR, worst-case VaR and best-case VaR.
//!
//! Returns, not losses, are modelled, and `alpha` is a confidence level:
//! `VaR_alpha = -Q(1 - alpha)` where `Q` is the return quantile. A positive VaR
//! is a loss magnitude in log-return units.
//!
//! The ambiguity set for WVaR/BVaR is the `K2` first-layer scenarios of the
//! fitted model; the inner Gaussians are only a density approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, TwoLayerMixture, UnivariateDistribution};

/// Quantile root finding gives up after this many bisection steps.
pub const MAX_BISECTION_STEPS: usize = 200;
/// Minimum observations for [`empirical_var`].
pub const MIN_EMPIRICAL_OBSERVATIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskBasis {
    FittedMixture,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSelector {
    Pooled,
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskQuery {
    pub alpha: f64,
    pub segment: SegmentSelector,
    pub basis: RiskBasis,
}

impl Default for RiskQuery {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            segment: SegmentSelector::Pooled,
            basis: RiskBasis::FittedMixture,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub alpha: f64,
    pub var: f64,
    pub wvar: f64,
    pub bvar: f64,
    pub per_scenario_var: Vec<f64>,
    pub worst_scenario: usize,
    pub best_scenario: usize,
    pub basis: RiskBasis,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.5 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence level must lie in (0.5, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Inverts a continuous increasing CDF at `p`.
///
/// Starts from the distribution's bracket, widens it until it straddles `p`,
/// then bisects to floating-point resolution or [`MAX_BISECTION_STEPS`].
pub fn mixture_quantile<D: UnivariateDistribution + ?Sized>(dist: &D, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    let (mut lo, mut hi) = dist.bracket();
    let mut width = (hi - lo).max(f64::MIN_POSITIVE);
    while dist.cdf(lo) > p {
        hi = lo;
        lo -= width;
        width *= 2.0;
    }
    width = (hi - lo).max(f64::MIN_POSITIVE);
    while dist.cdf(hi) < p {
        lo = hi;
        hi += width;
        width *= 2.0;
    }
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        if dist.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Either endpoint is within one ulp of the root; take the closer in CDF.
    if (dist.cdf(lo) - p).abs() < (dist.cdf(hi) - p).abs() {
        Ok(lo)
    } else {
        Ok(hi)
    }
}

/// `-Q(1 - alpha)` for any invertible distribution.
pub fn value_at_risk<D: UnivariateDistribution + ?Sized>(dist: &D, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(-mixture_quantile(dist, 1.0 - alpha)?)
}

/// Per-scenario VaR with the extremes and their indices.
///
/// `var` is filled with the pooled VaR; ties for worst/best go to the lower index.
///
/// A mixture's quantile lies between its components' quantiles, so the pooled
/// VaR is clamped to `[bvar, wvar]` to absorb last-bit rounding differences
/// between the two CDF evaluations.
pub fn worst_best_var(model: &TwoLayerMixture, alpha: f64) -> Result<RiskReport> {
    check_alpha(alpha)?;
    let per_scenario_var = model
        .scenarios()
        .iter()
        .map(|s| value_at_risk(s, alpha))
        .collect::<Result<Vec<_>>>()?;
    let (worst_scenario, wvar) = extreme(&per_scenario_var, |a, b| a > b);
    let (best_scenario, bvar) = extreme(&per_scenario_var, |a, b| a < b);
    let var = pooled_var(model, alpha)?.clamp(bvar, wvar);
    Ok(RiskReport {
        alpha,
        var,
        wvar,
        bvar,
        per_scenario_var,
        worst_scenario,
        best_scenario,
        basis: RiskBasis::FittedMixture,
    })
}

fn extreme(values: &[f64], wins: impl Fn(f64, f64) -> bool) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (k, &v) in values.iter().enumerate().skip(1) {
        if wins(v, best.1) {
            best = (k, v);
        }
    }
    best
}

/// VaR of the flattened mixture under the time-averaged scenario weights
/// `sum_t (n_t / n) beta[t]`.
pub fn pooled_var(model: &TwoLayerMixture, alpha: f64) -> Result<f64> {
    let pooled = model.flatten_with(&model.pooled_weights())?;
    value_at_risk(&pooled, alpha)
}

/// VaR of a single segment's mixture.
pub fn segment_var(model: &TwoLayerMixture, segment: usize, alpha: f64) -> Result<f64> {
    value_at_risk(&model.flatten(segment)?, alpha)
}

/// Negated empirical `(1 - alpha)` quantile with linear interpolation between
/// order statistics.
pub fn empirical_var(returns: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if returns.len() < MIN_EMPIRICAL_OBSERVATIONS {
        return Err(Error::TooShort {
            required: MIN_EMPIRICAL_OBSERVATIONS,
            actual: returns.len(),
        });
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * (1.0 - alpha);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let q = sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]);
    Ok(-q)
}

/// Evaluates a [`RiskQuery`] against a model and, for the empirical basis,
/// the returns it was fitted to.
pub fn evaluate_query(
    model: &TwoLayerMixture,
    returns: &[f64],
    query: &RiskQuery,
) -> Result<RiskReport> {
    let mut report = worst_best_var(model, query.alpha)?;
    report.var = match (query.basis, query.segment) {
        (RiskBasis::FittedMixture, SegmentSelector::Pooled) => report.var,
        (RiskBasis::FittedMixture, SegmentSelector::Index(t)) => {
            segment_var(model, t, query.alpha)?
        }
        (RiskBasis::Empirical, SegmentSelector::Pooled) => empirical_var(returns, query.alpha)?,
        (RiskBasis::Empirical, SegmentSelector::Index(t)) => {
            let lengths = model.segment_lengths();
            if t >= lengths.len() {
                return Err(Error::SegmentOutOfRange {
                    index: t,
                    count: lengths.len(),
                });
            }
            let start: usize = lengths[..t].iter().sum();
            let end = start + lengths[t];
            if end > returns.len() {
                return Err(Error::InvalidParameter(
                    "returns shorter than the model's segments".into(),
                ));
            }
            empirical_var(&returns[start..end], query.alpha)?
        }
    };
    report.basis = query.basis;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverestimationCheck {
    /// WVaR over the scenario mixtures active in the segment.
    pub two_layer_wvar: f64,
    /// WVaR over their individual Gaussians.
    pub flattened_wvar: f64,
}

/// Compares WVaR over the scenarios of segment `t` with WVaR over the
/// individual Gaussians those scenarios are built from.
///
/// Only scenarios with positive weight in segment `t`, and inner components
/// with positive weight, take part. Treating each Gaussian as its own
/// scenario can only raise WVaR.
pub fn one_layer_overestimation_check(
    model: &TwoLayerMixture,
    t: usize,
    alpha: f64,
) -> Result<OverestimationCheck> {
    check_alpha(alpha)?;
    if t >= model.num_segments() {
        return Err(Error::SegmentOutOfRange {
            index: t,
            count: model.num_segments(),
        });
    }
    let row = &model.segment_weights()[t];
    let mut two_layer_wvar = f64::NEG_INFINITY;
    let mut flattened_wvar = f64::NEG_INFINITY;
    for (s, &beta) in model.scenarios().iter().zip(row) {
        if beta <= 0.0 {
            continue;
        }
        two_layer_wvar = two_layer_wvar.max(value_at_risk(s, alpha)?);
        let active: Vec<GaussianComponent> = s
            .weights()
            .iter()
            .zip(s.gaussians())
            .filter(|(w, _)| **w > 0.0)
            .map(|(_, g)| *g)
            .collect();
        for g in active {
            flattened_wvar = flattened_wvar.max(value_at_risk(&g, alpha)?);
        }
    }
    Ok(OverestimationCheck {
        two_layer_wvar,
        flattened_wvar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::tests::{g, random_model};
    use crate::mixture::{FlattenedMixture, ScenarioComponent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const Z95: f64 = 1.644_853_626_951_472_2;

    /// Brute-force inversion on an evenly spaced grid over the bracket.
    fn grid_quantile<D: UnivariateDistribution>(d: &D, p: f64, points: usize) -> (f64, f64) {
        let (lo, hi) = d.bracket();
        let step = (hi - lo) / (points - 1) as f64;
        let idx = (0..points)
            .find(|&i| d.cdf(lo + i as f64 * step) >= p)
            .unwrap_or(points - 1);
        (lo + idx as f64 * step, step)
    }

    #[test]
    fn quantile_examples() {
        let n = g(0.0, 1.0);
        assert!(mixture_quantile(&n, 0.5).unwrap().abs() < 1e-10);
        assert!((mixture_quantile(&n, 0.05).unwrap() + 1.6449).abs() < 1e-4);
        let pair = ScenarioComponent::new(vec![0.5, 0.5], vec![g(-1.0, 1.0), g(1.0, 1.0)]).unwrap();
        assert!(mixture_quantile(&pair, 0.5).unwrap().abs() < 1e-10);
        assert!(matches!(
            mixture_quantile(&n, 0.0),
            Err(Error::ProbabilityOutOfRange(_))
        ));
        assert!(matches!(
            mixture_quantile(&n, 1.0),
            Err(Error::ProbabilityOutOfRange(_))
        ));
    }

    #[test]
    fn quantile_outside_initial_bracket() {
        // p so extreme the root lies beyond 10 sigma.
        let n = g(0.0, 1.0);
        let q = mixture_quantile(&n, 1e-30).unwrap();
        assert!((n.cdf(q) - 1e-30).abs() < 1e-40);
        assert!(q < -10.0);
    }

    #[test]
    fn quantile_cdf_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = random_model(&mut rng, 3, 3, 1);
            let f = m.flatten(0).unwrap();
            for k in 1..100 {
                let p = k as f64 / 100.0;
                let q = mixture_quantile(&f, p).unwrap();
                assert!((f.cdf(q) - p).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn var_examples() {
        assert!((value_at_risk(&g(0.0, 0.01), 0.95).unwrap() - 0.016449).abs() < 1e-5);
        assert!((value_at_risk(&g(0.001, 0.01), 0.95).unwrap() - 0.015449).abs() < 1e-5);
        for bad in [0.5, 1.0, 0.3, f64::NAN] {
            assert!(value_at_risk(&g(0.0, 1.0), bad).is_err());
        }
    }

    #[test]
    fn var_matches_grid_inversion() {
        let f = FlattenedMixture::new(
            vec![0.2, 0.5, 0.3],
            vec![g(-0.03, 0.04), g(0.002, 0.01), g(0.01, 0.02)],
        )
        .unwrap();
        let (q, step) = grid_quantile(&f, 0.05, 1_000_000);
        let var = value_at_risk(&f, 0.95).unwrap();
        assert!((var + q).abs() <= step);
    }

    #[test]
    fn worst_best_examples() {
        let single = TwoLayerMixture::new(
            vec![ScenarioComponent::gaussian(0.0, 0.01).unwrap()],
            vec![vec![1.0]],
            vec![10],
        )
        .unwrap();
        let rep = worst_best_var(&single, 0.95).unwrap();
        assert_eq!(rep.wvar, rep.bvar);
        assert_eq!(rep.wvar, rep.per_scenario_var[0]);

        let two = TwoLayerMixture::new(
            vec![
                ScenarioComponent::gaussian(0.0, 0.01).unwrap(),
                ScenarioComponent::gaussian(0.0, 0.02).unwrap(),
            ],
            vec![vec![0.5, 0.5]],
            vec![10],
        )
        .unwrap();
        let rep = worst_best_var(&two, 0.95).unwrap();
        assert!((rep.per_scenario_var[0] - 0.016449).abs() < 1e-6);
        assert!((rep.per_scenario_var[1] - 0.032898).abs() < 1e-6);
        assert_eq!(rep.wvar, rep.per_scenario_var[1]);
        assert_eq!(rep.bvar, rep.per_scenario_var[0]);
        assert_eq!((rep.worst_scenario, rep.best_scenario), (1, 0));
        assert!(rep.bvar < rep.var && rep.var < rep.wvar);
    }

    #[test]
    fn worst_best_ties_prefer_lower_index() {
        assert_eq!(extreme(&[1.0, 3.0, 3.0, 0.5], |a, b| a > b), (1, 3.0));
        assert_eq!(extreme(&[1.0, 0.5, 3.0, 0.5], |a, b| a < b), (1, 0.5));
    }

    #[test]
    fn worst_best_match_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let m = random_model(&mut rng, 5, 3, 2);
            let rep = worst_best_var(&m, 0.95).unwrap();
            let grid: Vec<(f64, f64)> = m
                .scenarios()
                .iter()
                .map(|s| {
                    let (q, step) = grid_quantile(s, 0.05, 200_000);
                    (-q, step)
                })
                .collect();
            let (gw, sw) =
                grid.iter().copied().fold(
                    (f64::NEG_INFINITY, 0.0),
                    |a, b| if b.0 > a.0 { b } else { a },
                );
            let (gb, sb) =
                grid.iter()
                    .copied()
                    .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
            assert!((rep.wvar - gw).abs() <= sw);
            assert!((rep.bvar - gb).abs() <= sb);
        }
    }

    #[test]
    fn pooled_var_examples() {
        let scen = vec![
            ScenarioComponent::new(vec![0.5, 0.5], vec![g(0.0, 0.01), g(0.01, 0.02)]).unwrap(),
            ScenarioComponent::new(vec![0.3, 0.7], vec![g(-0.01, 0.03), g(0.0, 0.05)]).unwrap(),
        ];
        let m =
            TwoLayerMixture::with_uniform_segments(scen.clone(), vec![0.4, 0.6], vec![10, 30, 5])
                .unwrap();
        let seg = segment_var(&m, 1, 0.95).unwrap();
        assert!((pooled_var(&m, 0.95).unwrap() - seg).abs() < 1e-12);

        let one = TwoLayerMixture::new(
            vec![scen[0].clone()],
            vec![vec![1.0], vec![1.0]],
            vec![3, 4],
        )
        .unwrap();
        assert_eq!(
            pooled_var(&one, 0.95).unwrap(),
            value_at_risk(&scen[0], 0.95).unwrap()
        );
    }

    #[test]
    fn pooled_var_is_bracketed() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..200 {
            let m = random_model(&mut rng, 5, 3, 4);
            let rep = worst_best_var(&m, 0.95).unwrap();
            assert!(rep.bvar <= rep.var && rep.var <= rep.wvar, "{rep:?}");
        }
    }

    #[test]
    fn empirical_var_examples() {
        assert!((empirical_var(&[-0.01; 100], 0.95).unwrap() - 0.01).abs() < 1e-15);
        assert!(empirical_var(&[0.0; 19], 0.95).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 0.01).unwrap();
        let xs: Vec<f64> = (0..1_000_000).map(|_| normal.sample(&mut rng)).collect();
        assert!((empirical_var(&xs, 0.95).unwrap() - 0.016449).abs() < 0.0005);

        let ys: Vec<f64> = (0..500).map(|_| rng.random_range(-0.05..0.05)).collect();
        let mut last = f64::NEG_INFINITY;
        for k in 51..100 {
            let v = empirical_var(&ys, k as f64 / 100.0).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn empirical_var_interpolates() {
        let xs: Vec<f64> = (0..21).map(|i| i as f64).collect();
        // h = 20 * (1 - 0.95), one up to rounding: the second order statistic.
        assert!((empirical_var(&xs, 0.95).unwrap() + 1.0).abs() < 1e-12);
        // h = 20 * 0.1 = 2.
        assert!((empirical_var(&xs, 0.9).unwrap() + 2.0).abs() < 1e-12);
        // h = 20 * 0.075 = 1.5.
        assert!((empirical_var(&xs, 0.925).unwrap() + 1.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_query_selects_basis() {
        let m = TwoLayerMixture::new(
            vec![
                ScenarioComponent::gaussian(0.0, 0.01).unwrap(),
                ScenarioComponent::gaussian(0.0, 0.02).unwrap(),
            ],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![30, 30],
        )
        .unwrap();
        let returns: Vec<f64> = (0..60).map(|i| (i as f64 - 30.0) * 0.001).collect();
        let pooled = evaluate_query(&m, &returns, &RiskQuery::default()).unwrap();
        assert_eq!(pooled.var, pooled_var(&m, 0.95).unwrap());
        let seg = evaluate_query(
            &m,
            &returns,
            &RiskQuery {
                segment: SegmentSelector::Index(1),
                ..RiskQuery::default()
            },
        )
        .unwrap();
        assert_eq!(seg.var, segment_var(&m, 1, 0.95).unwrap());
        let emp = evaluate_query(
            &m,
            &returns,
            &RiskQuery {
                basis: RiskBasis::Empirical,
                ..RiskQuery::default()
            },
        )
        .unwrap();
        assert_eq!(emp.var, empirical_var(&returns, 0.95).unwrap());
        assert_eq!(emp.basis, RiskBasis::Empirical);
        let emp_seg = RiskQuery {
            basis: RiskBasis::Empirical,
            segment: SegmentSelector::Index(1),
            alpha: 0.95,
        };
        assert_eq!(
            evaluate_query(&m, &returns, &emp_seg).unwrap().var,
            empirical_var(&returns[30..], 0.95).unwrap()
        );
    }

    #[test]
    fn overestimation_examples() {
        let m = TwoLayerMixture::new(
            vec![
                ScenarioComponent::gaussian(0.0, 0.01).unwrap(),
                ScenarioComponent::gaussian(0.001, 0.02).unwrap(),
            ],
            vec![vec![0.5, 0.5]],
            vec![10],
        )
        .unwrap();
        let c = one_layer_overestimation_check(&m, 0, 0.95).unwrap();
        assert_eq!(c.two_layer_wvar, c.flattened_wvar);

        let m = TwoLayerMixture::new(
            vec![
                ScenarioComponent::new(vec![0.9, 0.1], vec![g(0.0, 0.005), g(0.0, 0.04)]).unwrap(),
                ScenarioComponent::new(vec![0.8, 0.2], vec![g(0.001, 0.008), g(-0.002, 0.03)])
                    .unwrap(),
            ],
            vec![vec![0.5, 0.5]],
            vec![10],
        )
        .unwrap();
        let c = one_layer_overestimation_check(&m, 0, 0.95).unwrap();
        assert!(c.flattened_wvar > c.two_layer_wvar);
        // Grid oracle: the worst single Gaussian is N(0, 0.04^2).
        assert!((c.flattened_wvar - Z95 * 0.04).abs() < 1e-9);
        assert!(one_layer_overestimation_check(&m, 1, 0.95).is_err());
    }

    #[test]
    fn overestimation_never_underestimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let m = random_model(&mut rng, 4, 3, 2);
            for t in 0..2 {
                let c = one_layer_overestimation_check(&m, t, 0.95).unwrap();
                assert!(c.flattened_wvar >= c.two_layer_wvar);
            }
        }
    }

    #[test]
    fn report_json_fields() {
        let m = TwoLayerMixture::new(
            vec![ScenarioComponent::gaussian(0.0, 0.01).unwrap()],
            vec![vec![1.0]],
            vec![10],
        )
        .unwrap();
        let rep = worst_best_var(&m, 0.95).unwrap();
        let v = serde_json::to_value(&rep).unwrap();
        for key in [
            "alpha",
            "var",
            "wvar",
            "bvar",
            "per_scenario_var",
            "worst_scenario",
            "best_scenario",
            "basis",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["basis"], "fitted_mixture");
    }
}
