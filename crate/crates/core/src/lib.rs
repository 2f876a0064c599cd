//! Regime-aware tail risk for daily price series.
//!
//! Log returns are split into regimes with a kernel change-point search, then
//! described by a two-layer Gaussian mixture fitted with EM. Each scenario of
//! the outer layer gives its own VaR; the largest is the worst-case VaR.

pub mod em;
pub mod error;
pub mod mixture;
pub mod pipeline;
pub mod risk;
pub mod segmentation;
pub mod series;
pub mod svg;

pub use em::{fit, FitConfig, FitResult};
pub use error::{Error, Result};
pub use mixture::{GaussianComponent, ScenarioComponent, TwoLayerMixture, UnivariateDistribution};
pub use pipeline::{run_pipeline, PipelineError, PipelineReport, RunConfig, Stage};
pub use risk::{mixture_quantile, worst_best_var, RiskReport};
pub use segmentation::{detect_changepoints, KernelSpec, Segmentation, SegmentationResult};
pub use series::{load_prices, to_log_returns, PriceSeries, ReturnSeries};
