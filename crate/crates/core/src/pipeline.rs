//! End-to-end run: load prices, take log returns, segment, fit, report risk.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::{fit, FitConfig, FitResult};
use crate::error::Error;
use crate::mixture::TwoLayerMixture;
use crate::risk::{empirical_var, worst_best_var, RiskReport, MIN_EMPIRICAL_OBSERVATIONS};
use crate::segmentation::{
    detect_changepoints, median_heuristic_bandwidth, KernelSpec, Segmentation, SegmentationResult,
    DEFAULT_BANDWIDTH_SAMPLE, DEFAULT_MIN_SEGMENT_LENGTH, DEFAULT_PENALTY,
};
use crate::series::{
    load_prices, prices_from_returns, to_log_returns, CsvSchema, PriceSeries, ReturnSeries,
};
use crate::svg::emit_svg;

pub const REPORT_FILE: &str = "report.json";
pub const SEGMENTS_FILE: &str = "segments.csv";
pub const FIGURE_FILE: &str = "figure.svg";
pub const SIMULATION_START_PRICE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Load,
    Segment,
    Fit,
    Risk,
    Emit,
    Simulate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Segment => "segmentation",
            Stage::Fit => "fit",
            Stage::Risk => "risk",
            Stage::Emit => "emit",
            Stage::Simulate => "simulate",
        };
        f.write_str(name)
    }
}

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T, Error> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

/// Which artifacts to write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitFlags {
    pub json: bool,
    pub csv: bool,
    pub svg: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        Self {
            json: true,
            csv: true,
            svg: true,
        }
    }
}

impl EmitFlags {
    pub fn none() -> Self {
        Self {
            json: false,
            csv: false,
            svg: false,
        }
    }

    /// Parses a comma-separated list such as `json,svg`.
    pub fn parse(list: &str) -> Result<Self, Error> {
        let mut flags = Self::none();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "json" => flags.json = true,
                "csv" => flags.csv = true,
                "svg" => flags.svg = true,
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown emit target `{other}`"
                    )));
                }
            }
        }
        Ok(flags)
    }
}

/// Full pipeline configuration. Defaults are penalty 2.5, five scenarios of
/// three Gaussians each, and 95% confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub penalty_weight: f64,
    pub k2: usize,
    pub k1: usize,
    pub alpha: f64,
    /// RBF bandwidth; `None` selects the median heuristic.
    pub gamma: Option<f64>,
    pub min_segment_length: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub variance_floor_factor: f64,
    pub out_dir: Option<PathBuf>,
    pub emit: EmitFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        Self {
            input: PathBuf::new(),
            penalty_weight: DEFAULT_PENALTY,
            k2: fit.k2,
            k1: fit.k1,
            alpha: 0.95,
            gamma: None,
            min_segment_length: DEFAULT_MIN_SEGMENT_LENGTH,
            max_iters: fit.max_iters,
            rel_tol: fit.rel_tol,
            restarts: fit.restarts,
            seed: fit.seed,
            variance_floor_factor: fit.variance_floor_factor,
            out_dir: None,
            emit: EmitFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            k2: self.k2,
            k1: self.k1,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            restarts: self.restarts,
            seed: self.seed,
            variance_floor_factor: self.variance_floor_factor,
        }
    }

    /// Overlays every key present in `file` onto `self`.
    pub fn apply(&mut self, file: ConfigFile) -> Result<(), Error> {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = file.$field { self.$field = v; })*
            };
        }
        take!(
            input,
            penalty_weight,
            k2,
            k1,
            alpha,
            min_segment_length,
            max_iters,
            rel_tol,
            restarts,
            seed,
            variance_floor_factor
        );
        if file.gamma.is_some() {
            self.gamma = file.gamma;
        }
        if file.out_dir.is_some() {
            self.out_dir = file.out_dir;
        }
        if let Some(list) = file.emit {
            self.emit = EmitFlags::parse(&list)?;
        }
        Ok(())
    }
}

/// Flat key/value configuration file (TOML) using [`RunConfig`] field names.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub input: Option<PathBuf>,
    pub penalty_weight: Option<f64>,
    pub k2: Option<usize>,
    pub k1: Option<usize>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub min_segment_length: Option<usize>,
    pub max_iters: Option<usize>,
    pub rel_tol: Option<f64>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub variance_floor_factor: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub emit: Option<String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub breakpoint_count: usize,
    pub breakpoints: Vec<usize>,
    /// Date of the first return in each new segment.
    pub breakpoint_dates: Vec<String>,
    pub gamma: f64,
    pub total_cost: f64,
    pub penalized_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Historical VaR of the raw returns, when there are enough of them.
    pub empirical_var: Option<f64>,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: RunConfig,
    pub seed: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub segmentation: SegmentationSummary,
    pub fit: FitSummary,
    pub risk: RiskReport,
    pub model: TwoLayerMixture,
    pub diagnostics: Diagnostics,
    pub provenance: Provenance,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String, Error> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Everything the stages produced, for callers that need more than the report.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub prices: PriceSeries,
    pub returns: ReturnSeries,
    pub segmentation: SegmentationResult,
    pub kernel: KernelSpec,
    pub fit: FitResult,
    pub report: PipelineReport,
}

/// Loads prices and converts them to log returns.
pub fn load_returns(cfg: &RunConfig) -> Result<(PriceSeries, ReturnSeries), PipelineError> {
    let prices = load_prices(&cfg.input, &CsvSchema::default()).at(Stage::Load)?;
    let returns = to_log_returns(&prices);
    Ok((prices, returns))
}

/// Runs change-point detection with the configured or median-heuristic bandwidth.
pub fn segment_returns(
    returns: &[f64],
    cfg: &RunConfig,
) -> Result<(SegmentationResult, KernelSpec), PipelineError> {
    let degenerate = returns.windows(2).all(|w| w[0] == w[1]);
    if degenerate {
        return Err(Error::Degenerate(
            "every return is identical; no risk can be estimated".into(),
        ))
        .at(Stage::Segment);
    }
    let kernel = match cfg.gamma {
        Some(g) => KernelSpec::new(g),
        None => median_heuristic_bandwidth(returns, DEFAULT_BANDWIDTH_SAMPLE, cfg.seed),
    }
    .at(Stage::Segment)?;
    let result = detect_changepoints(returns, cfg.penalty_weight, kernel, cfg.min_segment_length)
        .at(Stage::Segment)?;
    Ok((result, kernel))
}

/// Runs every stage and assembles the report without writing anything.
pub fn execute(cfg: &RunConfig) -> Result<PipelineRun, PipelineError> {
    let fit_cfg = cfg.fit_config();
    fit_cfg.validate().at(Stage::Config)?;
    if !(cfg.alpha > 0.5 && cfg.alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0.5, 1), got {}",
            cfg.alpha
        )))
        .at(Stage::Config);
    }

    let (prices, returns) = load_returns(cfg)?;
    let (segmentation, kernel) = segment_returns(returns.values(), cfg)?;
    let fitted = fit(returns.values(), &segmentation.segmentation, &fit_cfg).at(Stage::Fit)?;
    let risk = worst_best_var(&fitted.model, cfg.alpha).at(Stage::Risk)?;
    let empirical = if returns.len() >= MIN_EMPIRICAL_OBSERVATIONS {
        Some(empirical_var(returns.values(), cfg.alpha).at(Stage::Risk)?)
    } else {
        None
    };

    let seg = &segmentation.segmentation;
    let report = PipelineReport {
        segmentation: SegmentationSummary {
            breakpoint_count: seg.breakpoints().len(),
            breakpoints: seg.breakpoints().to_vec(),
            breakpoint_dates: seg
                .breakpoints()
                .iter()
                .map(|&t| returns.dates()[t].to_string())
                .collect(),
            gamma: kernel.gamma(),
            total_cost: segmentation.total_cost,
            penalized_objective: segmentation.penalized_objective,
        },
        fit: FitSummary {
            log_likelihood: fitted.log_likelihood,
            iterations: fitted.iterations,
            converged: fitted.converged,
            restart_index: fitted.restart_index,
        },
        risk,
        model: fitted.model.clone(),
        diagnostics: Diagnostics {
            empirical_var: empirical,
            observations: returns.len(),
        },
        provenance: Provenance {
            config: cfg.clone(),
            seed: cfg.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    Ok(PipelineRun {
        prices,
        returns,
        segmentation,
        kernel,
        fit: fitted,
        report,
    })
}

/// Writes `segments.csv`: one row per segment with index range and dates.
pub fn write_segments_csv(
    path: &Path,
    returns: &ReturnSeries,
    seg: &Segmentation,
) -> Result<(), Error> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "segment",
        "start_index",
        "end_index",
        "start_date",
        "end_date",
        "length",
    ])?;
    for (k, range) in seg.segments().enumerate() {
        w.write_record([
            k.to_string(),
            range.start.to_string(),
            range.end.to_string(),
            returns.dates()[range.start].to_string(),
            returns.dates()[range.end - 1].to_string(),
            range.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the artifacts selected in `cfg.emit` into `cfg.out_dir`.
pub fn write_artifacts(cfg: &RunConfig, run: &PipelineRun) -> Result<(), PipelineError> {
    let Some(dir) = &cfg.out_dir else {
        return Ok(());
    };
    fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .at(Stage::Emit)?;
    if cfg.emit.json {
        let path = dir.join(REPORT_FILE);
        let text = run.report.to_json().at(Stage::Emit)?;
        fs::write(&path, text)
            .map_err(|e| Error::io(&path, e))
            .at(Stage::Emit)?;
    }
    if cfg.emit.csv {
        write_segments_csv(
            &dir.join(SEGMENTS_FILE),
            &run.returns,
            &run.segmentation.segmentation,
        )
        .at(Stage::Emit)?;
    }
    if cfg.emit.svg {
        emit_svg(
            &run.prices,
            &run.returns,
            &run.segmentation.segmentation,
            &run.report.risk,
            dir.join(FIGURE_FILE),
        )
        .at(Stage::Emit)?;
    }
    Ok(())
}

/// Runs the full pipeline and writes the requested artifacts.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport, PipelineError> {
    let run = execute(cfg)?;
    write_artifacts(cfg, &run)?;
    Ok(run.report)
}

/// Consecutive weekdays starting at `start` (rolled forward off a weekend).
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

/// Samples returns from a model and integrates them into a price path that
/// starts at 100 on 2000-01-03.
///
/// `counts` defaults to the model's own segment lengths.
pub fn simulate_prices(
    model: &TwoLayerMixture,
    counts: Option<&[usize]>,
    seed: u64,
) -> Result<PriceSeries, Error> {
    let counts = counts.unwrap_or(model.segment_lengths());
    let returns = model.sample(seed, counts)?;
    let prices = prices_from_returns(SIMULATION_START_PRICE, &returns);
    let start = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    let dates = business_days(start, prices.len());
    PriceSeries::new(dates.into_iter().zip(prices).collect())
}

/// Reads a model document, a fit result, or a run report holding a `model`.
pub fn load_model(path: &Path) -> Result<TwoLayerMixture, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match TwoLayerMixture::from_json(&text) {
        Ok(m) => Ok(m),
        Err(first) => {
            let value: serde_json::Value = serde_json::from_str(&text)?;
            match value.get("model") {
                Some(inner) => Ok(TwoLayerMixture::deserialize(inner)?),
                None => Err(first),
            }
        }
    }
}

/// Reads a model with [`load_model`], simulates prices, writes them as CSV.
pub fn simulate(
    model_path: &Path,
    counts: Option<&[usize]>,
    seed: u64,
    out: &Path,
) -> Result<PriceSeries, PipelineError> {
    let model = load_model(model_path).at(Stage::Simulate)?;
    let prices = simulate_prices(&model, counts, seed).at(Stage::Simulate)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(parent, e))
            .at(Stage::Emit)?;
    }
    let file = fs::File::create(out)
        .map_err(|e| Error::io(out, e))
        .at(Stage::Emit)?;
    prices.write_csv(file).at(Stage::Emit)?;
    Ok(prices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_documented_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.penalty_weight, 2.5);
        assert_eq!((cfg.k2, cfg.k1), (5, 3));
        assert_eq!(cfg.alpha, 0.95);
        assert_eq!(cfg.min_segment_length, 2);
        assert_eq!(cfg.gamma, None);
    }

    #[test]
    fn emit_flags_parse() {
        assert_eq!(
            EmitFlags::parse("json,svg").unwrap(),
            EmitFlags {
                json: true,
                csv: false,
                svg: true
            }
        );
        assert_eq!(EmitFlags::parse("").unwrap(), EmitFlags::none());
        assert!(EmitFlags::parse("json,pdf").is_err());
    }

    #[test]
    fn config_file_overlays_defaults() {
        let file =
            ConfigFile::parse("k2 = 2\nalpha = 0.99\ngamma = 40.0\nemit = \"json\"\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply(file).unwrap();
        assert_eq!(cfg.k2, 2);
        assert_eq!(cfg.k1, 3);
        assert_eq!(cfg.alpha, 0.99);
        assert_eq!(cfg.gamma, Some(40.0));
        assert_eq!(
            cfg.emit,
            EmitFlags {
                json: true,
                csv: false,
                svg: false
            }
        );
        assert!(ConfigFile::parse("unknown_key = 1\n").is_err());
    }

    #[test]
    fn business_days_skip_weekends() {
        let start = NaiveDate::from_ymd_opt(2000, 1, 7).unwrap(); // Friday
        let days = business_days(start, 3);
        assert_eq!(days[1], NaiveDate::from_ymd_opt(2000, 1, 10).unwrap());
        assert_eq!(days.len(), 3);
    }

    #[test]
    fn stage_names_in_errors() {
        let err = PipelineError {
            stage: Stage::Segment,
            source: Error::Degenerate("x".into()),
        };
        assert!(err.to_string().starts_with("segmentation stage failed"));
    }
}
