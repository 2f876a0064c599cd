use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use wvar::em::fit;
use wvar::error::Error;
use wvar::pipeline::{
    execute, load_model, load_returns, segment_returns, simulate, write_artifacts, ConfigFile,
    EmitFlags, PipelineError, RunConfig, Stage,
};
use wvar::risk::{evaluate_query, RiskBasis, RiskQuery, SegmentSelector};

#[derive(Parser)]
#[command(
    name = "wvar",
    version,
    about = "Regime-aware worst-case VaR for daily price series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect change points in the log returns and print them as JSON.
    Segment(RunArgs),
    /// Segment, fit the two-layer mixture and print the fitted model as JSON.
    Fit(RunArgs),
    /// Compute VaR, WVaR and BVaR from a saved model.
    Risk(RiskArgs),
    /// Run the full pipeline and write the report, segments and figure.
    Run(RunArgs),
    /// Sample a synthetic price path from a saved model.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Price CSV with `date` and `close` columns.
    #[arg(long)]
    input: Option<PathBuf>,
    /// TOML file with any of the run settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// RBF bandwidth; omitted means the median heuristic.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "min-seg-len")]
    min_seg_len: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long = "max-iters")]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Comma-separated subset of json,csv,svg.
    #[arg(long)]
    emit: Option<String>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, PipelineError> {
        let at_config = |source| PipelineError {
            stage: Stage::Config,
            source,
        };
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply(ConfigFile::load(path).map_err(at_config)?)
                .map_err(at_config)?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(input => input, penalty => penalty_weight, k2 => k2, k1 => k1, alpha => alpha,
            min_seg_len => min_segment_length, restarts => restarts, max_iters => max_iters,
            tol => rel_tol, seed => seed);
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        if self.out_dir.is_some() {
            cfg.out_dir = self.out_dir;
        }
        if let Some(list) = &self.emit {
            cfg.emit = EmitFlags::parse(list).map_err(at_config)?;
        }
        if cfg.input.as_os_str().is_empty() {
            return Err(at_config(Error::InvalidParameter(
                "no input file given (--input or config `input`)".into(),
            )));
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RiskArgs {
    /// Model JSON written by `fit` or found under `model` in a run report.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
    /// Report the VaR of one segment instead of the pooled VaR.
    #[arg(long)]
    segment: Option<usize>,
    /// Price CSV for the empirical basis.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_parser = ["fitted_mixture", "empirical"], default_value = "fitted_mixture")]
    basis: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated observations per segment; defaults to the model's lengths.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SegmentOutput {
    breakpoints: Vec<usize>,
    breakpoint_dates: Vec<String>,
    gamma: f64,
    total_cost: f64,
    penalized_objective: f64,
}

fn print_json<T: Serialize>(value: &T, stage: Stage) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError {
        stage,
        source: e.into(),
    })?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Segment(args) => {
            let cfg = args.resolve()?;
            let (_, returns) = load_returns(&cfg)?;
            let (res, kernel) = segment_returns(returns.values(), &cfg)?;
            let bps = res.segmentation.breakpoints().to_vec();
            let out = SegmentOutput {
                breakpoint_dates: bps
                    .iter()
                    .map(|&t| returns.dates()[t].to_string())
                    .collect(),
                breakpoints: bps,
                gamma: kernel.gamma(),
                total_cost: res.total_cost,
                penalized_objective: res.penalized_objective,
            };
            print_json(&out, Stage::Segment)
        }
        Command::Fit(args) => {
            let cfg = args.resolve()?;
            let fit_cfg = cfg.fit_config();
            let (_, returns) = load_returns(&cfg)?;
            let (res, _) = segment_returns(returns.values(), &cfg)?;
            let fitted = fit(returns.values(), &res.segmentation, &fit_cfg).map_err(|source| {
                PipelineError {
                    stage: Stage::Fit,
                    source,
                }
            })?;
            print_json(&fitted, Stage::Fit)
        }
        Command::Risk(args) => {
            let at_risk = |source| PipelineError {
                stage: Stage::Risk,
                source,
            };
            let model = load_model(&args.model).map_err(|source| PipelineError {
                stage: Stage::Load,
                source,
            })?;
            let basis = if args.basis == "empirical" {
                RiskBasis::Empirical
            } else {
                RiskBasis::FittedMixture
            };
            let returns = match &args.input {
                Some(path) => {
                    let cfg = RunConfig {
                        input: path.clone(),
                        ..RunConfig::default()
                    };
                    load_returns(&cfg)?.1.values().to_vec()
                }
                None if basis == RiskBasis::Empirical => {
                    return Err(at_risk(Error::InvalidParameter(
                        "the empirical basis needs --input".into(),
                    )));
                }
                None => Vec::new(),
            };
            let query = RiskQuery {
                alpha: args.alpha,
                segment: args
                    .segment
                    .map_or(SegmentSelector::Pooled, SegmentSelector::Index),
                basis,
            };
            let report = evaluate_query(&model, &returns, &query).map_err(at_risk)?;
            print_json(&report, Stage::Risk)
        }
        Command::Run(args) => {
            let mut cfg = args.resolve()?;
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(PathBuf::from("."));
            }
            let run = execute(&cfg)?;
            write_artifacts(&cfg, &run)?;
            let r = &run.report.risk;
            println!(
                "breakpoints: {}  VaR: {:.6}  WVaR: {:.6}  BVaR: {:.6}",
                run.report.segmentation.breakpoint_count, r.var, r.wvar, r.bvar
            );
            Ok(())
        }
        Command::Simulate(args) => {
            let prices = simulate(&args.model, args.counts.as_deref(), args.seed, &args.out)?;
            eprintln!("wrote {} prices to {}", prices.len(), args.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
