//! Subcommand implementations behind the `molelab` binary.
//!
//! Exit codes are stable: 0 success, 1 check failure, 2 config/usage error,
//! 3 runtime divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::entropy::ProbDist;
use crate::error::{Error, Result};
use crate::metrics::{export_trace, fmt_f64, import_trace, strategy_mix, ExportFormat, RoundStat};
use crate::mole::MoleLayer;
use crate::numerics::RngState;
use crate::routing::{hybrid_route, RoutingConfig};
use crate::trainer::{
    ablate, generate_task, grad_check, run_experiment, GridAxis, StepRecord, TrainReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Entropy-routed mixture-of-LoRA-experts experiments.
#[derive(Debug, Parser)]
#[command(name = "molelab", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config file (TOML). Defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set routing.keep_top_k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.seed=SEED`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; beats the MOLELAB_OUT env var and `[output] dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides),
            None => ExperimentConfig::from_toml("", &overrides),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic task; writes report.json and trace.csv.
    Train(ConfigArgs),
    /// Route a probability vector through the hybrid rule and print the decision.
    Route(RouteArgs),
    /// Sweep ablation axes; writes one summary row per grid point.
    Ablate(AblateArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Convert a routing trace between CSV and JSON.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    /// Comma-separated probabilities, e.g. "0.9,0.05,0.03,0.02".
    pub distribution: String,
    /// Cumulative-probability threshold of Top-p.
    #[arg(long, default_value_t = 0.75)]
    pub top_p: f64,
    /// Minimum number of activated experts.
    #[arg(long, default_value_t = 2)]
    pub keep_top_k: usize,
    /// Normalized-entropy threshold for soft routing.
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    /// Entropic index.
    #[arg(long, default_value_t = 1.1)]
    pub q: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Grid axis, e.g. `--axis q=1.0,1.1,1.2`. Repeatable; combined with any
    /// `[axes]` table in the config file (flags win on name clashes).
    #[arg(long = "axis", value_name = "NAME=V1,V2,...")]
    pub axes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Input trace file (.csv or .json).
    #[arg(long)]
    pub input: PathBuf,
    /// Target format: csv or json.
    #[arg(long)]
    pub to: String,
    /// Output file path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse argv and run; returns the process exit code.
pub fn run_from_args() -> i32 {
    let cli = Cli::parse();
    run(cli)
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Route(args) => cmd_route(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Export(args) => cmd_export(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_CONFIG,
            }
        }
    }
}

/// On-disk schema of `report.json`: resolved config echo, per-step arrays,
/// per-round stats, entropy endpoints, and a reference to the trace file.
/// No timing fields: two runs with the same config and seed must produce
/// byte-identical bytes.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: serde_json::Value,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub rounds: Vec<RoundStat>,
    pub initial_entropy_mean: f64,
    pub final_entropy_mean: f64,
    pub trace_file: String,
}

fn write_report(report: &TrainReport, cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let trace_path = out_dir.join("trace.csv");
    export_trace(&report.trace, ExportFormat::Csv, &trace_path, None)?;
    let file = ReportFile {
        config: cfg.echo_json()?,
        seed: report.config.seed,
        steps: report.steps.clone(),
        rounds: report.rounds.clone(),
        initial_entropy_mean: report.initial_entropy_mean,
        final_entropy_mean: report.final_entropy_mean,
        trace_file: "trace.csv".to_string(),
    };
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    Ok(report_path)
}

pub fn cmd_train(args: &ConfigArgs) -> Result<i32> {
    let cfg = args.load()?;
    let out_dir = cfg.resolve_out_dir(args.out.as_deref());
    let spec = cfg.to_run_spec();
    let report = run_experiment(&spec)?;
    let report_path = write_report(&report, &cfg, &out_dir)?;

    let total_secs: f64 = report.wall_clock_per_step.iter().sum();
    let mix = strategy_mix(&report.trace)?;
    println!(
        "trained {} steps in {:.2}s ({:.3} ms/step)",
        report.steps.len(),
        total_secs,
        1e3 * total_secs / report.steps.len() as f64
    );
    println!(
        "router entropy (mean, normalized): {:.4} -> {:.4}",
        report.initial_entropy_mean, report.final_entropy_mean
    );
    println!(
        "final strategy mix: soft {:.1}%, top-p {:.1}%, top-k fallback {:.1}%",
        100.0 * mix.soft,
        100.0 * mix.top_p,
        100.0 * mix.top_k_fallback
    );
    println!("wrote {}", report_path.display());
    println!("wrote {}", out_dir.join("trace.csv").display());
    Ok(EXIT_OK)
}

pub fn cmd_route(args: &RouteArgs) -> Result<i32> {
    let values: Vec<f64> = args
        .distribution
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Usage(format!("bad probability '{s}': {e}")))
        })
        .collect::<Result<_>>()?;
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Usage(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Usage(format!(
            "probabilities sum to {sum}, expected 1 within 1e-6"
        )));
    }
    // Renormalize the accepted 1e-6 slack away before strict validation.
    let dist = ProbDist::new(values.iter().map(|v| v / sum).collect())?;
    let cfg = RoutingConfig {
        n_experts: dist.len(),
        top_p: args.top_p,
        keep_top_k: args.keep_top_k,
        entropy_threshold: args.threshold,
        entropic_index: crate::entropy::EntropicIndex::new(args.q)
            .map_err(|e| Error::Config(e.to_string()))?,
    };
    let decision = hybrid_route(&dist, &cfg)?;
    println!("strategy: {}", decision.strategy);
    println!("entropy_norm: {:.6}", decision.entropy_norm);
    let selected: Vec<String> = decision.selected.iter().map(|i| i.to_string()).collect();
    println!("selected: [{}]", selected.join(", "));
    let weights: Vec<String> = decision
        .selected
        .iter()
        .map(|&i| format!("{i}: {:.6}", decision.weights[i]))
        .collect();
    println!("weights: {{{}}}", weights.join(", "));
    Ok(EXIT_OK)
}

fn parse_axis_flag(flag: &str) -> Result<GridAxis> {
    let (name, values) = flag
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("axis '{flag}' is not NAME=V1,V2,...")))?;
    let values: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Usage(format!("axis '{name}': bad value '{v}': {e}")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Usage(format!("axis '{name}' has no values")));
    }
    Ok(GridAxis {
        name: name.trim().to_string(),
        values,
    })
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<i32> {
    let cfg = args.config.load()?;
    let out_dir = cfg.resolve_out_dir(args.config.out.as_deref());

    let mut axes = cfg.grid_axes();
    for flag in &args.axes {
        let axis = parse_axis_flag(flag)?;
        axes.retain(|a| a.name != axis.name);
        axes.push(axis);
    }

    let base = cfg.to_run_spec();
    let rows = ablate(&base, &axes)?;

    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    // Reproducibility contract: the resolved base config and the swept axes
    // accompany the summary table.
    let echo = serde_json::json!({
        "config": cfg.echo_json()?,
        "axes": axes,
    });
    let echo_path = out_dir.join("ablation_config.json");
    let echo_json = serde_json::to_string_pretty(&echo).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&echo_path, echo_json).map_err(|e| Error::io(&echo_path, e))?;

    let path = out_dir.join("ablation.csv");
    let mut out = String::new();
    let axis_names: Vec<&str> = axes.iter().map(|a| a.name.as_str()).collect();
    out.push_str(&axis_names.join(","));
    if !axis_names.is_empty() {
        out.push(',');
    }
    out.push_str(
        "final_total_loss,final_task_loss,final_entropy_mean,soft_frac,top_p_frac,top_k_fallback_frac\n",
    );
    for row in &rows {
        for (_, value) in &row.settings {
            out.push_str(&fmt_f64(*value));
            out.push(',');
        }
        let last = row.report.steps.last().expect("steps nonempty");
        let mix = strategy_mix(&row.report.trace)?;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(last.total_loss),
            fmt_f64(last.task_loss),
            fmt_f64(row.report.final_entropy_mean),
            fmt_f64(mix.soft),
            fmt_f64(mix.top_p),
            fmt_f64(mix.top_k_fallback)
        ));
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    println!("{} grid points -> {}", rows.len(), path.display());
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let cfg = args.config.load()?;
    let spec = cfg.to_run_spec();
    let data = generate_task(&spec.task)?;
    let mut rng = RngState::new(spec.train.seed);
    let layer = MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng)?;
    let batch_len = spec.train.batch_size.min(data.len());
    let report = grad_check(
        &layer,
        &data.samples[..batch_len],
        &spec.train.loss,
        args.eps,
    )?;

    println!(
        "checked {} parameter entries, max relative error {:.3e} at {}",
        report.checked, report.max_rel_err, report.worst_param
    );
    if report.skipped.is_empty() {
        println!("skipped (selection-boundary flips): none");
    } else {
        println!(
            "skipped (selection-boundary flips): {} [{}]",
            report.skipped.len(),
            report.skipped.join(", ")
        );
    }
    if report.max_rel_err < 1e-4 {
        println!("gradcheck PASS");
        Ok(EXIT_OK)
    } else {
        println!("gradcheck FAIL");
        Ok(EXIT_CHECK_FAILED)
    }
}

pub fn cmd_export(args: &ExportArgs) -> Result<i32> {
    let from = match args.input.extension().and_then(|e| e.to_str()) {
        Some("csv") => ExportFormat::Csv,
        Some("json") => ExportFormat::Json,
        other => {
            return Err(Error::Usage(format!(
                "cannot infer input format from extension {other:?}; use .csv or .json"
            )))
        }
    };
    let to: ExportFormat = args.to.parse()?;
    let trace = import_trace(from, &args.input)?;
    export_trace(&trace, to, &args.out, None)?;
    println!(
        "{} records: {} -> {}",
        trace.len(),
        args.input.display(),
        args.out.display()
    );
    Ok(EXIT_OK)
}
