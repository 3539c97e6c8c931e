use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fedra::check::run_checks;
use fedra::federation::MissingLayerStrategy;
use fedra::harness::{self, ExperimentConfig, Method, Overrides, Preset, RunOptions, OUT_DIR_ENV};
use fedra::theory::{lr_feasible_interval, theorem1_bound, BoundInputs};
use fedra::{Error, Result};

#[derive(Parser)]
#[command(name = "fedra", version, about = "Federated adapter tuning with random layer allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method under one seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run every configured method under every seed and tabulate.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Single-machine random-subset training for each subset size.
    SubsetConvergence {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the convergence bound for inputs in a TOML/JSON file or a run manifest.
    Bound {
        input: PathBuf,
        /// Override the learning rate.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Run the invariant suite.
    Check {
        /// Only run checks whose id starts with this prefix.
        #[arg(long, default_value = "")]
        filter: String,
    },
    /// Write the corpus, client partition and allocation sequence.
    Export {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Missing {
    Carry,
    Constrain,
}

impl From<Missing> for MissingLayerStrategy {
    fn from(m: Missing) -> Self {
        match m {
            Missing::Carry => MissingLayerStrategy::CarryForward,
            Missing::Constrain => MissingLayerStrategy::ConstrainAllocation,
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long, value_enum)]
    missing: Option<Missing>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, preset)?,
            None => ExperimentConfig::resolve(None, preset)?,
        };
        Overrides {
            seed: self.seed,
            method: self.method.as_deref().map(str::parse::<Method>).transpose()?,
            rounds: self.rounds,
            lora_rank: self.lora_rank,
            missing: self.missing.map(Into::into),
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_run(common: &Common, resume: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = common.resolve()?;
    let seed = cfg.seeds[0];
    let dir = harness::run_dir(&common.out, cfg.method, seed);
    let opts = RunOptions {
        checkpoint_dir: Some(dir.join("checkpoints")),
        resume,
    };
    let run = harness::run_experiment(&cfg, cfg.method, seed, &opts)?;
    let manifest = harness::emit_metrics(&dir, &run)?;
    let accs: Vec<String> = manifest
        .final_domain_accuracies
        .iter()
        .map(|a| format!("{:.2}", 100.0 * a))
        .collect();
    println!(
        "{} seed {seed}: average {:.2} [{}] -> {}",
        cfg.method,
        100.0 * manifest.average_accuracy,
        accs.join(", "),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(common: &Common, workers: usize) -> Result<ExitCode> {
    let cfg = common.resolve()?;
    let (_, table) = harness::run_sweep(&cfg, &common.out, workers)?;
    print!("{}", table.to_markdown());
    println!("-> {}", common.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_subset(common: &Common) -> Result<ExitCode> {
    let cfg = common.resolve()?;
    let trend = harness::subset_trend(&cfg, &cfg.seeds)?;
    let dir = common.out.join("subset-convergence");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("subset.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    harness::write_subset_csv(file, &trend.runs)?;
    for (k, m) in trend.sizes.iter().zip(&trend.medians) {
        println!("subset size {k}: median final accuracy {:.2}", 100.0 * m);
    }
    println!("converged: {}, non-decreasing: {}", trend.converged, trend.non_decreasing());
    println!("-> {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Accepts bare inputs (TOML or JSON) or a run manifest carrying `bound_inputs`.
fn read_bound_inputs(path: &Path) -> Result<BoundInputs> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(_) => {
            let t: toml::Value = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t)?
        }
    };
    let inner = match value.get("bound_inputs") {
        Some(serde_json::Value::Null) => {
            return Err(Error::Config(format!("{} has no bound inputs", path.display())))
        }
        Some(v) => v.clone(),
        None => value,
    };
    Ok(serde_json::from_value(inner)?)
}

fn cmd_bound(input: &Path, eta: Option<f64>) -> Result<ExitCode> {
    let mut inputs = read_bound_inputs(input)?;
    if let Some(e) = eta {
        inputs.eta = e;
    }
    match theorem1_bound(&inputs) {
        Ok(report) => {
            print_json(&serde_json::json!({ "inputs": inputs, "report": report }))?;
            Ok(ExitCode::SUCCESS)
        }
        // Inadmissible inputs still get the interval so the caller can pick eta.
        Err(e @ (Error::Precondition(_) | Error::Infeasible(_))) => {
            let interval = lr_feasible_interval(inputs.n, inputs.j, inputs.h, inputs.gamma_star).ok();
            print_json(&serde_json::json!({ "inputs": inputs, "interval": interval, "error": e.to_string() }))?;
            Ok(ExitCode::FAILURE)
        }
        Err(e) => Err(e),
    }
}

fn cmd_check(filter: &str) -> Result<ExitCode> {
    let outcomes = run_checks(filter);
    if outcomes.is_empty() {
        return Err(Error::Config(format!("no check matches {filter:?}")));
    }
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<38} {:>9.1} ms  {}", o.id, o.millis, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_export(common: &Common) -> Result<ExitCode> {
    let cfg = common.resolve()?;
    let seed = cfg.seeds[0];
    let dir = common.out.join("export").join(format!("seed-{seed}"));
    for path in harness::export(&cfg, seed, &dir)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, resume } => cmd_run(common, resume.clone()),
        Command::Sweep { common, workers } => cmd_sweep(common, *workers),
        Command::SubsetConvergence { common } => cmd_subset(common),
        Command::Bound { input, eta } => cmd_bound(input, *eta),
        Command::Check { filter } => cmd_check(filter),
        Command::Export { common } => cmd_export(common),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
