//! Command-line front end.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ecoprune_core::compactor::count_params;
use ecoprune_core::denoiser::Denoiser;
use ecoprune_core::gates::{GateLayout, ThresholdMode};

use crate::archive;
use crate::config::RunConfig;
use crate::experiments::{self as ex, Seeds};

pub const BASE_ARCHIVE: &str = "base.ecod";
pub const LAMBDA_ARCHIVE: &str = "lambda.ecod";
pub const PRUNED_ARCHIVE: &str = "pruned.ecod";

#[derive(Debug, Parser)]
#[command(name = "ecoprune", about = "Structural pruning of a toy diffusion denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `[run] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `[run] out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Global,
    Local,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base denoiser; writes base.ecod and train_loss.csv.
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Learn mask control variables; writes lambda.ecod and prune_report.csv.
    LearnMask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Threshold lambda and excise pruned units; writes pruned.ecod.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sparsity: f64,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<PathBuf>,
    },
    /// Sample final latents; writes samples.csv.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Model archive, the base model by default.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare a pruned model with the base; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        pruned: Option<PathBuf>,
    },
    /// Gradient memory and runtime for both engines; writes profile.csv.
    Profile {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo mean gate against lambda; writes gate_curve.csv.
    GateCurve {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::TrainBase { common }
            | Self::LearnMask { common, .. }
            | Self::Prune { common, .. }
            | Self::Sample { common, .. }
            | Self::Eval { common, .. }
            | Self::Profile { common }
            | Self::GateCurve { common } => common,
        }
    }
}

/// Loads the configuration with command-line overrides applied.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.clone();
    }
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Denoiser<f64>> {
    archive::load_model(path, cfg.model.seq_len, cfg.model.steps).with_context(|| format!("loading {}", path.display()))
}

fn or_default(path: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| cfg.run.out_dir.join(name))
}

/// Runs one command and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = load_config(cli.command.common())?;
    let out = cfg.run.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, table: crate::report::Table| -> Result<()> {
        let p = out.join(name);
        table.write(&p).with_context(|| format!("writing {}", p.display()))?;
        written.push(p);
        Ok(())
    };
    match &cli.command {
        Command::TrainBase { .. } => {
            let (model, losses) = ex::train_base(&cfg)?;
            archive::save_model(&out.join(BASE_ARCHIVE), &model)?;
            emit("train_loss.csv", ex::train_loss_table(&losses))?;
            if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
                log::info!("base loss {a:.4} -> {b:.4} over {} steps", losses.len());
            }
            written.push(out.join(BASE_ARCHIVE));
        }
        Command::LearnMask { base, .. } => {
            let model = load_model(&cfg, &or_default(base, &cfg, BASE_ARCHIVE))?;
            let (params, report) = ex::learn_mask(&cfg, &model)?;
            archive::save(&out.join(LAMBDA_ARCHIVE), [("lambda", &params.lambda)])?;
            emit("prune_report.csv", ex::prune_report_table(&report, cfg.run.timing))?;
            written.push(out.join(LAMBDA_ARCHIVE));
        }
        Command::Prune {
            sparsity,
            mode,
            base,
            lambda,
            ..
        } => {
            let model = load_model(&cfg, &or_default(base, &cfg, BASE_ARCHIVE))?;
            let lambda_path = or_default(lambda, &cfg, LAMBDA_ARCHIVE);
            let lambda = archive::load(&lambda_path)?
                .remove("lambda")
                .with_context(|| format!("{} has no `lambda` tensor", lambda_path.display()))?;
            let mode = match mode {
                Mode::Global => ThresholdMode::Global,
                Mode::Local => ThresholdMode::Local,
            };
            if lambda.numel() != GateLayout::for_model(&model).total() {
                anyhow::bail!("lambda has {} entries but the model has {} gated units", lambda.numel(), GateLayout::for_model(&model).total());
            }
            let (pruned, mask) = ex::prune(&model, &lambda, *sparsity, mode)?;
            log::info!(
                "sparsity {:.3}: params {} -> {}",
                mask.achieved_sparsity(),
                count_params(&model),
                count_params(&pruned)
            );
            archive::save_model(&out.join(PRUNED_ARCHIVE), &pruned)?;
            written.push(out.join(PRUNED_ARCHIVE));
        }
        Command::Sample { model, .. } => {
            let m = load_model(&cfg, &or_default(model, &cfg, BASE_ARCHIVE))?;
            let seed = Seeds::from_run(cfg.run.seed).eval;
            emit("samples.csv", ex::sample_table(&cfg, &m, &cfg.eval_conditions(), cfg.run.n_samples, seed)?)?;
        }
        Command::Eval { base, pruned, .. } => {
            let b = load_model(&cfg, &or_default(base, &cfg, BASE_ARCHIVE))?;
            let p = load_model(&cfg, &or_default(pruned, &cfg, PRUNED_ARCHIVE))?;
            let seed = Seeds::from_run(cfg.run.seed).eval;
            let rows = ex::evaluate(&b, &p, cfg.model.steps, &cfg.eval_conditions(), cfg.run.n_samples, seed)?;
            emit("eval.csv", ex::eval_table(&rows))?;
        }
        Command::Profile { .. } => {
            let rows = ex::profile(&cfg, &cfg.run.profile_steps, cfg.run.profile_repeats)?;
            emit("profile.csv", ex::profile_table(&rows, cfg.run.timing))?;
        }
        Command::GateCurve { .. } => {
            let seed = Seeds::from_run(cfg.run.seed).gates;
            let rows = ex::gate_curve(&cfg.gates, &cfg.run.gate_curve_deltas, cfg.run.gate_curve_draws, seed);
            emit("gate_curve.csv", ex::gate_curve_table(&rows))?;
        }
    }
    Ok(written)
}

/// Worker threads from `ECOPRUNE_THREADS`, 1 when unset.
pub fn thread_count() -> Result<usize> {
    match std::env::var("ECOPRUNE_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("ECOPRUNE_THREADS={v}"))?;
            anyhow::ensure!(n >= 1, "ECOPRUNE_THREADS must be at least 1");
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

pub fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = thread_count().and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
        pool.install(|| run(&cli))
    });
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::from(1)
        }
    }
}
