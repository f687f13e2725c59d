//! `edt` command line: dataset generation, training, evaluation and
//! ablation sweeps over one JSON run configuration.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig, Stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "edt", version, about = "Elastic decision transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an offline dataset (JSONL) from a behavior policy.
    GenData(Common),
    /// Train a model; writes checkpoint.edt and metrics.csv.
    Train(Common),
    /// Roll out a checkpoint; writes results.json and chosen-length logs.
    Eval(Common),
    /// Train and evaluate over a parameter sweep; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// NAME=V1,V2,... with NAME one of alpha, delta, fixed_w, elastic.
        #[arg(long)]
        sweep: Option<String>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of this stage (data, train or eval; the single shared seed for ablate).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force a constant history length.
    #[arg(long = "fixed-w")]
    fixed_w: Option<usize>,
    /// Stride of the history-length search.
    #[arg(long)]
    delta: Option<usize>,
    /// Expectile level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Inverse temperature of the expert-return reweighting.
    #[arg(long)]
    kappa: Option<f64>,
}

impl Common {
    fn overrides(&self, sweep: Option<String>) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            fixed_w: self.fixed_w,
            delta: self.delta,
            alpha: self.alpha,
            kappa: self.kappa,
            sweep,
        }
    }
}

/// Exit code for an error: configuration 1, I/O 2, numeric fault 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<edt_core::Error>() {
            return match e {
                edt_core::Error::Config(_) | edt_core::Error::Json(_) => EXIT_CONFIG,
                edt_core::Error::Io(_) | edt_core::Error::Checkpoint(_) => EXIT_IO,
                edt_core::Error::Numeric(_) | edt_core::Error::TrainingFault { .. } => EXIT_NUMERIC,
            };
        }
        if cause.is::<edt_core::ConfigError>() || cause.is::<serde_json::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<edt_core::NumericError>() {
            return EXIT_NUMERIC;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn load(common: &Common, stage: Stage, sweep: Option<String>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&common.overrides(sweep), stage)?;
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let s = commands::gen_data(&load(&c, Stage::GenData, None)?)?;
            println!(
                "wrote {}: {} episodes, {} transitions, return min {} max {} mean {}",
                s.path.display(),
                s.episodes,
                s.transitions,
                s.return_min,
                s.return_max,
                s.return_mean
            );
        }
        Command::Train(c) => {
            let s = commands::train(&load(&c, Stage::Train, None)?)?;
            println!("wrote {} and {} after {} steps", s.checkpoint.display(), s.metrics.display(), s.steps);
            match s.final_loss {
                Some(l) => println!(
                    "final loss: total {} l_return {} l_observation {} l_action {} l_max {}",
                    l.total, l.l_return, l.l_observation, l.l_action, l.l_max
                ),
                None => println!("no training steps run"),
            }
        }
        Command::Eval(c) => {
            let o = commands::eval(&load(&c, Stage::Eval, None)?)?;
            let r = &o.results;
            let w = r.w.map(|w| format!(" w={w}")).unwrap_or_default();
            let score = r.normalized_score.map(|s| format!("{s:.4}")).unwrap_or_else(|| "undefined".into());
            println!(
                "{}{w}: mean {:.4} std {:.4} over {} episodes, normalized score {score}",
                r.mode, r.mean, r.std, r.n_episodes
            );
            println!("wrote {}, {} and {}", o.results_path.display(), o.lengths_path.display(), o.histogram_path.display());
        }
        Command::Ablate { common, sweep } => {
            let o = commands::ablate(&load(&common, Stage::Ablate, sweep)?)?;
            println!("wrote {} ({} rows)", o.table.display(), o.rows.len());
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
