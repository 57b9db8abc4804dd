//! File-level command line for the tempolab crate: corpus indexing and
//! diffing, synthetic benchmark generation, experiment runs, evaluation,
//! win-rate aggregation, sequence statistics, and hyperparameter search.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tempolab::config::ExperimentConfig;
use tempolab::methods::MethodKind;
use tempolab::runner::{
    cmd_diff, cmd_eval, cmd_filter, cmd_index, cmd_stats, cmd_synth, cmd_winrate, hparam_search,
    run_experiment, SearchSpace,
};
use tempolab::synthgen::TimelineSpec;
use tempolab::{Error, Result};

#[derive(Parser)]
#[command(name = "tempolab", version, about = "temporal continual-pretraining laboratory")]
struct Cli {
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct YearsArg {
    /// Year pair as A..B (earlier..later).
    #[arg(long)]
    years: String,
}

impl YearsArg {
    fn parse(&self) -> Result<(i32, i32)> {
        let (a, b) = self
            .years
            .split_once("..")
            .ok_or_else(|| Error::Argument(format!("--years must be A..B, got '{}'", self.years)))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<i32>()
                .map_err(|_| Error::Argument(format!("bad year '{s}' in --years")))
        };
        Ok((parse(a)?, parse(b)?))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the temporal presence index over yearly release manifests.
    Index {
        /// Snapshot manifest files, oldest first.
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Sequences added and removed between two indexed years.
    Diff {
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        years: YearsArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Write the intersection of two years as a JSONL release.
    Filter {
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        years: YearsArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Generate a synthetic benchmark from a timeline spec (JSON file).
    Synth {
        /// Path to a JSON timeline spec.
        #[arg(long)]
        config: PathBuf,
        /// Override the spec's generation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the configured methods over the task sequence.
    Train {
        /// Path to a JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint against the configured benchmark.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file produced by `train`.
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Aggregate a metrics table into pairwise win rates.
    Winrate {
        /// metrics.csv produced by `train`.
        metrics: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Per-sequence statistics per release; QQ table for exactly two.
    Stats {
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Hyperparameter search for one method's tunable weights.
    Hparam {
        #[arg(long)]
        config: PathBuf,
        /// Method to tune (e.g. replay, shrink_perturb, hare_tortoise).
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
}

fn parse_method_kind(name: &str) -> Result<MethodKind> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| Error::Argument(format!("unknown method '{name}'")))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Argument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Index { manifests, out } => cmd_index(&manifests, &out.out),
        Command::Diff {
            manifests,
            years,
            out,
        } => {
            let (y1, y2) = years.parse()?;
            cmd_diff(&manifests, y1, y2, &out.out)
        }
        Command::Filter {
            manifests,
            years,
            out,
        } => {
            let (y1, y2) = years.parse()?;
            cmd_filter(&manifests, y1, y2, &out.out)
        }
        Command::Synth { config, seed, out } => {
            let text = std::fs::read_to_string(&config)?;
            let mut spec: TimelineSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{config:?}: {e}")))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            spec.validate()?;
            cmd_synth(&spec, &out.out)
        }
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            let manifest = run_experiment(&cfg)?;
            println!(
                "run complete: {} checkpoints, {:.1}s",
                manifest.checkpoints.len(),
                manifest.wall_seconds
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            cmd_eval(&cfg, &checkpoint, &out.out)
        }
        Command::Winrate { metrics, out } => cmd_winrate(&metrics, &out.out),
        Command::Stats { manifests, out } => cmd_stats(&manifests, &out.out),
        Command::Hparam {
            config,
            method,
            seed,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let kind = parse_method_kind(&method)?;
            let space = SearchSpace::default_for(kind);
            let best = hparam_search(&cfg, &space)?;
            std::fs::create_dir_all(&out.out)?;
            std::fs::write(
                out.out.join("best_hparams.json"),
                serde_json::to_string_pretty(&best)?,
            )?;
            println!("best {} parameters written", best.kind.name());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
