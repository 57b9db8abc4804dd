//! Run three update rules over a two-year synthetic timeline with the
//! experiment runner, then aggregate the resulting metric table into
//! pairwise win rates.

use tempolab::config::{BenchmarkSource, EvalSelection, ExperimentConfig};
use tempolab::eval::{win_rate, MetricTable};
use tempolab::methods::{MethodKind, MethodSpec};
use tempolab::model::ModelConfig;
use tempolab::runner::run_experiment;
use tempolab::synthgen::TimelineSpec;
use tempolab::trainer::{TaskRunConfig, WSDSchedule};
use tempolab::Result;

fn main() -> Result<()> {
    let out_dir = tempfile::tempdir().map_err(tempolab::Error::Io)?;
    let mut run = TaskRunConfig::default();
    run.schedule = WSDSchedule {
        peak_lr: 1e-3,
        warmup_steps: 5,
        stable_until: 45,
        total_steps: 50,
        style: Default::default(),
    };
    run.batch_size = 8;
    let config = ExperimentConfig {
        benchmark: BenchmarkSource::Synthetic {
            spec: TimelineSpec {
                n_years: 2,
                additions_per_year: 24,
                noise_fraction: 0.25,
                cull_noise_prob: 0.5,
                cull_clean_prob: 0.05,
                n_validation: 12,
                first_year: 2020,
                seed: 31,
            },
        },
        model: ModelConfig::tiny(),
        run,
        methods: vec![
            MethodSpec::new(MethodKind::Sequential),
            MethodSpec::new(MethodKind::Replay),
            MethodSpec::new(MethodKind::HareTortoise),
        ],
        eval: EvalSelection::default(),
        seed: 17,
        out_dir: out_dir.path().to_path_buf(),
        reset_optimizer_at_boundary: false,
    };

    let manifest = run_experiment(&config)?;
    println!(
        "{} checkpoints written in {:.1}s",
        manifest.checkpoints.len(),
        manifest.wall_seconds
    );

    let table = MetricTable::read_csv(&out_dir.path().join("metrics.csv"))?;
    for ((method, year, task), value) in &table.entries {
        println!("  {method:<14} {year} {task:<11} {value:.4}");
    }
    let report = win_rate(&table)?;
    println!("overall win rates (ties count half):");
    for (method, rate) in &report.overall {
        println!("  {method:<14} {rate:.3}");
    }
    Ok(())
}
