//! Run the pruning-based hyperparameter search for the replay weight on a
//! very small budget: 8 random candidates, 8 local refinements of the best,
//! then the top 4 re-scored at triple budget.

use tempolab::config::{BenchmarkSource, EvalSelection, ExperimentConfig};
use tempolab::methods::{MethodKind, MethodSpec};
use tempolab::model::ModelConfig;
use tempolab::runner::{hparam_search, SearchSpace};
use tempolab::synthgen::TimelineSpec;
use tempolab::trainer::{TaskRunConfig, WSDSchedule};
use tempolab::Result;

fn main() -> Result<()> {
    let mut run = TaskRunConfig::default();
    run.schedule = WSDSchedule {
        peak_lr: 1e-3,
        warmup_steps: 4,
        stable_until: 28,
        total_steps: 32,
        style: Default::default(),
    };
    run.batch_size = 8;
    let config = ExperimentConfig {
        benchmark: BenchmarkSource::Synthetic {
            spec: TimelineSpec {
                n_years: 2,
                additions_per_year: 20,
                noise_fraction: 0.25,
                cull_noise_prob: 0.5,
                cull_clean_prob: 0.05,
                n_validation: 10,
                first_year: 2020,
                seed: 23,
            },
        },
        model: ModelConfig::tiny(),
        run,
        methods: vec![MethodSpec::new(MethodKind::Replay)],
        eval: EvalSelection::default(),
        seed: 19,
        out_dir: std::env::temp_dir().join("tempolab_hparam_demo"),
        reset_optimizer_at_boundary: false,
    };

    let space = SearchSpace::default_for(MethodKind::Replay);
    println!("searching {:?}", space.dists.keys().collect::<Vec<_>>());
    let best = hparam_search(&config, &space)?;
    println!(
        "best replay weight: {:.4}",
        best.params.lambda_replay.expect("searched parameter set")
    );
    Ok(())
}
