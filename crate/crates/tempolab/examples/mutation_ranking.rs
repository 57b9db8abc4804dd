//! Score mutation-effect variants with masked marginals and compare the
//! ranking of a briefly trained model against the grammar's exact fitness
//! using Spearman rank correlation.

use tempolab::eval::{score_mutations, spearman};
use tempolab::methods::{MethodKind, MethodSpec};
use tempolab::model::ModelConfig;
use tempolab::rng::stream;
use tempolab::synthgen::{generate_dms_assay, MotifGrammar};
use tempolab::trainer::{
    train_task, Checkpoint, OrderedSource, TaskRunConfig, TaskSources, WSDSchedule,
};
use tempolab::Result;

fn main() -> Result<()> {
    let grammar = MotifGrammar::random(2, 10, 14, 0.8, 42)?;
    let mut rng = stream(42, "demo_data", &[]);
    let train_set: Vec<String> = (0..64).map(|_| grammar.sample(&mut rng)).collect();
    let assay = generate_dms_assay(&grammar, &mut stream(42, "assay", &[0]), 16, "demo")?;
    let fitness: Vec<f64> = assay.variants.iter().map(|v| v.fitness).collect();

    let config = ModelConfig::tiny();
    let untrained = Checkpoint::fresh(&config, 7)?;
    let before = score_mutations(&untrained.params, &assay)?;
    println!(
        "untrained spearman rho: {:?}",
        spearman(&before, &fitness)?
    );

    let mut run = TaskRunConfig::default();
    run.schedule = WSDSchedule {
        peak_lr: 2e-3,
        warmup_steps: 20,
        stable_until: 360,
        total_steps: 400,
        style: Default::default(),
    };
    run.batch_size = 16;
    let mut sources = TaskSources {
        current: OrderedSource::new(train_set, "current")?,
        replay: None,
        forget: None,
    };
    let outcome = train_task(
        untrained,
        &mut sources,
        &MethodSpec::new(MethodKind::Sequential),
        &run,
    )?;
    let after = score_mutations(&outcome.decayed.params, &assay)?;
    println!("trained spearman rho:   {:?}", spearman(&after, &fitness)?);
    Ok(())
}
