//! Show that checkpoints capture training exactly: a run split in half
//! through a save/load round trip produces bit-identical weights to an
//! uninterrupted run.

use tempolab::methods::{MethodKind, MethodSpec};
use tempolab::model::ModelConfig;
use tempolab::rng::stream;
use tempolab::synthgen::MotifGrammar;
use tempolab::trainer::{
    advance, checkpoint_bytes, checkpoint_from_bytes, Checkpoint, OrderedSource, TaskRunConfig,
    TaskSources, WSDSchedule,
};
use tempolab::Result;

fn sources(seqs: &[String]) -> Result<TaskSources> {
    Ok(TaskSources {
        current: OrderedSource::new(seqs.to_vec(), "current")?,
        replay: None,
        forget: None,
    })
}

fn main() -> Result<()> {
    let grammar = MotifGrammar::random(2, 10, 14, 0.7, 42)?;
    let mut rng = stream(42, "demo_data", &[]);
    let seqs: Vec<String> = (0..24).map(|_| grammar.sample(&mut rng)).collect();

    let config = ModelConfig::tiny();
    let mut run = TaskRunConfig::default();
    run.schedule = WSDSchedule {
        peak_lr: 1e-3,
        warmup_steps: 4,
        stable_until: 36,
        total_steps: 40,
        style: Default::default(),
    };
    run.batch_size = 8;
    let method = MethodSpec::new(MethodKind::Sequential);

    // One uninterrupted run of 30 steps.
    let mut straight = Checkpoint::fresh(&config, 11)?;
    let mut log = Vec::new();
    advance(&mut straight, &mut sources(&seqs)?, &method, &run, 30, &mut log)?;

    // The same run split at step 15 through serialized bytes.
    let mut split = Checkpoint::fresh(&config, 11)?;
    advance(&mut split, &mut sources(&seqs)?, &method, &run, 15, &mut log)?;
    let bytes = checkpoint_bytes(&split);
    println!("checkpoint is {} bytes at step {}", bytes.len(), split.step);
    let mut resumed = checkpoint_from_bytes(&bytes)?;
    advance(&mut resumed, &mut sources(&seqs)?, &method, &run, 15, &mut log)?;

    let identical = (0..straight.params.total_count())
        .all(|i| straight.params.flat_get(i) == resumed.params.flat_get(i));
    println!(
        "straight run and split-resumed run bit-identical after 30 steps: {identical}"
    );
    assert!(identical);
    Ok(())
}
