//! Train a tiny model on one task with the warmup-stable-decay schedule
//! and print the loss trajectory, the pre-decay checkpoint, and the
//! validation report of the decayed weights.

use tempolab::eval::validation_perplexity;
use tempolab::methods::{MethodKind, MethodSpec};
use tempolab::model::ModelConfig;
use tempolab::rng::stream;
use tempolab::synthgen::MotifGrammar;
use tempolab::trainer::{
    train_task, Checkpoint, OrderedSource, TaskRunConfig, TaskSources, WSDSchedule,
};
use tempolab::Result;

fn main() -> Result<()> {
    let grammar = MotifGrammar::random(2, 10, 14, 0.7, 42)?;
    let mut rng = stream(42, "demo_data", &[]);
    let train_set: Vec<String> = (0..48).map(|_| grammar.sample(&mut rng)).collect();
    let valset: Vec<String> = (0..16).map(|_| grammar.sample(&mut rng)).collect();

    let config = ModelConfig::tiny();
    let mut run = TaskRunConfig::default();
    run.schedule = WSDSchedule {
        peak_lr: 1e-3,
        warmup_steps: 10,
        stable_until: 90,
        total_steps: 100,
        style: Default::default(),
    };
    run.batch_size = 16;

    let mut sources = TaskSources {
        current: OrderedSource::new(train_set, "current")?,
        replay: None,
        forget: None,
    };
    let method = MethodSpec::new(MethodKind::Sequential);
    let start = Checkpoint::fresh(&config, 7)?;
    let outcome = train_task(start, &mut sources, &method, &run)?;

    for row in outcome.log.iter().step_by(20) {
        println!("step {:>3} lr {:.2e} loss {:.4}", row.step, row.lr, row.loss);
    }
    println!(
        "pre-decay checkpoint at step {} (resumes from here next task)",
        outcome.pre_decay.step
    );
    let report = validation_perplexity(&outcome.decayed.params, &valset, run.mask_rate, run.eval_mask_seed)?;
    println!(
        "decayed weights: perplexity {:.3} recovery {:.3} over {} masked tokens",
        report.perplexity, report.recovery, report.n_masked_tokens
    );
    Ok(())
}
