//! Verify the hand-derived backward pass against central finite
//! differences on a tiny model, parameter by parameter.

use tempolab::model::{
    forward, gradient, masked_ce_loss, Batch, LossTerm, ModelConfig, ParameterSet,
};
use tempolab::rng::stream;
use tempolab::trainer::make_masked_batch;
use tempolab::Result;

fn loss_of(params: &ParameterSet<f64>, batch: &Batch) -> Result<f64> {
    let logits = forward(params, batch)?;
    Ok(masked_ce_loss(&logits, batch)?.0)
}

fn main() -> Result<()> {
    let config = ModelConfig::tiny();
    let mut params = ParameterSet::<f64>::init(&config, 3)?;
    let seqs = vec!["MKTAYIAKQR".to_string(), "GGWWFYPPMM".to_string()];
    let batch = make_masked_batch(&seqs, &config, 0.3, &mut stream(3, "mask_demo", &[]))?;

    let terms = [LossTerm {
        weight: 1.0,
        batch: &batch,
    }];
    let (loss, grads) = gradient(&params, &terms)?;
    println!("loss {loss:.6}, checking {} parameters", params.total_count());

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let n = params.total_count();
    for i in (0..n).step_by(n / 50) {
        let orig = params.flat_get(i);
        params.flat_set(i, orig + eps);
        let up = loss_of(&params, &batch)?;
        params.flat_set(i, orig - eps);
        let down = loss_of(&params, &batch)?;
        params.flat_set(i, orig);
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.flat_get(i);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("worst relative error over sampled coordinates: {worst:.2e}");
    assert!(worst < 1e-4);
    println!("analytic gradient agrees with finite differences");
    Ok(())
}
