//! End-to-end acceptance checks. Each test exercises one guarantee of the
//! laboratory and prints a single pass/fail line; run with `--nocapture`
//! to see them.

use std::collections::HashMap;

use tempolab::config::{BenchmarkSource, EvalSelection, ExperimentConfig};
use tempolab::eval::{spearman, validation_perplexity, win_rate, MetricTable};
use tempolab::methods::{eval_params, MethodKind, MethodParams, MethodSpec};
use tempolab::model::{
    forward, gradient, masked_ce_loss, LossTerm, ModelConfig, ParameterSet,
};
use tempolab::rng::stream;
use tempolab::runner::{
    intersection_filter_study, load_benchmark, mean_assay_spearman, run_method,
};
use tempolab::synthgen::{generate_benchmark, generate_dms_assay, MotifGrammar, Provenance, TimelineSpec};
use tempolab::temporal::TemporalIndex;
use tempolab::trainer::{
    advance, checkpoint_bytes, checkpoint_from_bytes, make_masked_batch, train_task, Checkpoint,
    OrderedSource, TaskRunConfig, TaskSources, WSDSchedule,
};

fn verdict(n: usize, name: &str, result: Result<(), String>) {
    match &result {
        Ok(()) => println!("criterion {n} ({name}): pass"),
        Err(msg) => println!("criterion {n} ({name}): FAIL - {msg}"),
    }
    result.unwrap();
}

fn short_schedule() -> WSDSchedule {
    WSDSchedule {
        peak_lr: 1e-3,
        warmup_steps: 40,
        stable_until: 360,
        total_steps: 400,
        style: Default::default(),
    }
}

fn short_run() -> TaskRunConfig {
    let mut run = TaskRunConfig::default();
    run.schedule = short_schedule();
    run.batch_size = 16;
    run
}

/// The shared five-year benchmark for the direction checks: 30% noise per
/// release, noise culled at 0.5 per year, clean at 0.02.
fn five_year_benchmark() -> BenchmarkSource {
    BenchmarkSource::Synthetic {
        spec: TimelineSpec {
            n_years: 5,
            additions_per_year: 40,
            noise_fraction: 0.3,
            cull_noise_prob: 0.5,
            cull_clean_prob: 0.02,
            n_validation: 24,
            first_year: 2020,
            seed: 40,
        },
    }
}

#[test]
fn criterion_1_gradient_matches_finite_differences() {
    verdict(1, "gradient correctness", (|| {
        let config = ModelConfig::default();
        let mut params =
            ParameterSet::<f64>::init(&config, 5).map_err(|e| e.to_string())?;
        let seqs = vec![
            "MKTAYIAKQRQISFVKSHFS".to_string(),
            "GGWWFYPPMMACDEHKLNQR".to_string(),
        ];
        let batch = make_masked_batch(&seqs, &config, 0.3, &mut stream(5, "accept_mask", &[]))
            .map_err(|e| e.to_string())?;
        let terms = [LossTerm {
            weight: 1.0,
            batch: &batch,
        }];
        let (_, grads) = gradient(&params, &terms).map_err(|e| e.to_string())?;
        let loss_of = |p: &ParameterSet<f64>| -> Result<f64, String> {
            let logits = forward(p, &batch).map_err(|e| e.to_string())?;
            Ok(masked_ce_loss(&logits, &batch).map_err(|e| e.to_string())?.0)
        };
        let n = params.total_count();
        let eps = 1e-4;
        let mut worst = 0.0f64;
        let n_samples = 220;
        for k in 0..n_samples {
            let i = (k * n) / n_samples;
            let orig = params.flat_get(i);
            params.flat_set(i, orig + eps);
            let up = loss_of(&params)?;
            params.flat_set(i, orig - eps);
            let down = loss_of(&params)?;
            params.flat_set(i, orig);
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.flat_get(i);
            let rel =
                (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        if worst < 1e-4 {
            Ok(())
        } else {
            Err(format!("max relative error {worst:.2e} over {n_samples} coordinates"))
        }
    })());
}

#[test]
fn criterion_2_schedule_and_step_accounting_are_exact() {
    verdict(2, "schedule exactness", (|| {
        let full = WSDSchedule::full_scale();
        let expect = [
            (0u64, 0.0f64),
            (10_000, 5e-4),
            (50_000, 5e-4),
            (90_000, 5e-4),
            (95_000, 2.5e-4),
            (100_000, 0.0),
        ];
        for (step, lr) in expect {
            let got = full.lr_at(step).map_err(|e| e.to_string())?;
            if got != lr {
                return Err(format!("lr_at({step}) = {got}, expected {lr}"));
            }
        }
        if full.effective_steps_entering(6) != 450_000 {
            return Err("effective steps entering task six must be 450k".into());
        }
        if full.matched_budget(4) != 370_000 {
            return Err("matched budget for the fourth year must be 370k".into());
        }
        let desk = WSDSchedule::desk();
        if desk.effective_steps_entering(6) != 5 * desk.stable_until
            || desk.matched_budget(4) != 3 * desk.stable_until + desk.total_steps
        {
            return Err("scaled step-accounting identities fail for desk constants".into());
        }
        Ok(())
    })());
}

#[test]
fn criterion_3_replay_frequencies_match_multiplicity() {
    verdict(3, "replay distribution", (|| {
        // Ten sequences with hand-enumerated presence over three years.
        let year_members: [(i32, &[&str]); 3] = [
            (2020, &["A1", "A2", "A3", "A4", "B1", "B2", "B3", "C1", "C2", "C3"]),
            (2020 + 1, &["A1", "A2", "A3", "A4", "B1", "B2", "B3"]),
            (2020 + 2, &["A1", "A2", "A3", "A4", "D1"]),
        ];
        let snapshots: Vec<_> = year_members
            .iter()
            .map(|(year, seqs)| {
                let records = seqs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| tempolab::corpus::SequenceRecord {
                        identifier: format!("{year}_{i}"),
                        sequence: s.to_string(),
                        year: *year,
                    })
                    .collect();
                tempolab::corpus::deduplicate(records).map_err(|e| e.to_string())
            })
            .collect::<Result<_, String>>()?;
        let index = TemporalIndex::build(&snapshots).map_err(|e| e.to_string())?;
        // Replay entering the 2022 task draws from years before it.
        let dist = index.replay_distribution(2022).map_err(|e| e.to_string())?;
        let mut expected: HashMap<&str, f64> = HashMap::new();
        for s in ["A1", "A2", "A3", "A4"] {
            expected.insert(s, 2.0);
        }
        for s in ["B1", "B2", "B3", "C1", "C2", "C3"] {
            expected.insert(s, if s.starts_with('B') { 2.0 } else { 1.0 });
        }
        let total: f64 = expected.values().sum();
        let n_draws = 100_000usize;
        let draws = dist.sample(&mut stream(11, "accept_replay", &[]), n_draws);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for d in draws {
            *counts.entry(d).or_default() += 1;
        }
        let mut tv = 0.0;
        for (seq, mult) in &expected {
            let p = mult / total;
            let q = *counts.get(*seq).unwrap_or(&0) as f64 / n_draws as f64;
            tv += (p - q).abs();
        }
        tv /= 2.0;
        if tv < 0.01 {
            Ok(())
        } else {
            Err(format!("total variation {tv:.4} over {n_draws} draws"))
        }
    })());
}

#[test]
fn criterion_4_neutral_methods_match_sequential_bitwise() {
    verdict(4, "method neutrality", (|| {
        let spec = TimelineSpec {
            n_years: 2,
            additions_per_year: 20,
            noise_fraction: 0.25,
            cull_noise_prob: 0.5,
            cull_clean_prob: 0.05,
            n_validation: 8,
            first_year: 2020,
            seed: 13,
        };
        let bench = load_benchmark(&BenchmarkSource::Synthetic { spec })
            .map_err(|e| e.to_string())?;
        let index = TemporalIndex::build(&bench.snapshots).map_err(|e| e.to_string())?;
        let model = ModelConfig::tiny();
        let mut run = short_run();
        run.schedule = WSDSchedule {
            peak_lr: 1e-3,
            warmup_steps: 5,
            stable_until: 45,
            total_steps: 50,
            style: Default::default(),
        };
        run.batch_size = 8;

        let trajectory = |spec: &MethodSpec| -> Result<(Vec<f64>, Vec<u8>), String> {
            let (ckpts, log) =
                run_method(spec, &index, &model, &run, 3, false).map_err(|e| e.to_string())?;
            let losses = log.iter().map(|r| r.loss).collect();
            let bytes = checkpoint_bytes(ckpts.last().expect("two tasks"));
            Ok((losses, bytes))
        };

        let baseline = trajectory(&MethodSpec::new(MethodKind::Sequential))?;
        let neutral = |kind: MethodKind, params: MethodParams| MethodSpec { kind, params };
        let variants = vec![
            neutral(MethodKind::Replay, MethodParams {
                lambda_replay: Some(0.0),
                ..Default::default()
            }),
            neutral(MethodKind::ShrinkPerturb, MethodParams {
                lambda_shrink: Some(1.0),
                lambda_noise: Some(0.0),
                ..Default::default()
            }),
            neutral(MethodKind::HareTortoise, MethodParams {
                lambda_ht_mom: Some(0.9),
                lambda_reset_freq: None,
                ..Default::default()
            }),
            neutral(MethodKind::GradAscent, MethodParams {
                lambda_asc: Some(0.0),
                ..Default::default()
            }),
            neutral(MethodKind::RandomLabels, MethodParams {
                lambda_rand: Some(0.0),
                ..Default::default()
            }),
        ];
        for method in variants {
            let (losses, bytes) = trajectory(&method)?;
            if losses != baseline.0 {
                return Err(format!(
                    "{} loss trace diverges from sequential",
                    method.kind.name()
                ));
            }
            // The weight trajectory must agree bit for bit; the checkpoint
            // method blob legitimately differs for the slow-weight method.
            let (ckpts, _) = run_method(&method, &index, &model, &run, 3, false)
                .map_err(|e| e.to_string())?;
            let last = ckpts.last().expect("two tasks");
            let base_last = checkpoint_from_bytes(&baseline.1).map_err(|e| e.to_string())?;
            let identical = (0..last.params.total_count())
                .all(|i| last.params.flat_get(i) == base_last.params.flat_get(i));
            if !identical {
                return Err(format!(
                    "{} weights diverge from sequential",
                    method.kind.name()
                ));
            }
            let _ = bytes;
        }
        Ok(())
    })());
}

#[test]
fn criterion_5_intersection_filter_beats_full_release() {
    verdict(5, "filter-experiment direction", (|| {
        let bench = load_benchmark(&five_year_benchmark()).map_err(|e| e.to_string())?;
        let index = TemporalIndex::build(&bench.snapshots).map_err(|e| e.to_string())?;
        let model = ModelConfig::tiny();
        let run = short_run();
        let pairs = [
            (2020, 2022),
            (2020, 2023),
            (2021, 2023),
            (2020, 2024),
            (2021, 2024),
            (2022, 2024),
        ];
        for seed in [1u64, 2, 3] {
            let cells = intersection_filter_study(
                &index,
                &bench.validation,
                &model,
                &run,
                seed,
                &pairs,
            )
            .map_err(|e| e.to_string())?;
            let improved = cells
                .iter()
                .any(|c| c.intersection_ppl < c.full_year_ppl);
            if !improved {
                return Err(format!(
                    "seed {seed}: no non-adjacent pair beat the full later release"
                ));
            }
        }
        Ok(())
    })());
}

#[test]
fn criterion_6_replay_beats_sequential_and_no_method_collapses() {
    verdict(6, "continual-beats-naive direction", (|| {
        let bench = load_benchmark(&five_year_benchmark()).map_err(|e| e.to_string())?;
        let index = TemporalIndex::build(&bench.snapshots).map_err(|e| e.to_string())?;
        let model = ModelConfig::tiny();
        let run = short_run();
        // Intervention strengths rescaled to the short task budget; the
        // full-scale defaults assume hundred-thousand-step tasks.
        let desk_tuned = vec![
            MethodSpec::new(MethodKind::Sequential),
            MethodSpec::new(MethodKind::Replay),
            MethodSpec {
                kind: MethodKind::ShrinkPerturb,
                params: MethodParams {
                    lambda_shrink: Some(0.995),
                    lambda_noise: Some(0.001),
                    ..Default::default()
                },
            },
            MethodSpec {
                kind: MethodKind::HareTortoise,
                params: MethodParams {
                    lambda_ht_mom: Some(0.8),
                    lambda_reset_freq: None,
                    ..Default::default()
                },
            },
            MethodSpec {
                kind: MethodKind::GradAscent,
                params: MethodParams {
                    lambda_asc: Some(0.005),
                    ..Default::default()
                },
            },
            MethodSpec {
                kind: MethodKind::RandomLabels,
                params: MethodParams {
                    lambda_rand: Some(0.001),
                    ..Default::default()
                },
            },
        ];
        let mut replay_wins = 0;
        for seed in [1u64, 2, 3] {
            let mut final_ppl: HashMap<&'static str, f64> = HashMap::new();
            for method in &desk_tuned {
                let (ckpts, _) = run_method(method, &index, &model, &run, seed, false)
                    .map_err(|e| e.to_string())?;
                let last = ckpts.last().expect("five tasks");
                let report = validation_perplexity(
                    eval_params(method, last),
                    &bench.validation,
                    run.mask_rate,
                    run.eval_mask_seed,
                )
                .map_err(|e| e.to_string())?;
                final_ppl.insert(method.kind.name(), report.perplexity);
            }
            let sequential = final_ppl["sequential"];
            if final_ppl["replay"] < sequential {
                replay_wins += 1;
            }
            for (name, ppl) in &final_ppl {
                if *name != "sequential" && *ppl > sequential * 1.01 {
                    return Err(format!(
                        "seed {seed}: {name} perplexity {ppl:.3} exceeds sequential {sequential:.3} by more than 1%"
                    ));
                }
            }
        }
        if replay_wins >= 2 {
            Ok(())
        } else {
            Err(format!("replay beat sequential in only {replay_wins} of 3 seeds"))
        }
    })());
}

#[test]
fn criterion_7_mutation_ranking_separates_trained_from_untrained() {
    verdict(7, "mutation ranking sanity", (|| {
        let expect = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])
            .map_err(|e| e.to_string())?;
        if expect != Some(0.8) {
            return Err(format!("rank-formula oracle: got {expect:?}, expected 0.8"));
        }

        let grammar = MotifGrammar::random(2, 10, 14, 0.8, 42).map_err(|e| e.to_string())?;
        let mut rng = stream(42, "accept_dms_data", &[]);
        let train_set: Vec<String> = (0..64).map(|_| grammar.sample(&mut rng)).collect();
        let assays: Vec<_> = (0..10)
            .map(|i| {
                generate_dms_assay(
                    &grammar,
                    &mut stream(42, "accept_assay", &[i]),
                    40,
                    &format!("a{i}"),
                )
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;

        let config = ModelConfig::tiny();
        let untrained = Checkpoint::fresh(&config, 5).map_err(|e| e.to_string())?;
        let rho_untrained =
            mean_assay_spearman(&untrained.params, &assays).map_err(|e| e.to_string())?;
        if rho_untrained.abs() > 0.1 {
            return Err(format!("untrained |rho| = {:.3} > 0.1", rho_untrained.abs()));
        }

        let mut run = short_run();
        run.schedule = WSDSchedule {
            peak_lr: 2e-3,
            warmup_steps: 20,
            stable_until: 540,
            total_steps: 600,
            style: Default::default(),
        };
        let mut sources = TaskSources {
            current: OrderedSource::new(train_set, "current").map_err(|e| e.to_string())?,
            replay: None,
            forget: None,
        };
        let outcome = train_task(
            untrained,
            &mut sources,
            &MethodSpec::new(MethodKind::Sequential),
            &run,
        )
        .map_err(|e| e.to_string())?;
        let rho_trained =
            mean_assay_spearman(&outcome.decayed.params, &assays).map_err(|e| e.to_string())?;
        if rho_trained >= 0.5 {
            Ok(())
        } else {
            Err(format!("trained mean rho {rho_trained:.3} < 0.5"))
        }
    })());
}

#[test]
fn criterion_8_metric_identities() {
    verdict(8, "metric identities", (|| {
        // A model with all-zero weights scores every token uniformly over
        // the 26-symbol vocabulary.
        let config = ModelConfig::tiny();
        let zero = Checkpoint::fresh(&config, 1)
            .map_err(|e| e.to_string())?
            .params
            .zeros_like();
        let valset = vec!["MKTAYIAKQR".to_string(), "GGWWFYPPMM".to_string()];
        let report = validation_perplexity(&zero, &valset, 0.3, 7777)
            .map_err(|e| e.to_string())?;
        if (report.perplexity - 26.0).abs() > 1e-3 {
            return Err(format!("uniform perplexity {} not 26 +- 1e-3", report.perplexity));
        }

        // A model overfit on a tiny fixed set recovers every masked token.
        let memor_set: Vec<String> = vec![
            "MKTAYIAKQR".to_string(),
            "GGWWFYPPMM".to_string(),
            "ACDEFGHIKL".to_string(),
            "NPQRSTVWYA".to_string(),
        ];
        let mut run = short_run();
        run.schedule = WSDSchedule {
            peak_lr: 3e-3,
            warmup_steps: 20,
            stable_until: 380,
            total_steps: 400,
            style: Default::default(),
        };
        run.batch_size = 4;
        let mut ckpt = Checkpoint::fresh(&config, 3).map_err(|e| e.to_string())?;
        let mut sources = TaskSources {
            current: OrderedSource::new(memor_set.clone(), "current")
                .map_err(|e| e.to_string())?,
            replay: None,
            forget: None,
        };
        let method = MethodSpec::new(MethodKind::Sequential);
        let mut log = Vec::new();
        let mut recovered = false;
        for _ in 0..12 {
            let remaining = run.schedule.stable_until - ckpt.step;
            let chunk = remaining.min(100);
            if chunk == 0 {
                break;
            }
            advance(&mut ckpt, &mut sources, &method, &run, chunk, &mut log)
                .map_err(|e| e.to_string())?;
            let r = validation_perplexity(&ckpt.params, &memor_set, run.mask_rate, run.eval_mask_seed)
                .map_err(|e| e.to_string())?;
            if r.recovery == 1.0 {
                recovered = true;
                break;
            }
        }
        if !recovered {
            return Err("memorizer never reached recovery 1.0".into());
        }

        // Win-rate mean over a complete table is exactly one half.
        let mut table = MetricTable::default();
        table.set_orientation("perplexity", false);
        for (i, m) in ["a", "b", "c"].iter().enumerate() {
            for year in [2020, 2021] {
                table.insert(m, year, "perplexity", 1.0 + (i as f64) * 0.1 + year as f64);
            }
        }
        let report = win_rate(&table).map_err(|e| e.to_string())?;
        let mean: f64 = report.overall.values().sum::<f64>() / report.overall.len() as f64;
        if mean != 0.5 {
            return Err(format!("win-rate mean {mean} is not exactly 0.5"));
        }
        Ok(())
    })());
}

#[test]
fn criterion_9_checkpoint_round_trip_and_split_resume() {
    verdict(9, "protocol invariant", (|| {
        let grammar = MotifGrammar::random(2, 10, 14, 0.7, 21).map_err(|e| e.to_string())?;
        let mut rng = stream(21, "accept_protocol", &[]);
        let seqs: Vec<String> = (0..24).map(|_| grammar.sample(&mut rng)).collect();
        let config = ModelConfig::tiny();
        let mut run = short_run();
        run.schedule = WSDSchedule {
            peak_lr: 1e-3,
            warmup_steps: 6,
            stable_until: 54,
            total_steps: 60,
            style: Default::default(),
        };
        run.batch_size = 8;
        let method = MethodSpec::new(MethodKind::Sequential);
        let sources = |s: &[String]| -> Result<TaskSources, String> {
            Ok(TaskSources {
                current: OrderedSource::new(s.to_vec(), "current").map_err(|e| e.to_string())?,
                replay: None,
                forget: None,
            })
        };

        let mut straight = Checkpoint::fresh(&config, 9).map_err(|e| e.to_string())?;
        let mut straight_log = Vec::new();
        advance(&mut straight, &mut sources(&seqs)?, &method, &run, 40, &mut straight_log)
            .map_err(|e| e.to_string())?;

        let mut split = Checkpoint::fresh(&config, 9).map_err(|e| e.to_string())?;
        let mut split_log = Vec::new();
        advance(&mut split, &mut sources(&seqs)?, &method, &run, 17, &mut split_log)
            .map_err(|e| e.to_string())?;
        let bytes = checkpoint_bytes(&split);
        let restored = checkpoint_from_bytes(&bytes).map_err(|e| e.to_string())?;
        if checkpoint_bytes(&restored) != bytes {
            return Err("checkpoint bytes change across a round trip".into());
        }
        let mut resumed = restored;
        advance(&mut resumed, &mut sources(&seqs)?, &method, &run, 23, &mut split_log)
            .map_err(|e| e.to_string())?;

        let straight_losses: Vec<f64> = straight_log.iter().map(|r| r.loss).collect();
        let split_losses: Vec<f64> = split_log.iter().map(|r| r.loss).collect();
        if straight_losses != split_losses {
            return Err("split/resumed loss trace differs from uninterrupted run".into());
        }
        let identical = (0..straight.params.total_count())
            .all(|i| straight.params.flat_get(i) == resumed.params.flat_get(i));
        if !identical {
            return Err("split/resumed weights differ from uninterrupted run".into());
        }
        Ok(())
    })());
}

#[test]
fn criterion_10_clean_sequences_persist_longer_than_noise() {
    verdict(10, "temporal-signal property", (|| {
        let grammar = MotifGrammar::random(3, 12, 20, 0.75, 40).map_err(|e| e.to_string())?;
        let spec = TimelineSpec {
            n_years: 5,
            additions_per_year: 40,
            noise_fraction: 0.3,
            cull_noise_prob: 0.5,
            cull_clean_prob: 0.02,
            n_validation: 10,
            first_year: 2020,
            seed: 40,
        };
        let bench = generate_benchmark(&grammar, &spec).map_err(|e| e.to_string())?;
        let index = TemporalIndex::build(&bench.snapshots).map_err(|e| e.to_string())?;
        let last_year = *index.years().last().expect("five years");
        let mut sums = HashMap::from([(Provenance::Clean, (0.0f64, 0usize)), (Provenance::Noise, (0.0, 0))]);
        for seq in index.sequences() {
            let label = match bench.labels.get(seq) {
                Some(l) => *l,
                None => continue,
            };
            let mult = index.multiplicity(seq, last_year).map_err(|e| e.to_string())? as f64;
            let entry = sums.get_mut(&label).expect("both labels present");
            entry.0 += mult;
            entry.1 += 1;
        }
        let mean = |p: Provenance| -> Result<f64, String> {
            let (sum, n) = sums[&p];
            if n == 0 {
                return Err(format!("no {p:?} sequences in the benchmark"));
            }
            Ok(sum / n as f64)
        };
        let clean = mean(Provenance::Clean)?;
        let noise = mean(Provenance::Noise)?;
        if clean > noise {
            Ok(())
        } else {
            Err(format!("mean multiplicity clean {clean:.3} <= noise {noise:.3}"))
        }
    })());
}

#[test]
fn cli_subcommands_run_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_tempolab");
    let dir = tempfile::tempdir().unwrap();
    let timeline = dir.path().join("timeline.json");
    std::fs::write(
        &timeline,
        serde_json::to_string(&TimelineSpec {
            n_years: 2,
            additions_per_year: 20,
            noise_fraction: 0.25,
            cull_noise_prob: 0.5,
            cull_clean_prob: 0.05,
            n_validation: 10,
            first_year: 2020,
            seed: 5,
        })
        .unwrap(),
    )
    .unwrap();
    let bench_dir = dir.path().join("bench");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "tempolab {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&["synth", "--config", timeline.to_str().unwrap(), "--out", bench_dir.to_str().unwrap()]);
    let m1 = bench_dir.join("year_2020.manifest.json");
    let m2 = bench_dir.join("year_2021.manifest.json");
    assert!(m1.exists() && m2.exists());

    let idx_dir = dir.path().join("idx");
    run(&["index", m1.to_str().unwrap(), m2.to_str().unwrap(), "--out", idx_dir.to_str().unwrap()]);
    assert!(idx_dir.join("index.cpix").exists());

    run(&["diff", m1.to_str().unwrap(), m2.to_str().unwrap(), "--years", "2020..2021", "--out", idx_dir.to_str().unwrap()]);
    assert!(idx_dir.join("diff_2020_2021.json").exists());

    let exp = dir.path().join("exp.json");
    let run_dir = dir.path().join("run");
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
                seed: 5,
            },
        },
        model: ModelConfig::tiny(),
        run: {
            let mut r = TaskRunConfig::default();
            r.schedule = WSDSchedule {
                peak_lr: 1e-3,
                warmup_steps: 4,
                stable_until: 24,
                total_steps: 30,
                style: Default::default(),
            };
            r.batch_size = 8;
            r
        },
        methods: vec![
            MethodSpec::new(MethodKind::Sequential),
            MethodSpec::new(MethodKind::Replay),
        ],
        eval: EvalSelection::default(),
        seed: 17,
        out_dir: run_dir.clone(),
        reset_optimizer_at_boundary: false,
    };
    std::fs::write(&exp, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    run(&["train", "--config", exp.to_str().unwrap()]);
    assert!(run_dir.join("metrics.csv").exists());
    assert!(run_dir.join("manifest.json").exists());

    let wr_dir = dir.path().join("wr");
    run(&["winrate", run_dir.join("metrics.csv").to_str().unwrap(), "--out", wr_dir.to_str().unwrap()]);
    assert!(wr_dir.join("win_rates.json").exists());

    // Malformed configs exit with code 2, missing data files with 3.
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ not json").unwrap();
    let bad = std::process::Command::new(bin)
        .args(["train", "--config", broken.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let missing = std::process::Command::new(bin)
        .args(["train", "--config", dir.path().join("absent.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}
