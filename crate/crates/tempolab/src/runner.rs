//! Experiment orchestration: benchmark loading, continual training runs
//! over the task sequence, the intersection-filter study, the pruning-based
//! hyperparameter search, and the file-level subcommand implementations.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BenchmarkSource, EvalSelection, ExperimentConfig, RunManifest};
use crate::corpus::{
    load_manifest, load_snapshot, serialize_jsonl, SequenceRecord, Snapshot,
};
use crate::error::{Error, Result};
use crate::eval::{
    qq_quantiles, score_mutations, seq_stats, spearman, validation_perplexity, win_rate,
    MetricTable,
};
use crate::methods::{
    build_task_sources, eval_params, task_boundary, MethodKind, MethodSpec,
};
use crate::model::{ModelConfig, ParameterSet};
use crate::rng::stream;
use crate::synthgen::{
    generate_benchmark, generate_dms_assay, sequence_digest, write_benchmark, DmsAssay,
    MotifGrammar, Provenance, TimelineSpec,
};
use crate::temporal::TemporalIndex;
use crate::trainer::{
    load_checkpoint, save_checkpoint, train_task, write_metrics_csv, Checkpoint, MetricsRow,
    OrderedSource, TaskRunConfig, TaskSources, WSDSchedule,
};

/// A loaded task sequence plus its evaluation material. Synthetic
/// benchmarks carry the generating grammar (ground truth for assays) and
/// provenance labels.
pub struct LoadedBenchmark {
    pub snapshots: Vec<Snapshot>,
    pub validation: Vec<String>,
    pub grammar: Option<MotifGrammar>,
    pub labels: Option<HashMap<String, Provenance>>,
}

/// Grammar used when a synthetic spec does not name one: a few peaked
/// motifs over short sequences, cheap to train against.
pub fn default_grammar(seed: u64) -> Result<MotifGrammar> {
    MotifGrammar::random(3, 12, 20, 0.75, seed)
}

pub fn load_benchmark(source: &BenchmarkSource) -> Result<LoadedBenchmark> {
    match source {
        BenchmarkSource::Manifests {
            manifests,
            validation_manifest,
        } => {
            let snapshots: Vec<Snapshot> = manifests
                .iter()
                .map(|p| load_snapshot(&load_manifest(p)?))
                .collect::<Result<_>>()?;
            let valset = load_snapshot(&load_manifest(validation_manifest)?)?;
            Ok(LoadedBenchmark {
                snapshots,
                validation: valset.sequences().map(str::to_string).collect(),
                grammar: None,
                labels: None,
            })
        }
        BenchmarkSource::Synthetic { spec } => {
            let grammar = default_grammar(spec.seed)?;
            let bench = generate_benchmark(&grammar, spec)?;
            Ok(LoadedBenchmark {
                snapshots: bench.snapshots,
                validation: bench
                    .validation
                    .iter()
                    .map(|r| r.sequence.clone())
                    .collect(),
                grammar: Some(grammar),
                labels: Some(bench.labels),
            })
        }
    }
}

fn eval_assays(sel: &EvalSelection, grammar: Option<&MotifGrammar>, seed: u64) -> Result<Vec<DmsAssay>> {
    if !sel.mutation_ranking {
        return Ok(Vec::new());
    }
    let grammar = grammar.ok_or_else(|| {
        Error::Config("mutation ranking needs a synthetic benchmark with a grammar".into())
    })?;
    (0..sel.n_assays)
        .map(|i| {
            generate_dms_assay(
                grammar,
                &mut stream(seed, "assay", &[i as u64]),
                24,
                &format!("assay{i}"),
            )
        })
        .collect()
}

/// Mean Spearman rho of predicted scores against ground-truth fitness.
pub fn mean_assay_spearman(params: &ParameterSet<f32>, assays: &[DmsAssay]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for assay in assays {
        let scores = score_mutations(params, assay)?;
        let fitness: Vec<f64> = assay.variants.iter().map(|v| v.fitness).collect();
        if let Some(rho) = spearman(&scores, &fitness)? {
            sum += rho;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Numeric {
            context: "mutation ranking".into(),
            msg: "every assay had zero rank variance".into(),
        });
    }
    Ok(sum / n as f64)
}

fn evaluate_into(
    table: &mut MetricTable,
    method_name: &str,
    year: i32,
    params: &ParameterSet<f32>,
    bench: &LoadedBenchmark,
    assays: &[DmsAssay],
    sel: &EvalSelection,
    run: &TaskRunConfig,
) -> Result<()> {
    if sel.perplexity || sel.recovery {
        let report =
            validation_perplexity(params, &bench.validation, run.mask_rate, run.eval_mask_seed)?;
        if sel.perplexity {
            table.insert(method_name, year, "perplexity", report.perplexity);
        }
        if sel.recovery {
            table.insert(method_name, year, "recovery", report.recovery);
        }
    }
    if !assays.is_empty() {
        table.insert(method_name, year, "spearman", mean_assay_spearman(params, assays)?);
    }
    Ok(())
}

/// Per-task schedule for a method: the matched single-year baseline gets
/// the cumulative stable budget of the years it replaces, everything else
/// runs the configured schedule.
fn schedule_for(method: &MethodSpec, base: &WSDSchedule, task_idx: usize) -> WSDSchedule {
    if method.kind == MethodKind::SingleYearMatched {
        let extra = task_idx as u64 * base.stable_until;
        let mut s = base.clone();
        s.stable_until += extra;
        s.total_steps += extra;
        return s;
    }
    base.clone()
}

/// Train one method across the whole task sequence, evaluating the decayed
/// checkpoint after every task. Returns per-task decayed checkpoints and
/// the training log.
pub fn run_method(
    method: &MethodSpec,
    index: &TemporalIndex,
    model: &ModelConfig,
    run: &TaskRunConfig,
    seed: u64,
    reset_optimizer: bool,
) -> Result<(Vec<Checkpoint>, Vec<MetricsRow>)> {
    let n_tasks = index.years().len();
    let from_scratch = matches!(
        method.kind,
        MethodKind::SingleYearIncremental | MethodKind::SingleYearMatched
    );
    let mut decayed_checkpoints = Vec::with_capacity(n_tasks);
    let mut log = Vec::new();
    let mut carry: Option<Checkpoint> = None;
    for task_idx in 0..n_tasks {
        let start = match (&carry, from_scratch) {
            (Some(c), false) => c.clone(),
            _ => {
                let mut c = Checkpoint::fresh(model, seed)?;
                c.task = task_idx as u64;
                c
            }
        };
        let mut task_run = run.clone();
        task_run.schedule = schedule_for(method, &run.schedule, task_idx);
        let mut sources = build_task_sources(method, index, task_idx)?;
        let outcome = train_task(start, &mut sources, method, &task_run)?;
        log.extend(outcome.log);
        if !from_scratch && task_idx + 1 < n_tasks {
            carry = Some(task_boundary(method, &outcome.pre_decay, reset_optimizer));
        }
        decayed_checkpoints.push(outcome.decayed);
    }
    Ok((decayed_checkpoints, log))
}

/// Run every configured method over the task sequence and emit metric and
/// checkpoint artifacts under the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    let t0 = Instant::now();
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let mut manifest = RunManifest::new(config.digest());
    let bench = load_benchmark(&config.benchmark)?;
    let index = TemporalIndex::build(&bench.snapshots)?;
    let assays = eval_assays(&config.eval, bench.grammar.as_ref(), config.seed)?;
    let mut table = MetricTable::default();
    table.set_orientation("perplexity", false);
    table.set_orientation("recovery", true);
    table.set_orientation("spearman", true);
    for method in &config.methods {
        let name = method.kind.name();
        let (checkpoints, log) = run_method(
            method,
            &index,
            &config.model,
            &config.run,
            config.seed,
            config.reset_optimizer_at_boundary,
        )
        .map_err(|e| {
            manifest.failure = Some(format!("method {name}: {e}"));
            let _ = manifest.write(&config.out_dir.join("manifest.json"));
            e
        })?;
        let log_path = config.out_dir.join(format!("train_{name}.csv"));
        write_metrics_csv(&log_path, &log)?;
        manifest.metric_files.push(log_path);
        for (task_idx, ckpt) in checkpoints.iter().enumerate() {
            let year = index.years()[task_idx];
            evaluate_into(
                &mut table,
                name,
                year,
                eval_params(method, ckpt),
                &bench,
                &assays,
                &config.eval,
                &config.run,
            )?;
            let path = config.out_dir.join(format!("ckpt_{name}_task{task_idx}.cplm"));
            save_checkpoint(ckpt, &path)?;
            manifest.checkpoints.push((name.to_string(), task_idx, path));
        }
    }
    let metrics_path = config.out_dir.join("metrics.csv");
    table.write_csv(&metrics_path)?;
    manifest.metric_files.push(metrics_path);
    manifest.wall_seconds = t0.elapsed().as_secs_f64();
    manifest.write(&config.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Train a plain sequential model on one fixed sequence set for a single
/// task and return the decayed weights.
pub fn train_single_set(
    seqs: Vec<String>,
    model: &ModelConfig,
    run: &TaskRunConfig,
    seed: u64,
) -> Result<ParameterSet<f32>> {
    let mut sources = TaskSources {
        current: OrderedSource::new(seqs, "current")?,
        replay: None,
        forget: None,
    };
    let method = MethodSpec::new(MethodKind::Sequential);
    let outcome = train_task(Checkpoint::fresh(model, seed)?, &mut sources, &method, run)?;
    Ok(outcome.decayed.params)
}

/// One cell of the intersection-filter grid: perplexity of a model trained
/// only on sequences present in both years against one trained on the full
/// later release.
#[derive(Debug, Clone, Serialize)]
pub struct FilterCell {
    pub y1: i32,
    pub y2: i32,
    pub intersection_size: usize,
    pub full_size: usize,
    pub intersection_ppl: f64,
    pub full_year_ppl: f64,
}

/// Compare intersection-trained models against full-release models on the
/// validation set, for each (earlier, later) year pair.
pub fn intersection_filter_study(
    index: &TemporalIndex,
    validation: &[String],
    model: &ModelConfig,
    run: &TaskRunConfig,
    seed: u64,
    pairs: &[(i32, i32)],
) -> Result<Vec<FilterCell>> {
    let mut full_ppl_cache: HashMap<i32, (usize, f64)> = HashMap::new();
    let mut cells = Vec::with_capacity(pairs.len());
    for &(y1, y2) in pairs {
        if y1 >= y2 {
            return Err(Error::Argument(format!(
                "pair ({y1},{y2}) must be ordered earlier, later"
            )));
        }
        let mut inter: Vec<String> = index.intersection(y1, y2)?.into_iter().collect();
        inter.sort();
        if inter.is_empty() {
            return Err(Error::Argument(format!(
                "years {y1} and {y2} share no sequences"
            )));
        }
        let inter_size = inter.len();
        let inter_params = train_single_set(inter, model, run, seed)?;
        let inter_ppl =
            validation_perplexity(&inter_params, validation, run.mask_rate, run.eval_mask_seed)?
                .perplexity;
        let (full_size, full_ppl) = match full_ppl_cache.get(&y2) {
            Some(&v) => v,
            None => {
                let full = index.year_sequences(y2)?;
                let size = full.len();
                let params = train_single_set(full, model, run, seed)?;
                let ppl =
                    validation_perplexity(&params, validation, run.mask_rate, run.eval_mask_seed)?
                        .perplexity;
                full_ppl_cache.insert(y2, (size, ppl));
                (size, ppl)
            }
        };
        cells.push(FilterCell {
            y1,
            y2,
            intersection_size: inter_size,
            full_size,
            intersection_ppl: inter_ppl,
            full_year_ppl: full_ppl,
        });
    }
    Ok(cells)
}

/// Distribution of one searched hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "dist")]
pub enum ParamDist {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    LogInt { lo: u64, hi: u64 },
}

impl ParamDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ParamDist::Uniform { lo, hi } => lo <= hi,
            ParamDist::LogUniform { lo, hi } => 0.0 < lo && lo <= hi,
            ParamDist::LogInt { lo, hi } => 0 < lo && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        match *self {
            ParamDist::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..hi)
                }
            }
            ParamDist::LogUniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    (rng.gen_range(lo.ln()..hi.ln())).exp()
                }
            }
            ParamDist::LogInt { lo, hi } => {
                if lo == hi {
                    lo as f64
                } else {
                    (rng.gen_range((lo as f64).ln()..((hi + 1) as f64).ln()))
                        .exp()
                        .floor()
                        .clamp(lo as f64, hi as f64)
                }
            }
        }
    }

    /// A local move around `current`, clamped back into the support.
    fn perturb(&self, current: f64, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        match *self {
            ParamDist::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    (current + rng.gen_range(-0.15..0.15) * (hi - lo)).clamp(lo, hi)
                }
            }
            ParamDist::LogUniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    (current * rng.gen_range(-0.5f64..0.5).exp()).clamp(lo, hi)
                }
            }
            ParamDist::LogInt { lo, hi } => {
                if lo == hi {
                    lo as f64
                } else {
                    (current * rng.gen_range(-0.5f64..0.5).exp())
                        .round()
                        .clamp(lo as f64, hi as f64)
                }
            }
        }
    }
}

/// The searched method kind and per-parameter distributions, keyed by the
/// serialized parameter names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub kind: MethodKind,
    pub dists: BTreeMap<String, ParamDist>,
}

impl SearchSpace {
    /// Reference search ranges for each tunable method.
    pub fn default_for(kind: MethodKind) -> Self {
        let mut dists = BTreeMap::new();
        match kind {
            MethodKind::Replay => {
                dists.insert("lambda_replay".into(), ParamDist::Uniform { lo: 0.0, hi: 1.0 });
            }
            MethodKind::ShrinkPerturb => {
                dists.insert("lambda_shrink".into(), ParamDist::Uniform { lo: 0.0, hi: 1.0 });
                dists.insert("lambda_noise".into(), ParamDist::Uniform { lo: 0.0, hi: 1.0 });
            }
            MethodKind::HareTortoise => {
                dists.insert(
                    "lambda_ht_mom".into(),
                    ParamDist::Uniform { lo: 0.5, hi: 0.999 },
                );
                dists.insert(
                    "lambda_reset_freq".into(),
                    ParamDist::LogInt { lo: 1, hi: 2_000 },
                );
            }
            MethodKind::GradAscent => {
                dists.insert(
                    "lambda_asc".into(),
                    ParamDist::LogUniform { lo: 1e-4, hi: 1.0 },
                );
            }
            MethodKind::RandomLabels => {
                dists.insert(
                    "lambda_rand".into(),
                    ParamDist::LogUniform { lo: 1e-4, hi: 1.0 },
                );
            }
            _ => {}
        }
        SearchSpace { kind, dists }
    }

    fn validate(&self) -> Result<()> {
        if self.dists.is_empty() {
            return Err(Error::Config(format!(
                "empty search space for {}",
                self.kind.name()
            )));
        }
        for d in self.dists.values() {
            d.validate()?;
        }
        Ok(())
    }

    fn spec_with(&self, values: &BTreeMap<String, f64>) -> Result<MethodSpec> {
        let mut spec = MethodSpec::new(self.kind);
        for (name, &v) in values {
            match name.as_str() {
                "lambda_replay" => spec.params.lambda_replay = Some(v),
                "lambda_shrink" => spec.params.lambda_shrink = Some(v),
                "lambda_noise" => spec.params.lambda_noise = Some(v),
                "lambda_ht_mom" => spec.params.lambda_ht_mom = Some(v),
                "lambda_reset_freq" => spec.params.lambda_reset_freq = Some(v as u64),
                "lambda_asc" => spec.params.lambda_asc = Some(v),
                "lambda_rand" => spec.params.lambda_rand = Some(v),
                other => {
                    return Err(Error::Config(format!("unknown search parameter '{other}'")))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn scale_schedule(base: &WSDSchedule, factor: f64) -> WSDSchedule {
    let scale = |x: u64| ((x as f64 * factor).round() as u64).max(1);
    let warmup = scale(base.warmup_steps);
    let stable = scale(base.stable_until).max(warmup);
    let total = scale(base.total_steps).max(stable);
    WSDSchedule {
        peak_lr: base.peak_lr,
        warmup_steps: warmup,
        stable_until: stable,
        total_steps: total,
        style: base.style,
    }
}

/// Validation loss of one candidate under a scaled step budget.
fn score_candidate(
    spec: &MethodSpec,
    index: &TemporalIndex,
    bench: &LoadedBenchmark,
    config: &ExperimentConfig,
    budget_factor: f64,
) -> Result<f64> {
    let mut run = config.run.clone();
    run.schedule = scale_schedule(&config.run.schedule, budget_factor);
    let (checkpoints, _) = run_method(
        spec,
        index,
        &config.model,
        &run,
        config.seed,
        config.reset_optimizer_at_boundary,
    )?;
    let last = checkpoints.last().expect("at least one task");
    let report = validation_perplexity(
        eval_params(spec, last),
        &bench.validation,
        run.mask_rate,
        run.eval_mask_seed,
    )?;
    Ok(report.perplexity.ln())
}

/// Pruning-based hyperparameter search: 8 random candidates at a half-task
/// budget, 8 local perturbations of the best of those, then the top 4 of
/// all 16 by validation loss rerun at triple budget. Returns the winner at
/// the final horizon.
pub fn hparam_search(config: &ExperimentConfig, space: &SearchSpace) -> Result<MethodSpec> {
    config.validate()?;
    space.validate()?;
    let bench = load_benchmark(&config.benchmark)?;
    let index = TemporalIndex::build(&bench.snapshots)?;
    let sample_values = |rng: &mut rand_chacha::ChaCha8Rng| -> BTreeMap<String, f64> {
        space
            .dists
            .iter()
            .map(|(k, d)| (k.clone(), d.sample(rng)))
            .collect()
    };

    let mut candidates: Vec<BTreeMap<String, f64>> = (0..8)
        .map(|i| sample_values(&mut stream(config.seed, "hparam_random", &[i])))
        .collect();
    let short = 0.5;
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (i, values) in candidates.iter().enumerate() {
        let spec = space.spec_with(values)?;
        scored.push((score_candidate(&spec, &index, &bench, config, short)?, i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let stage1_best = candidates[scored[0].1].clone();

    for i in 0..8u64 {
        let mut rng = stream(config.seed, "hparam_local", &[i]);
        let perturbed: BTreeMap<String, f64> = stage1_best
            .iter()
            .map(|(k, &v)| (k.clone(), space.dists[k].perturb(v, &mut rng)))
            .collect();
        let spec = space.spec_with(&perturbed)?;
        let idx = candidates.len();
        candidates.push(perturbed);
        scored.push((
            score_candidate(&spec, &index, &bench, config, short)?,
            idx,
        ));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let finalists: Vec<usize> = scored.iter().take(4).map(|&(_, i)| i).collect();

    let mut best: Option<(f64, MethodSpec)> = None;
    for idx in finalists {
        let spec = space.spec_with(&candidates[idx])?;
        let loss = score_candidate(&spec, &index, &bench, config, 3.0 * short)?;
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, spec));
        }
    }
    Ok(best.expect("four finalists scored").1)
}

/// Build the temporal index over the manifests and write it (plus a small
/// JSON summary) under the output directory.
pub fn cmd_index(manifests: &[PathBuf], out: &Path) -> Result<()> {
    let snapshots: Vec<Snapshot> = manifests
        .iter()
        .map(|p| load_snapshot(&load_manifest(p)?))
        .collect::<Result<_>>()?;
    let index = TemporalIndex::build(&snapshots)?;
    std::fs::create_dir_all(out)?;
    let mut file = std::fs::File::create(out.join("index.cpix"))?;
    index.export(&mut file)?;
    let summary = serde_json::json!({
        "years": index.years(),
        "per_year_distinct": index.per_year_sizes(),
        "union_size": index.len(),
    });
    std::fs::write(
        out.join("index_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

/// Sequences added to and removed from the corpus between two indexed
/// years, written as JSON.
pub fn cmd_diff(manifests: &[PathBuf], y1: i32, y2: i32, out: &Path) -> Result<()> {
    let snapshots: Vec<Snapshot> = manifests
        .iter()
        .map(|p| load_snapshot(&load_manifest(p)?))
        .collect::<Result<_>>()?;
    let index = TemporalIndex::build(&snapshots)?;
    let a: std::collections::HashSet<String> = index.year_sequences(y1)?.into_iter().collect();
    let b: std::collections::HashSet<String> = index.year_sequences(y2)?.into_iter().collect();
    let mut added: Vec<&String> = b.difference(&a).collect();
    let mut removed: Vec<&String> = a.difference(&b).collect();
    added.sort();
    removed.sort();
    std::fs::create_dir_all(out)?;
    let report = serde_json::json!({
        "y1": y1,
        "y2": y2,
        "added_count": added.len(),
        "removed_count": removed.len(),
        "added": added,
        "removed": removed,
    });
    std::fs::write(
        out.join(format!("diff_{y1}_{y2}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(())
}

/// Write the intersection of two years as a JSONL release (the grid input
/// of the filter experiment). With y1 == y2 the full snapshot passes
/// through with its original identifiers.
pub fn cmd_filter(manifests: &[PathBuf], y1: i32, y2: i32, out: &Path) -> Result<()> {
    let snapshots: Vec<Snapshot> = manifests
        .iter()
        .map(|p| load_snapshot(&load_manifest(p)?))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("intersection_{y1}_{y2}.jsonl"));
    if y1 == y2 {
        let snap = snapshots
            .iter()
            .find(|s| s.year == y1)
            .ok_or_else(|| Error::Argument(format!("year {y1} not in manifests")))?;
        let mut file = std::fs::File::create(path)?;
        serialize_jsonl(snap, &mut file)?;
        return Ok(());
    }
    let index = TemporalIndex::build(&snapshots)?;
    let mut inter: Vec<String> = index.intersection(y1, y2)?.into_iter().collect();
    inter.sort();
    let records: Vec<SequenceRecord> = inter
        .into_iter()
        .map(|sequence| SequenceRecord {
            identifier: format!("x{}", &sequence_digest(&sequence)[..12]),
            sequence,
            year: y2,
        })
        .collect();
    let snap = Snapshot {
        year: y2,
        counts: crate::corpus::SnapshotCounts {
            raw: records.len(),
            deduplicated: records.len(),
        },
        records,
    };
    let mut file = std::fs::File::create(path)?;
    serialize_jsonl(&snap, &mut file)?;
    Ok(())
}

/// Generate a synthetic benchmark on disk: yearly JSONL releases with
/// manifests, provenance labels, and the held-out validation set.
pub fn cmd_synth(spec: &TimelineSpec, out: &Path) -> Result<()> {
    let grammar = default_grammar(spec.seed)?;
    let bench = generate_benchmark(&grammar, spec)?;
    write_benchmark(&bench, out)?;
    Ok(())
}

/// Evaluate one saved checkpoint over a benchmark's validation material.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let bench = load_benchmark(&config.benchmark)?;
    let ckpt = load_checkpoint(checkpoint, Some(&config.model))?;
    let assays = eval_assays(&config.eval, bench.grammar.as_ref(), config.seed)?;
    let mut table = MetricTable::default();
    table.set_orientation("perplexity", false);
    table.set_orientation("recovery", true);
    table.set_orientation("spearman", true);
    let index = TemporalIndex::build(&bench.snapshots)?;
    let year = *index.years().last().expect("nonempty benchmark");
    let name = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let params = match &ckpt.slow_params {
        Some(slow) => slow,
        None => &ckpt.params,
    };
    evaluate_into(
        &mut table, &name, year, params, &bench, &assays, &config.eval, &config.run,
    )?;
    std::fs::create_dir_all(out)?;
    table.write_csv(&out.join("eval_metrics.csv"))?;
    Ok(())
}

/// Win-rate aggregation over a metric table produced by `train`.
pub fn cmd_winrate(metrics_csv: &Path, out: &Path) -> Result<()> {
    let table = MetricTable::read_csv(metrics_csv)?;
    let report = win_rate(&table)?;
    std::fs::create_dir_all(out)?;
    let per_year: BTreeMap<String, f64> = report
        .per_year
        .iter()
        .map(|((m, y), &v)| (format!("{m}:{y}"), v))
        .collect();
    let json = serde_json::json!({
        "overall": report.overall,
        "per_year": per_year,
        "skipped_cells": report.skipped_cells,
    });
    std::fs::write(out.join("win_rates.json"), serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

/// Per-sequence statistics for each release; with exactly two releases a
/// two-sample QQ table per statistic is also written.
pub fn cmd_stats(manifests: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut all_stats: Vec<Vec<(String, crate::eval::StatRow)>> = Vec::new();
    for path in manifests {
        let snap = load_snapshot(&load_manifest(path)?)?;
        let rows: Vec<(String, crate::eval::StatRow)> = snap
            .records
            .iter()
            .map(|r| (r.identifier.clone(), seq_stats(&r.sequence)))
            .collect();
        let mut csv = String::from("id,length,aromaticity,longest_repeat_ratio\n");
        for (id, s) in &rows {
            csv.push_str(&format!(
                "{id},{},{},{}\n",
                s.length, s.aromaticity, s.longest_repeat_ratio
            ));
        }
        std::fs::write(out.join(format!("stats_{}.csv", snap.year)), csv)?;
        all_stats.push(rows);
    }
    if all_stats.len() == 2 {
        let mut csv = String::from("stat,q_a,q_b\n");
        for (name, pick) in [
            ("length", 0usize),
            ("aromaticity", 1),
            ("longest_repeat_ratio", 2),
        ] {
            let extract = |rows: &[(String, crate::eval::StatRow)]| -> Vec<f64> {
                rows.iter()
                    .map(|(_, s)| match pick {
                        0 => s.length as f64,
                        1 => s.aromaticity,
                        _ => s.longest_repeat_ratio,
                    })
                    .collect()
            };
            let a = extract(&all_stats[0]);
            let b = extract(&all_stats[1]);
            for (qa, qb) in qq_quantiles(&a, &b, 21)? {
                csv.push_str(&format!("{name},{qa},{qb}\n"));
            }
        }
        std::fs::write(out.join("qq.csv"), csv)?;
    }
    Ok(())
}
