//! Continual-learning update rules and baselines, expressed as per-step
//! loss composition, weight-space interventions, and task-boundary hooks
//! over the trainer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fill_init, Batch, ModelConfig, ParameterSet, Tensor, Vocabulary};
use crate::rng::stream;
use crate::temporal::TemporalIndex;
use crate::trainer::{make_masked_batch, Checkpoint, OrderedSource, TaskRunConfig, TaskSources};

/// Tuned values from the reference hyperparameter search, used as defaults
/// when a spec omits a parameter.
pub const SELECTED_LAMBDA_REPLAY: f64 = 0.357495045651384;
pub const SELECTED_LAMBDA_HT_MOM: f64 = 0.931247906596137;
pub const SELECTED_RESET_FREQ: u64 = 559;
pub const SELECTED_LAMBDA_ASC: f64 = 0.0150798214665966;
pub const SELECTED_LAMBDA_RAND: f64 = 0.00176366392582128;
pub const SELECTED_LAMBDA_SHRINK: f64 = 0.310430229773085;
pub const SELECTED_LAMBDA_NOISE: f64 = 0.713412708958246;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Sequential,
    Replay,
    ShrinkPerturb,
    HareTortoise,
    GradAscent,
    RandomLabels,
    Joint,
    SingleYearIncremental,
    SingleYearMatched,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Sequential => "sequential",
            MethodKind::Replay => "replay",
            MethodKind::ShrinkPerturb => "shrink_perturb",
            MethodKind::HareTortoise => "hare_tortoise",
            MethodKind::GradAscent => "grad_ascent",
            MethodKind::RandomLabels => "random_labels",
            MethodKind::Joint => "joint",
            MethodKind::SingleYearIncremental => "single_year_incremental",
            MethodKind::SingleYearMatched => "single_year_matched",
        }
    }
}

/// Optional method hyperparameters; only those a kind uses are consulted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MethodParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_replay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_shrink: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_ht_mom: Option<f64>,
    /// None means never reset (the slow weights become a pure EMA).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_reset_freq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_asc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_rand: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    #[serde(default)]
    pub params: MethodParams,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        MethodSpec {
            kind,
            params: MethodParams::default(),
        }
    }

    /// The kind with its tuned hyperparameters filled in.
    pub fn selected(kind: MethodKind) -> Self {
        let mut spec = MethodSpec::new(kind);
        match kind {
            MethodKind::Replay => spec.params.lambda_replay = Some(SELECTED_LAMBDA_REPLAY),
            MethodKind::ShrinkPerturb => {
                spec.params.lambda_shrink = Some(SELECTED_LAMBDA_SHRINK);
                spec.params.lambda_noise = Some(SELECTED_LAMBDA_NOISE);
            }
            MethodKind::HareTortoise => {
                spec.params.lambda_ht_mom = Some(SELECTED_LAMBDA_HT_MOM);
                spec.params.lambda_reset_freq = Some(SELECTED_RESET_FREQ);
            }
            MethodKind::GradAscent => spec.params.lambda_asc = Some(SELECTED_LAMBDA_ASC),
            MethodKind::RandomLabels => spec.params.lambda_rand = Some(SELECTED_LAMBDA_RAND),
            _ => {}
        }
        spec
    }

    pub fn lambda_replay(&self) -> f64 {
        self.params.lambda_replay.unwrap_or(SELECTED_LAMBDA_REPLAY)
    }

    pub fn lambda_shrink(&self) -> f64 {
        self.params.lambda_shrink.unwrap_or(SELECTED_LAMBDA_SHRINK)
    }

    pub fn lambda_noise(&self) -> f64 {
        self.params.lambda_noise.unwrap_or(SELECTED_LAMBDA_NOISE)
    }

    pub fn lambda_ht_mom(&self) -> f64 {
        self.params.lambda_ht_mom.unwrap_or(SELECTED_LAMBDA_HT_MOM)
    }

    pub fn lambda_reset_freq(&self) -> Option<u64> {
        self.params.lambda_reset_freq
    }

    pub fn lambda_asc(&self) -> f64 {
        self.params.lambda_asc.unwrap_or(SELECTED_LAMBDA_ASC)
    }

    pub fn lambda_rand(&self) -> f64 {
        self.params.lambda_rand.unwrap_or(SELECTED_LAMBDA_RAND)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0,1], got {v}")))
            }
        };
        unit("lambda_replay", self.lambda_replay())?;
        unit("lambda_asc", self.lambda_asc())?;
        unit("lambda_rand", self.lambda_rand())?;
        unit("lambda_shrink", self.lambda_shrink())?;
        if self.lambda_noise() < 0.0 || !self.lambda_noise().is_finite() {
            return Err(Error::Config("lambda_noise must be nonnegative".into()));
        }
        let mom = self.lambda_ht_mom();
        if !(0.5..1.0).contains(&mom) {
            return Err(Error::Config(format!(
                "lambda_ht_mom must lie in [0.5,1), got {mom}"
            )));
        }
        if self.lambda_reset_freq() == Some(0) {
            return Err(Error::Config("lambda_reset_freq must be at least 1".into()));
        }
        Ok(())
    }
}

/// Auxiliary batches a method may consume alongside the current-task batch.
#[derive(Debug, Default)]
pub struct AuxBatches {
    pub replay: Option<Batch>,
    pub forget: Option<Batch>,
}

/// Resample the targets at masked positions uniformly over the 20 canonical
/// residues (special tokens and X excluded).
pub fn randomize_targets(batch: &mut Batch, rng: &mut ChaCha8Rng) {
    for i in 0..batch.targets.len() {
        if batch.mask_positions[i] {
            batch.targets[i] = Vocabulary::FIRST_RESIDUE + rng.gen_range(0..20u16);
        }
    }
}

/// Combine the current batch and any auxiliaries into weighted CE terms.
/// Methods whose auxiliary source is unavailable (first task, or an empty
/// forget set) degrade to the plain current-task term.
pub fn compose_loss(
    method: &MethodSpec,
    b_i: Batch,
    mut aux: AuxBatches,
    random_label_rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, Batch)>> {
    method.validate()?;
    match method.kind {
        MethodKind::Replay => match aux.replay.take() {
            Some(b_r) => {
                let lam = method.lambda_replay();
                Ok(vec![(1.0 - lam, b_i), (lam, b_r)])
            }
            None => Ok(vec![(1.0, b_i)]),
        },
        MethodKind::GradAscent => match aux.forget.take() {
            Some(b_f) => Ok(vec![(1.0, b_i), (-method.lambda_asc(), b_f)]),
            None => Ok(vec![(1.0, b_i)]),
        },
        MethodKind::RandomLabels => match aux.forget.take() {
            Some(mut b_f) => {
                randomize_targets(&mut b_f, random_label_rng);
                Ok(vec![(1.0, b_i), (method.lambda_rand(), b_f)])
            }
            None => Ok(vec![(1.0, b_i)]),
        },
        _ => Ok(vec![(1.0, b_i)]),
    }
}

/// Scale weights toward zero and inject noise drawn from each tensor's own
/// initialization distribution: weight matrices from the truncated normal,
/// norm gains toward one, biases toward zero. Exactly neutral parameters
/// leave the weights untouched (bit for bit).
pub fn shrink_perturb(
    params: &mut ParameterSet<f32>,
    lambda_shrink: f64,
    lambda_noise: f64,
    init_seed: u64,
) {
    if lambda_shrink == 1.0 && lambda_noise == 0.0 {
        return;
    }
    let ls = lambda_shrink as f32;
    let ln = lambda_noise as f32;
    for (i, named) in params.tensors.iter_mut().enumerate() {
        let mut noise: Tensor<f32> = Tensor::zeros(named.tensor.rows, named.tensor.cols);
        let mut rng = stream(init_seed, "shrink_noise", &[i as u64]);
        fill_init(&mut noise, named.init, &mut rng);
        for (x, p) in named.tensor.data.iter_mut().zip(&noise.data) {
            *x = ls * *x + ln * p;
        }
    }
}

/// One hare-and-tortoise step after a fast-weight update: the slow weights
/// track the fast ones by exponential moving average, and every
/// `reset_freq` steps the fast weights snap back to the slow ones.
pub fn hare_tortoise_step(
    slow: &mut ParameterSet<f32>,
    fast: &mut ParameterSet<f32>,
    momentum: f64,
    reset_freq: Option<u64>,
    step: u64,
) {
    let mom = momentum as f32;
    for (s, f) in slow.tensors.iter_mut().zip(&fast.tensors) {
        for (sv, fv) in s.tensor.data.iter_mut().zip(&f.tensor.data) {
            *sv = mom * *sv + (1.0 - mom) * fv;
        }
    }
    if let Some(freq) = reset_freq {
        if (step + 1) % freq == 0 {
            *fast = slow.clone();
        }
    }
}

/// Make sure hare-and-tortoise slow weights exist before the first update
/// of a run; they start as a copy of the fast weights.
pub fn ensure_slow_initialized(
    method: &MethodSpec,
    fast: &ParameterSet<f32>,
    slow: &mut Option<ParameterSet<f32>>,
) {
    if method.kind == MethodKind::HareTortoise && slow.is_none() {
        *slow = Some(fast.clone());
    }
}

/// Method hook after each optimizer step.
pub fn post_update(
    method: &MethodSpec,
    fast: &mut ParameterSet<f32>,
    slow: &mut Option<ParameterSet<f32>>,
    step: u64,
) {
    if method.kind == MethodKind::HareTortoise {
        ensure_slow_initialized(method, fast, slow);
        let slow_params = slow.as_mut().expect("slow weights initialized");
        hare_tortoise_step(
            slow_params,
            fast,
            method.lambda_ht_mom(),
            method.lambda_reset_freq(),
            step,
        );
    }
}

/// The weights a method is evaluated on: slow (tortoise) weights when they
/// exist, fast weights otherwise.
pub fn eval_params<'a>(method: &MethodSpec, ckpt: &'a Checkpoint) -> &'a ParameterSet<f32> {
    if method.kind == MethodKind::HareTortoise {
        if let Some(slow) = &ckpt.slow_params {
            return slow;
        }
    }
    &ckpt.params
}

/// Build the data sources for task `task_idx` (zero-based over the index's
/// years). The current source iterates this year's release; replay samples
/// earlier years by multiplicity; forget samples sequences that were
/// present before but dropped from this year; joint iterates the union of
/// every year. Methods whose history is empty degrade to sequential.
pub fn build_task_sources(
    method: &MethodSpec,
    index: &TemporalIndex,
    task_idx: usize,
) -> Result<TaskSources> {
    let years = index.years();
    let t = *years
        .get(task_idx)
        .ok_or_else(|| Error::Argument(format!("task {task_idx} beyond final year")))?;
    let current_seqs = match method.kind {
        MethodKind::Joint => index.union_all(),
        _ => index.year_sequences(t)?,
    };
    let current = OrderedSource::new(current_seqs, "current")?;
    let replay = if method.kind == MethodKind::Replay && task_idx > 0 {
        Some(index.replay_distribution(t)?)
    } else {
        None
    };
    let forget = if matches!(method.kind, MethodKind::GradAscent | MethodKind::RandomLabels)
        && task_idx > 0
    {
        let set = index.forget_set(t)?;
        // First-seen index order keeps the sampler deterministic.
        let ordered: Vec<String> = index
            .sequences()
            .filter(|s| set.contains(*s))
            .map(str::to_string)
            .collect();
        if ordered.is_empty() {
            eprintln!(
                "warning: forget set for year {t} is empty; {} runs as sequential",
                method.kind.name()
            );
            None
        } else {
            Some(ordered)
        }
    } else {
        None
    };
    Ok(TaskSources {
        current,
        replay,
        forget,
    })
}

/// Assemble the weighted batches for one optimizer step. Every random
/// choice is drawn from a stream derived from (run seed, task, step), so
/// the step is reproducible in isolation.
pub fn assemble_step(
    method: &MethodSpec,
    sources: &mut TaskSources,
    config: &ModelConfig,
    run: &TaskRunConfig,
    run_seed: u64,
    task: u64,
    step: u64,
) -> Result<Vec<(f64, Batch)>> {
    let cur_seqs = sources.current.batch_at(run_seed, task, step, run.batch_size);
    let b_i = make_masked_batch(
        &cur_seqs,
        config,
        run.mask_rate,
        &mut stream(run_seed, "mask", &[task, step, 0]),
    )?;
    let mut aux = AuxBatches::default();
    match method.kind {
        MethodKind::Replay if sources.replay.is_some() => {
            let seqs = sources.sample_replay(run_seed, task, step, run.batch_size);
            aux.replay = Some(make_masked_batch(
                &seqs,
                config,
                run.mask_rate,
                &mut stream(run_seed, "mask", &[task, step, 1]),
            )?);
        }
        MethodKind::GradAscent | MethodKind::RandomLabels if sources.forget.is_some() => {
            let seqs = sources.sample_forget(run_seed, task, step, run.batch_size);
            aux.forget = Some(make_masked_batch(
                &seqs,
                config,
                run.mask_rate,
                &mut stream(run_seed, "mask", &[task, step, 1]),
            )?);
        }
        _ => {}
    }
    compose_loss(
        method,
        b_i,
        aux,
        &mut stream(run_seed, "random_labels", &[task, step]),
    )
}

/// Transition from the previous task's pre-decay checkpoint to the start of
/// the next: restore the stable-phase weights, apply shrink-and-perturb if
/// configured, re-initialize the slow weights, and rewind the schedule.
pub fn task_boundary(
    method: &MethodSpec,
    pre_decay: &Checkpoint,
    reset_optimizer: bool,
) -> Checkpoint {
    let mut c = pre_decay.clone();
    c.task += 1;
    c.step = 0;
    if reset_optimizer {
        c.opt = crate::trainer::OptimizerState::new(&c.params);
    }
    if method.kind == MethodKind::ShrinkPerturb {
        let boundary_seed = c.run_seed ^ c.task;
        shrink_perturb(
            &mut c.params,
            method.lambda_shrink(),
            method.lambda_noise(),
            boundary_seed,
        );
    }
    if method.kind == MethodKind::HareTortoise {
        c.slow_params = Some(c.params.clone());
    }
    c
}
