//! Masking, AdamW, the warmup-stable-decay learning-rate schedule, the
//! pre-decay checkpoint-reset transition protocol, and step accounting.
//!
//! A run's whole random behavior is a function of (run seed, task, step), so
//! a checkpoint only needs those counters; reloading one and continuing
//! reproduces the uninterrupted trajectory bit for bit.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::{self, MethodSpec};
use crate::model::{gradient, tokenize, Batch, LossTerm, ModelConfig, ParameterSet, Vocabulary};
use crate::rng::stream;
use crate::temporal::ReplayDistribution;

/// How the post-stable phase anneals the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayStyle {
    /// Constant after warmup until `stable_until`, then linear to zero.
    #[default]
    Wsd,
    /// Cosine annealing from the end of warmup to zero, for A/B comparison
    /// runs; `stable_until` still marks where the resumable checkpoint is
    /// taken.
    Cosine,
}

/// Piecewise-linear warmup-stable-decay schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WSDSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub stable_until: u64,
    pub total_steps: u64,
    #[serde(default)]
    pub style: DecayStyle,
}

impl WSDSchedule {
    /// Full-scale constants: 0 to 5e-4 over 10k steps, constant to 90k,
    /// linear to 0 at 100k.
    pub fn full_scale() -> Self {
        WSDSchedule {
            peak_lr: 5e-4,
            warmup_steps: 10_000,
            stable_until: 90_000,
            total_steps: 100_000,
            style: DecayStyle::Wsd,
        }
    }

    /// Desk defaults preserving the full-scale shape proportionally.
    pub fn desk() -> Self {
        WSDSchedule {
            peak_lr: 5e-4,
            warmup_steps: 200,
            stable_until: 1_800,
            total_steps: 2_000,
            style: DecayStyle::Wsd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.warmup_steps == 0
            || self.warmup_steps > self.stable_until
            || self.stable_until > self.total_steps
        {
            return Err(Error::Config(
                "schedule requires 0 < warmup <= stable_until <= total".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at an absolute step in [0, total]. Continuous at both
    /// knots.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Argument(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        match self.style {
            DecayStyle::Wsd => {
                if step <= self.stable_until {
                    Ok(self.peak_lr)
                } else {
                    let remaining = (self.total_steps - step) as f64;
                    let span = (self.total_steps - self.stable_until) as f64;
                    Ok(self.peak_lr * remaining / span)
                }
            }
            DecayStyle::Cosine => {
                let span = (self.total_steps - self.warmup_steps) as f64;
                let progress = (step - self.warmup_steps) as f64 / span;
                Ok(0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
            }
        }
    }

    /// Effective (pre-decay) gradient steps accumulated when task `n`
    /// (1-based) begins: decay phases are discarded, so only `stable_until`
    /// steps of each earlier task count.
    pub fn effective_steps_entering(&self, task_n: u64) -> u64 {
        task_n.saturating_sub(1) * self.stable_until
    }

    /// Step budget for the single-year matched baseline at task `n`: the
    /// stable steps of every earlier task plus one full schedule.
    pub fn matched_budget(&self, task_n: u64) -> u64 {
        self.effective_steps_entering(task_n) + self.total_steps
    }
}

/// Per-task run settings shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRunConfig {
    pub schedule: WSDSchedule,
    pub batch_size: usize,
    pub mask_rate: f64,
    /// Global gradient-norm ceiling; None disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Seed for the fixed evaluation masking, independent of the run seed.
    pub eval_mask_seed: u64,
}

impl Default for TaskRunConfig {
    fn default() -> Self {
        TaskRunConfig {
            schedule: WSDSchedule::desk(),
            batch_size: 64,
            mask_rate: 0.15,
            grad_clip_norm: Some(1.0),
            eval_mask_seed: 7_777,
        }
    }
}

impl TaskRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config("mask_rate must lie in (0,1)".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("grad_clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_task(&self) -> u64 {
        self.schedule.total_steps
    }
}

/// Mask each residue position independently; selected positions become
/// <mask> with the original token recorded as target. Per sequence at least
/// one mask is forced: one full resample, then a direct pick. Pad, <bos>,
/// <eos> and X are never selected.
pub fn apply_masking(batch: &mut Batch, mask_rate: f64, rng: &mut ChaCha8Rng) {
    let rate = mask_rate.clamp(0.0, 0.999);
    for s in 0..batch.n_seqs {
        let row = s * batch.len..(s + 1) * batch.len;
        let maskable: Vec<usize> = row
            .clone()
            .filter(|&i| Vocabulary::is_maskable(batch.tokens[i]))
            .collect();
        if maskable.is_empty() {
            continue;
        }
        let mut chosen: Vec<usize> = Vec::new();
        for _attempt in 0..2 {
            chosen = maskable
                .iter()
                .copied()
                .filter(|_| rng.gen::<f64>() < rate)
                .collect();
            if !chosen.is_empty() {
                break;
            }
        }
        if chosen.is_empty() {
            chosen.push(maskable[rng.gen_range(0..maskable.len())]);
        }
        for i in chosen {
            batch.targets[i] = batch.tokens[i];
            batch.tokens[i] = Vocabulary::MASK;
            batch.mask_positions[i] = true;
        }
    }
}

/// Tokenize sequences into one padded batch and apply training masking.
pub fn make_masked_batch(
    seqs: &[String],
    config: &ModelConfig,
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let rows: Vec<Vec<u16>> = seqs.iter().map(|s| tokenize(s, config)).collect();
    let mut batch = Batch::from_token_rows(&rows)?;
    apply_masking(&mut batch, mask_rate, rng);
    Ok(batch)
}

/// AdamW moments and constants. Moments share the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParameterSet<f32>,
    pub v: ParameterSet<f32>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet<f32>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One decoupled-weight-decay AdamW update with bias-corrected moments.
/// Decay is skipped for norm gains and biases (the tensors flagged no-decay
/// at initialization). Clipping rescales the whole gradient when its global
/// L2 norm exceeds the ceiling.
pub fn adamw_step(
    params: &mut ParameterSet<f32>,
    grads: &ParameterSet<f32>,
    state: &mut OptimizerState,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::Argument("gradient shape mismatch".into()));
    }
    let mut sq_norm = 0.0f64;
    for g in grads.flat_iter() {
        sq_norm += (g as f64) * (g as f64);
    }
    let norm = sq_norm.sqrt();
    let scale = match clip {
        Some(c) if norm > c => (c / norm) as f32,
        _ => 1.0f32,
    };
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let b1 = state.beta1 as f32;
    let b2 = state.beta2 as f32;
    let inv_bc1 = (1.0 / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = state.eps as f32;
    let lr32 = lr as f32;
    let wd = (lr * state.weight_decay) as f32;
    for ti in 0..params.tensors.len() {
        let decay = params.tensors[ti].decay;
        let theta = &mut params.tensors[ti].tensor.data;
        let g_t = &grads.tensors[ti].tensor.data;
        let m_t = &mut state.m.tensors[ti].tensor.data;
        let v_t = &mut state.v.tensors[ti].tensor.data;
        for j in 0..theta.len() {
            let g = g_t[j] * scale;
            m_t[j] = b1 * m_t[j] + (1.0 - b1) * g;
            v_t[j] = b2 * v_t[j] + (1.0 - b2) * g * g;
            let m_hat = m_t[j] * inv_bc1;
            let v_hat = v_t[j] * inv_bc2;
            let mut x = theta[j] - lr32 * m_hat / (v_hat.sqrt() + eps);
            if decay {
                x -= wd * theta[j];
            }
            if !x.is_finite() {
                return Err(Error::Numeric {
                    context: format!("adamw:{}", params.tensors[ti].name),
                    msg: "non-finite parameter update".into(),
                });
            }
            theta[j] = x;
        }
    }
    Ok(())
}

/// Everything needed to continue a run exactly: weights, optimizer moments,
/// schedule position, the seed counters the per-step streams derive from,
/// and method state (the slow weights of hare-and-tortoise).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet<f32>,
    pub opt: OptimizerState,
    pub run_seed: u64,
    /// Zero-based task index.
    pub task: u64,
    /// Next step to execute within the task schedule.
    pub step: u64,
    pub slow_params: Option<ParameterSet<f32>>,
}

impl Checkpoint {
    /// Fresh run state at task 0, step 0.
    pub fn fresh(config: &ModelConfig, run_seed: u64) -> Result<Self> {
        let params = ParameterSet::<f32>::init(config, run_seed)?;
        let opt = OptimizerState::new(&params);
        Ok(Checkpoint {
            params,
            opt,
            run_seed,
            task: 0,
            step: 0,
            slow_params: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPLM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

/// Serialize a checkpoint: magic, version, length-prefixed config JSON,
/// then parameter tensors as little-endian f32 in layout order, then the
/// optimizer, rng-counter and method-state blobs.
pub fn checkpoint_bytes(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(c.config()).expect("config serializes");
    put_blob(&mut out, &config_json);

    let mut tensors = Vec::new();
    c.params.write_tensors(&mut tensors);
    put_blob(&mut out, &tensors);

    let mut opt = Vec::new();
    opt.extend_from_slice(&c.opt.beta1.to_le_bytes());
    opt.extend_from_slice(&c.opt.beta2.to_le_bytes());
    opt.extend_from_slice(&c.opt.eps.to_le_bytes());
    opt.extend_from_slice(&c.opt.weight_decay.to_le_bytes());
    opt.extend_from_slice(&c.opt.step.to_le_bytes());
    c.opt.m.write_tensors(&mut opt);
    c.opt.v.write_tensors(&mut opt);
    put_blob(&mut out, &opt);

    let mut rng_blob = Vec::new();
    rng_blob.extend_from_slice(&c.run_seed.to_le_bytes());
    rng_blob.extend_from_slice(&c.task.to_le_bytes());
    rng_blob.extend_from_slice(&c.step.to_le_bytes());
    put_blob(&mut out, &rng_blob);

    let mut method_blob = Vec::new();
    match &c.slow_params {
        Some(slow) => {
            method_blob.push(1u8);
            slow.write_tensors(&mut method_blob);
        }
        None => method_blob.push(0u8),
    }
    put_blob(&mut out, &method_blob);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(r.blob()?)?;
    config.validate()?;
    let params = ParameterSet::<f32>::read_tensors(&config, r.blob()?)?;

    let opt_blob = r.blob()?;
    let mut o = Reader {
        bytes: opt_blob,
        pos: 0,
    };
    let beta1 = o.f64()?;
    let beta2 = o.f64()?;
    let eps = o.f64()?;
    let weight_decay = o.f64()?;
    let step = o.u64()?;
    let tensor_bytes = params.total_count() * 4;
    let m = ParameterSet::<f32>::read_tensors(&config, o.take(tensor_bytes)?)?;
    let v = ParameterSet::<f32>::read_tensors(&config, o.take(tensor_bytes)?)?;

    let rng_blob = r.blob()?;
    let mut g = Reader {
        bytes: rng_blob,
        pos: 0,
    };
    let run_seed = g.u64()?;
    let task = g.u64()?;
    let sched_step = g.u64()?;

    let method_blob = r.blob()?;
    let slow_params = match method_blob.first() {
        Some(0) => None,
        Some(1) => Some(ParameterSet::<f32>::read_tensors(
            &config,
            &method_blob[1..],
        )?),
        _ => return Err(Error::Integrity("malformed method-state blob".into())),
    };

    Ok(Checkpoint {
        params,
        opt: OptimizerState {
            m,
            v,
            step,
            beta1,
            beta2,
            eps,
            weight_decay,
        },
        run_seed,
        task,
        step: sched_step,
        slow_params,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(c))?;
    Ok(())
}

/// Load a checkpoint; when `expected` is given, refuse if the stored config
/// digest differs.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let c = checkpoint_from_bytes(&bytes)?;
    if let Some(e) = expected {
        if e.digest() != c.config().digest() {
            return Err(Error::Integrity(format!(
                "checkpoint config digest {} does not match expected {}",
                c.config().digest(),
                e.digest()
            )));
        }
    }
    Ok(c)
}

/// Cycles a fixed sequence set, reshuffled each epoch with a seed derived
/// from (run seed, task, epoch). The batch at a given (task, step) is a pure
/// function of those coordinates, so interrupted runs resume exactly.
#[derive(Debug, Clone)]
pub struct OrderedSource {
    pub seqs: Vec<String>,
    label: String,
    perm_cache: HashMap<(u64, u64), Vec<u32>>,
}

impl OrderedSource {
    pub fn new(seqs: Vec<String>, label: &str) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Argument(format!("empty data source '{label}'")));
        }
        Ok(OrderedSource {
            seqs,
            label: label.to_string(),
            perm_cache: HashMap::new(),
        })
    }

    fn permutation(&mut self, run_seed: u64, task: u64, epoch: u64) -> &Vec<u32> {
        let n = self.seqs.len();
        let label = self.label.clone();
        self.perm_cache.entry((task, epoch)).or_insert_with(|| {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            perm.shuffle(&mut stream(run_seed, &format!("epoch:{label}"), &[task, epoch]));
            perm
        })
    }

    pub fn batch_at(
        &mut self,
        run_seed: u64,
        task: u64,
        step: u64,
        batch_size: usize,
    ) -> Vec<String> {
        let n = self.seqs.len() as u64;
        let start = step * batch_size as u64;
        (0..batch_size as u64)
            .map(|j| {
                let global = start + j;
                let idx = self.permutation(run_seed, task, global / n)[(global % n) as usize];
                self.seqs[idx as usize].clone()
            })
            .collect()
    }
}

/// Per-task data: the current release plus optional replay and forget-set
/// samplers built by the method.
#[derive(Debug, Clone)]
pub struct TaskSources {
    pub current: OrderedSource,
    pub replay: Option<ReplayDistribution>,
    pub forget: Option<Vec<String>>,
}

impl TaskSources {
    pub fn sample_replay(&self, run_seed: u64, task: u64, step: u64, n: usize) -> Vec<String> {
        let dist = self.replay.as_ref().expect("replay source present");
        dist.sample(&mut stream(run_seed, "replay", &[task, step]), n)
    }

    pub fn sample_forget(&self, run_seed: u64, task: u64, step: u64, n: usize) -> Vec<String> {
        let pool = self.forget.as_ref().expect("forget source present");
        let mut rng = stream(run_seed, "forget", &[task, step]);
        (0..n)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect()
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("step,split,loss,lr,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.split, r.loss, r.lr, r.wall_ms
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Advance a checkpoint by `n_steps` within its current task, appending one
/// log row per step. The loss recorded is the composed (method-weighted)
/// objective.
pub fn advance(
    ckpt: &mut Checkpoint,
    sources: &mut TaskSources,
    method: &MethodSpec,
    run: &TaskRunConfig,
    n_steps: u64,
    log: &mut Vec<MetricsRow>,
) -> Result<()> {
    run.validate()?;
    method.validate()?;
    let total = run.schedule.total_steps;
    if ckpt.step + n_steps > total {
        return Err(Error::Argument(format!(
            "cannot advance {n_steps} steps from {}: schedule ends at {total}",
            ckpt.step
        )));
    }
    let config = ckpt.config().clone();
    for _ in 0..n_steps {
        let t0 = Instant::now();
        let s = ckpt.step;
        let lr = run.schedule.lr_at(s + 1)?;
        let weighted =
            methods::assemble_step(method, sources, &config, run, ckpt.run_seed, ckpt.task, s)?;
        let terms: Vec<LossTerm<'_>> = weighted
            .iter()
            .map(|(w, b)| LossTerm {
                weight: *w,
                batch: b,
            })
            .collect();
        let (loss, grads) = gradient(&ckpt.params, &terms)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                context: format!("task {} step {s}", ckpt.task),
                msg: "non-finite training loss".into(),
            });
        }
        adamw_step(&mut ckpt.params, &grads, &mut ckpt.opt, lr, run.grad_clip_norm)?;
        methods::post_update(method, &mut ckpt.params, &mut ckpt.slow_params, s);
        ckpt.step += 1;
        log.push(MetricsRow {
            step: ckpt.task * total + ckpt.step,
            split: "train".into(),
            loss,
            lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
    }
    Ok(())
}

/// Result of one task: the stable-phase checkpoint the next task resumes
/// from, the fully decayed checkpoint used for evaluation only, and the
/// step log.
pub struct TaskOutcome {
    pub pre_decay: Checkpoint,
    pub decayed: Checkpoint,
    pub log: Vec<MetricsRow>,
}

/// Run one task from its start (or a mid-stable resume point) to the end of
/// the schedule. The pre-decay snapshot is taken at `stable_until`; decay
/// continues from a copy so the returned `pre_decay` is untouched by it.
pub fn train_task(
    mut ckpt: Checkpoint,
    sources: &mut TaskSources,
    method: &MethodSpec,
    run: &TaskRunConfig,
) -> Result<TaskOutcome> {
    run.validate()?;
    let stable = run.schedule.stable_until;
    if ckpt.step > stable {
        return Err(Error::Argument(
            "task must resume at or before the pre-decay point".into(),
        ));
    }
    let mut log = Vec::new();
    let to_stable = stable - ckpt.step;
    advance(&mut ckpt, sources, method, run, to_stable, &mut log)?;
    let pre_decay = ckpt.clone();
    advance(
        &mut ckpt,
        sources,
        method,
        run,
        run.schedule.total_steps - stable,
        &mut log,
    )?;
    Ok(TaskOutcome {
        pre_decay,
        decayed: ckpt,
        log,
    })
}
