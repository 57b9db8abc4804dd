//! Experiment configuration: one JSON document describing the benchmark
//! source, model and run settings, the method list, the evaluation suite,
//! and explicit seeds. All randomness flows from the root seed through
//! named sub-streams, so components can be re-seeded independently.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::methods::MethodSpec;
use crate::model::ModelConfig;
use crate::synthgen::TimelineSpec;
use crate::trainer::TaskRunConfig;

/// Where the task sequence comes from: on-disk yearly releases, or a
/// synthetic timeline generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum BenchmarkSource {
    Manifests {
        /// One snapshot manifest per year, oldest first.
        manifests: Vec<PathBuf>,
        /// Held-out sequences for evaluation (FASTA or JSONL manifest).
        validation_manifest: PathBuf,
    },
    Synthetic { spec: TimelineSpec },
}

/// Which metric families to run after each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSelection {
    #[serde(default = "default_true")]
    pub perplexity: bool,
    #[serde(default = "default_true")]
    pub recovery: bool,
    #[serde(default)]
    pub mutation_ranking: bool,
    /// Assays generated per mutation-ranking evaluation.
    #[serde(default = "default_n_assays")]
    pub n_assays: usize,
}

fn default_true() -> bool {
    true
}

fn default_n_assays() -> usize {
    10
}

impl Default for EvalSelection {
    fn default() -> Self {
        EvalSelection {
            perplexity: true,
            recovery: true,
            mutation_ranking: false,
            n_assays: default_n_assays(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub run: TaskRunConfig,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub eval: EvalSelection,
    /// Root seed; every stream derives from it. No wall-clock defaults.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Whether optimizer moments are cleared at task boundaries; they carry
    /// over by default as part of the pre-decay checkpoint.
    #[serde(default)]
    pub reset_optimizer_at_boundary: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.run.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        for m in &self.methods {
            m.validate()?;
        }
        match &self.benchmark {
            BenchmarkSource::Manifests { manifests, .. } => {
                if manifests.is_empty() {
                    return Err(Error::Config("at least one manifest is required".into()));
                }
            }
            BenchmarkSource::Synthetic { spec } => spec.validate()?,
        }
        if self.eval.mutation_ranking && self.eval.n_assays == 0 {
            return Err(Error::Config(
                "mutation ranking needs at least one assay".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Stable digest over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Record of one runner invocation: which inputs produced which artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub code_version: String,
    /// (method name, zero-based task, checkpoint path).
    pub checkpoints: Vec<(String, usize, PathBuf)>,
    pub metric_files: Vec<PathBuf>,
    pub wall_seconds: f64,
    /// Set when the run aborted, naming the failure point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunManifest {
    pub fn new(config_digest: String) -> Self {
        RunManifest {
            config_digest,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoints: Vec::new(),
            metric_files: Vec::new(),
            wall_seconds: 0.0,
            failure: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
