//! A small bidirectional masked language model over the amino-acid
//! vocabulary, with exact hand-derived gradients and flat parameter
//! arithmetic for weight-space interventions.

mod net;
mod params;
mod vocab;

pub use net::{embed, forward, gradient, masked_ce_loss, Batch, LossTerm};
pub use params::{fill_init, InitKind, NamedTensor, ParameterSet, Real, Tensor};
pub use vocab::Vocabulary;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Desk-scale defaults are small enough for
/// CPU minutes while still deep enough to show plasticity and unlearning
/// effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 128,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Miniature config for gradient checking and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 24,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(
                "d_model must be a positive multiple of n_heads".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_layers and d_ff must be positive".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is fixed at 0 at desk scale".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Stable digest of the config, used to guard checkpoint loads.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Tokenize a normalized sequence: <bos> + residue ids + <eos>, truncated to
/// `max_len` total tokens.
pub fn tokenize(seq: &str, config: &ModelConfig) -> Vec<u16> {
    let vocab = Vocabulary::get();
    let mut ids = Vec::with_capacity((seq.len() + 2).min(config.max_len));
    ids.push(Vocabulary::BOS);
    for c in seq.bytes() {
        if ids.len() == config.max_len - 1 {
            break;
        }
        ids.push(vocab.id_of(c));
    }
    ids.push(Vocabulary::EOS);
    ids.truncate(config.max_len);
    ids
}

/// Inverse of `tokenize` for untruncated inputs.
pub fn detokenize(ids: &[u16]) -> String {
    let vocab = Vocabulary::get();
    ids.iter()
        .filter_map(|&id| vocab.residue_of(id))
        .map(|c| c as char)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_adds_bos_eos() {
        let cfg = ModelConfig::tiny();
        let ids = tokenize("AC", &cfg);
        let v = Vocabulary::get();
        assert_eq!(
            ids,
            vec![Vocabulary::BOS, v.id_of(b'A'), v.id_of(b'C'), Vocabulary::EOS]
        );
    }

    #[test]
    fn tokenize_truncates_to_max_len() {
        let cfg = ModelConfig::tiny();
        let long: String = "A".repeat(cfg.max_len + 5);
        let ids = tokenize(&long, &cfg);
        assert_eq!(ids.len(), cfg.max_len);
    }

    #[test]
    fn detokenize_round_trips_short_sequences() {
        let cfg = ModelConfig::tiny();
        for s in ["ACDE", "WYX", "GGGGGGGG"] {
            assert_eq!(detokenize(&tokenize(s, &cfg)), s);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
    }
}
