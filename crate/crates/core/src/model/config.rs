use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::DType;

/// Architecture of a MoDE model.
///
/// The backbone has `n_backbone_layers` transformer layers split evenly
/// over `n_blocks`; each block runs `n_experts` parallel expert stacks of
/// `expert_layers_per_block` layers next to its backbone slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_backbone_layers: usize,
    pub n_blocks: usize,
    pub expert_layers_per_block: usize,
    pub n_experts: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub precision: DType,
    /// Initial bias on the backbone gate logit. Zero gives a uniform gate.
    pub gate_backbone_bias: f64,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 32,
            n_heads: 4,
            n_backbone_layers: 6,
            n_blocks: 3,
            expert_layers_per_block: 1,
            n_experts: 0,
            max_seq_len: 32,
            seed: 0,
            precision: DType::F32,
            gate_backbone_bias: 0.0,
        }
    }
}

impl ModeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_backbone_layers", self.n_backbone_layers),
            ("n_blocks", self.n_blocks),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.n_backbone_layers.is_multiple_of(self.n_blocks) {
            return Err(Error::config(format!(
                "n_backbone_layers {} is not divisible by n_blocks {}",
                self.n_backbone_layers, self.n_blocks
            )));
        }
        if self.n_experts > 0 && self.expert_layers_per_block == 0 {
            return Err(Error::config("experts need at least one layer per block"));
        }
        if !self.gate_backbone_bias.is_finite() {
            return Err(Error::config("gate_backbone_bias must be finite"));
        }
        Ok(())
    }

    pub fn layers_per_block(&self) -> usize {
        self.n_backbone_layers / self.n_blocks
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Same architecture with a different expert count.
    pub fn with_experts(&self, n: usize) -> Self {
        Self { n_experts: n, ..self.clone() }
    }

    /// Fields that determine the frozen backbone. Two configs with equal
    /// backbone keys can share a backbone checkpoint.
    pub fn backbone_key(&self) -> String {
        format!(
            "v{}-d{}-h{}-l{}-t{}-s{}-{:?}",
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_backbone_layers,
            self.max_seq_len,
            self.seed,
            self.precision
        )
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Low-rank adapter settings. Attention projections are always adapted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub apply_to_ffn: bool,
    pub apply_to_embeddings: bool,
    /// Adapter output is scaled by `alpha / rank`.
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, apply_to_ffn: false, apply_to_embeddings: false, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("LoRA alpha must be positive"));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}
