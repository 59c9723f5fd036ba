//! Fixtures shared by the benchmarks in `benches/`.

use modelab_core::{ModeConfig, ModeModel, Result};

/// Deterministic, well-conditioned fill for kernel inputs.
pub fn filled(len: usize, phase: f32) -> Vec<f32> {
    (0..len).map(|i| (i as f32 * 0.37 + phase).sin() * 0.5).collect()
}

/// Two-expert model at the default desk-scale width.
pub fn step_model(n_experts: usize) -> Result<ModeModel<f32>> {
    ModeModel::new(ModeConfig { n_experts, ..ModeConfig::default() })
}

/// `batch` token sequences of `seq_len + 1` tokens: inputs and shifted targets.
pub fn batch(vocab: usize, batch: usize, seq_len: usize) -> (Vec<usize>, Vec<usize>) {
    let seq: Vec<Vec<usize>> =
        (0..batch).map(|b| (0..=seq_len).map(|t| (b * 31 + t * 7) % vocab).collect()).collect();
    let inputs = seq.iter().flat_map(|s| s[..seq_len].iter().copied()).collect();
    let targets = seq.iter().flat_map(|s| s[1..].iter().copied()).collect();
    (inputs, targets)
}
