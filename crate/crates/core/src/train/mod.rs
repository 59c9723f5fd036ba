//! Training loops, evaluation and the two-stage MoDE procedure.

mod experiments;
mod optim;
mod procedures;
mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, DomainCorpus, Split};
use crate::error::{Error, Result};
use crate::model::{FreezePolicy, ModeModel};
use crate::tensor::checkpoint::RngState;
use crate::tensor::{Float, Tape};

pub use experiments::*;
pub use optim::{Optimizer, OptimizerKind};
pub use procedures::{
    compose, full_finetune, pretrain_backbone, train_expert, train_lora, Variant,
};
pub use report::{write_csv, write_json, EvalReport, TableRow};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub policy: FreezePolicy,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            steps: 2000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            policy: FreezePolicy::experts_and_gates(),
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn with_policy(&self, policy: FreezePolicy) -> Self {
        Self { policy, ..self.clone() }
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        Self { steps, ..self.clone() }
    }
}

/// Per-step training losses and the sampler state at the end.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub rng: RngState,
}

impl TrainLog {
    /// Whether the mean loss over the last `window` steps is below the
    /// mean over the first `window`.
    pub fn improved(&self, window: usize) -> bool {
        let w = window.min(self.losses.len() / 2);
        if w == 0 {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.losses[self.losses.len() - w..]) < mean(&self.losses[..w])
    }
}

/// Splits sequences into model inputs (all but the last token) and
/// next-token targets (all but the first).
pub(crate) fn shift(seqs: &[&Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for s in seqs {
        inputs.extend_from_slice(&s[..s.len() - 1]);
        targets.extend_from_slice(&s[1..]);
    }
    (inputs, targets)
}

/// Runs `spec.steps` optimiser steps of next-token cross-entropy on
/// batches drawn uniformly from `data`. The freeze policy is applied
/// first; frozen parameters are verified unchanged afterwards.
pub fn train<T: Float>(model: &mut ModeModel<T>, data: &DomainCorpus, spec: &TrainSpec) -> Result<TrainLog> {
    spec.validate()?;
    model.apply_policy(&spec.policy);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(11);
    if spec.steps == 0 {
        return Ok(TrainLog { losses: Vec::new(), rng: RngState::capture(&rng) });
    }
    if data.is_empty() || data.seq_len < 2 {
        return Err(Error::Input("training needs sequences of at least two tokens".into()));
    }
    let frozen_before = model.params.digest_where(|n| !spec.policy.allows(n));
    let mut opt = Optimizer::new(spec.optimizer, spec.lr);
    let seq_len = data.seq_len - 1;
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let batch: Vec<&Vec<usize>> =
            (0..spec.batch_size).map(|_| &data.sequences[rng.random_range(0..data.len())]).collect();
        let (inputs, targets) = shift(&batch);
        let grads = {
            let mut tape = Tape::new(&model.params);
            let logits = model.forward(&mut tape, &inputs, seq_len)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.data(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            losses.push(value);
            tape.backward(loss)?
        };
        model.params.accumulate(&grads);
        opt.step(&mut model.params);
    }
    let frozen_after = model.params.digest_where(|n| !spec.policy.allows(n));
    assert_eq!(frozen_before, frozen_after, "frozen parameters changed during training");
    Ok(TrainLog { losses, rng: RngState::capture(&rng) })
}

/// Fraction of positions whose argmax logit (lowest index on ties) is the
/// true next token, over every position that has a successor.
pub fn eval_next_token<T: Float>(model: &ModeModel<T>, corpus: &DomainCorpus) -> Result<f64> {
    if corpus.split != Split::Test {
        return Err(Error::Usage("evaluation expects a test split".into()));
    }
    if corpus.is_empty() || corpus.seq_len < 2 {
        return Err(Error::Input("cannot evaluate on an empty corpus".into()));
    }
    let seq_len = corpus.seq_len - 1;
    let vocab = model.config.vocab_size;
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in corpus.sequences.chunks(32) {
        let batch: Vec<&Vec<usize>> = chunk.iter().collect();
        let (inputs, targets) = shift(&batch);
        let logits = model.logits(&inputs, seq_len)?;
        for (row, &target) in logits.data().chunks(vocab).zip(&targets) {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            hits += usize::from(best == target);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Accuracy on each test corpus plus parameter counts.
pub fn evaluate<T: Float>(label: &str, model: &ModeModel<T>, tests: &[DomainCorpus]) -> Result<EvalReport> {
    let accuracies = tests
        .iter()
        .map(|c| Ok((c.domain, eval_next_token(model, c)?)))
        .collect::<Result<Vec<(Domain, f64)>>>()?;
    Ok(EvalReport::new(label, accuracies, model.numel(), model.trainable_numel()))
}
