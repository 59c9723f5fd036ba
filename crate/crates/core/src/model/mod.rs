//! The MoDE architecture: a frozen decoder backbone split into blocks,
//! each block paired with parallel expert stacks and a token-level gate
//!
//! ```text
//! y = α_bb · f_bb(x) + Σ_j α_j · f_j(x),    α = softmax(x · W_g + b_g)
//! ```
//!
//! Embeddings and the output head sit outside the blocks and belong to the
//! backbone.

mod config;
pub mod layer;
mod lora;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};

pub use config::{LoraConfig, ModeConfig};
pub use layer::{layer_forward, truncated_normal, INIT_STD};
pub use lora::{attach_lora, lora_targets};

/// Disjoint parameter groups used by freeze policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Experts,
    Gates,
    Adapters,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::Backbone, ParamGroup::Experts, ParamGroup::Gates, ParamGroup::Adapters];

    pub fn of(name: &str) -> ParamGroup {
        if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
            ParamGroup::Adapters
        } else if name.starts_with("expert") {
            ParamGroup::Experts
        } else if name.starts_with("gate.") {
            ParamGroup::Gates
        } else {
            ParamGroup::Backbone
        }
    }
}

/// Which parameter groups are trainable. Everything else is frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable: Vec<ParamGroup>,
}

impl FreezePolicy {
    pub fn new(trainable: &[ParamGroup]) -> Self {
        Self { trainable: trainable.to_vec() }
    }

    /// Experts and gates train, the backbone stays frozen.
    pub fn experts_and_gates() -> Self {
        Self::new(&[ParamGroup::Experts, ParamGroup::Gates])
    }

    pub fn gates_only() -> Self {
        Self::new(&[ParamGroup::Gates])
    }

    pub fn adapters_only() -> Self {
        Self::new(&[ParamGroup::Adapters])
    }

    pub fn all() -> Self {
        Self::new(&ParamGroup::ALL)
    }

    pub fn allows(&self, name: &str) -> bool {
        self.trainable.contains(&ParamGroup::of(name))
    }
}

pub fn embed_name() -> &'static str {
    "backbone.embed.weight"
}

pub fn backbone_layer_prefix(layer: usize) -> String {
    format!("backbone.layer{layer}")
}

pub fn expert_layer_prefix(expert: usize, block: usize, layer: usize) -> String {
    format!("expert{expert}.block{block}.layer{layer}")
}

pub fn gate_prefix(block: usize) -> String {
    format!("gate.block{block}")
}

/// Independent stream per parameter, so a parameter's initial value
/// depends only on the seed and its name.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Parameters plus the architecture they realise.
#[derive(Debug, Clone)]
pub struct ModeModel<T: Float> {
    pub config: ModeConfig,
    pub lora: Option<LoraConfig>,
    pub params: ParamStore<T>,
}

impl<T: Float> ModeModel<T> {
    /// Freshly initialised model. The backbone is frozen; experts and
    /// gates are trainable.
    pub fn new(config: ModeConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut params = ParamStore::new();
        let rng = |name: &str| param_rng(c.seed, name);

        let embed = embed_name();
        params.insert(embed, layer::normal_tensor(&mut rng(embed), &[c.vocab_size, d], INIT_STD));
        let pos = "backbone.pos.weight";
        params.insert(pos, layer::normal_tensor(&mut rng(pos), &[c.max_seq_len, d], INIT_STD));
        for l in 0..c.n_backbone_layers {
            layer::insert_layer(&mut params, &backbone_layer_prefix(l), d, rng);
        }
        params.insert("backbone.final_norm.gamma", Tensor::filled(&[d], T::one()));
        params.insert("backbone.final_norm.beta", Tensor::zeros(&[d]));
        let head = "backbone.unembed.weight";
        params.insert(head, layer::normal_tensor(&mut rng(head), &[d, c.vocab_size], INIT_STD));

        for j in 0..c.n_experts {
            for b in 0..c.n_blocks {
                for l in 0..c.expert_layers_per_block {
                    layer::insert_layer(&mut params, &expert_layer_prefix(j, b, l), d, rng);
                }
            }
        }
        let mut model = Self { config, lora: None, params };
        model.reset_gates();
        model.apply_policy(&FreezePolicy::experts_and_gates());
        Ok(model)
    }

    /// (Re)creates every gate as a zero map of width `N + 1`, with the
    /// configured bias on the backbone logit. No gates exist when `N = 0`.
    pub fn reset_gates(&mut self) {
        let c = &self.config;
        let (d, n) = (c.d_model, c.n_experts);
        let names: Vec<String> =
            self.params.iter().map(|(k, _)| k.to_string()).filter(|k| k.starts_with("gate.")).collect();
        for k in names {
            self.params.remove(&k);
        }
        if n == 0 {
            return;
        }
        for b in 0..c.n_blocks {
            let p = gate_prefix(b);
            let mut bias = Tensor::<T>::zeros(&[n + 1]);
            bias.data_mut()[0] = T::from_f64(c.gate_backbone_bias);
            self.params.insert(format!("{p}.weight"), Tensor::zeros(&[d, n + 1]).with_trainable(true));
            self.params.insert(format!("{p}.bias"), bias.with_trainable(true));
        }
    }

    pub fn apply_policy(&mut self, policy: &FreezePolicy) {
        self.params.set_trainable_where(|name| policy.allows(name));
    }

    fn lora_scale(&self) -> f64 {
        self.lora.as_ref().map_or(0.0, LoraConfig::scale)
    }

    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.trainable_numel()
    }

    /// Digest of the parameters in `group`.
    pub fn group_digest(&self, group: ParamGroup) -> String {
        self.params.digest_where(|n| ParamGroup::of(n) == group)
    }

    fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<()> {
        let c = &self.config;
        if seq_len == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::Input(format!(
                "{} tokens do not form sequences of length {seq_len}",
                tokens.len()
            )));
        }
        if seq_len > c.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Input(format!("token id {bad} >= vocab_size {}", c.vocab_size)));
        }
        Ok(())
    }

    /// Token plus position embeddings for `tokens`, laid out as
    /// consecutive sequences of `seq_len`.
    pub fn embed(&self, tape: &mut Tape<'_, T>, tokens: &[usize], seq_len: usize) -> Result<Var> {
        self.check_tokens(tokens, seq_len)?;
        let table = tape.param_by_name(embed_name())?;
        let mut e = tape.embedding(table, tokens)?;
        let a_name = format!("{}.lora_a", embed_name());
        if tape.has_param(&a_name) {
            let a = tape.param_by_name(&a_name)?;
            let b = tape.param_by_name(&format!("{}.lora_b", embed_name()))?;
            let ea = tape.embedding(a, tokens)?;
            let eab = tape.matmul(ea, b)?;
            let delta = tape.scale(eab, T::from_f64(self.lora_scale()));
            e = tape.add(e, delta)?;
        }
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq_len).collect();
        let pos_table = tape.param_by_name("backbone.pos.weight")?;
        let p = tape.embedding(pos_table, &positions)?;
        tape.add(e, p)
    }

    fn head(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let n = layer::layer_norm(tape, "backbone.final_norm", x)?;
        let w = tape.param_by_name("backbone.unembed.weight")?;
        tape.matmul(n, w)
    }

    fn check_width(&self, tape: &Tape<'_, T>, x: Var) -> Result<()> {
        let d = self.config.d_model;
        match tape.shape(x) {
            [_, w] if *w == d => Ok(()),
            s => Err(Error::dim(format!("block input {s:?} does not have width {d}"))),
        }
    }

    /// Per-token gate weights `[rows, N + 1]`, backbone column first.
    pub fn gate_forward(&self, tape: &mut Tape<'_, T>, block: usize, x: Var) -> Result<Var> {
        self.check_width(tape, x)?;
        if self.config.n_experts == 0 {
            let rows = tape.shape(x)[0];
            return Ok(tape.constant(Tensor::filled(&[rows, 1], T::one())));
        }
        let p = gate_prefix(block);
        let w = tape.param_by_name(&format!("{p}.weight"))?;
        let b = tape.param_by_name(&format!("{p}.bias"))?;
        let logits = tape.matmul(x, w)?;
        let logits = tape.add_bias(logits, b)?;
        tape.softmax(logits, 1)
    }

    pub fn backbone_branch(
        &self,
        tape: &mut Tape<'_, T>,
        block: usize,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let per = self.config.layers_per_block();
        let mut h = x;
        for l in block * per..(block + 1) * per {
            h = layer_forward(tape, &backbone_layer_prefix(l), h, seq_len, self.config.n_heads, self.lora_scale())?;
        }
        Ok(h)
    }

    pub fn expert_branch(
        &self,
        tape: &mut Tape<'_, T>,
        expert: usize,
        block: usize,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let mut h = x;
        for l in 0..self.config.expert_layers_per_block {
            h = layer_forward(tape, &expert_layer_prefix(expert, block, l), h, seq_len, self.config.n_heads, 0.0)?;
        }
        Ok(h)
    }

    /// One MoDE block. Every branch reads the same block input.
    pub fn block_forward(
        &self,
        tape: &mut Tape<'_, T>,
        block: usize,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        self.check_width(tape, x)?;
        let bb = self.backbone_branch(tape, block, x, seq_len)?;
        if self.config.n_experts == 0 {
            return Ok(bb);
        }
        let alphas = self.gate_forward(tape, block, x)?;
        let mut branches = vec![bb];
        for j in 0..self.config.n_experts {
            branches.push(self.expert_branch(tape, j, block, x, seq_len)?);
        }
        tape.mix(alphas, &branches)
    }

    /// Next-token logits `[tokens.len(), vocab]`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, tokens: &[usize], seq_len: usize) -> Result<Var> {
        let mut x = self.embed(tape, tokens, seq_len)?;
        for b in 0..self.config.n_blocks {
            x = self.block_forward(tape, b, x, seq_len)?;
        }
        self.head(tape, x)
    }

    /// The plain backbone: every backbone layer in sequence, ignoring
    /// blocks, experts and gates.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        let mut x = self.embed(tape, tokens, seq_len)?;
        for l in 0..self.config.n_backbone_layers {
            x = layer_forward(tape, &backbone_layer_prefix(l), x, seq_len, self.config.n_heads, self.lora_scale())?;
        }
        self.head(tape, x)
    }

    /// Logits without keeping a differentiable graph around.
    pub fn logits(&self, tokens: &[usize], seq_len: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.params);
        let y = self.forward(&mut tape, tokens, seq_len)?;
        Ok(tape.value(y))
    }

    /// Copies every backbone parameter from `source`, which must share
    /// this model's backbone shape.
    pub fn load_backbone(&mut self, source: &ModeModel<T>) -> Result<()> {
        for (name, t) in source.params.iter() {
            if ParamGroup::of(name) != ParamGroup::Backbone {
                continue;
            }
            let dst = self.params.by_name_mut(name).ok_or_else(|| {
                Error::Composition(format!("backbone parameter `{name}` missing from target"))
            })?;
            if dst.shape() != t.shape() {
                return Err(Error::Composition(format!(
                    "`{name}` has shape {:?}, source {:?}",
                    dst.shape(),
                    t.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Renames experts so that new expert `j` is old expert `perm[j]`,
    /// permuting gate columns to match.
    pub fn permute_experts(&mut self, perm: &[usize]) -> Result<()> {
        let n = self.config.n_experts;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Usage(format!("{perm:?} is not a permutation of {n} experts")));
        }
        let mut old = ParamStore::new();
        let names: Vec<String> = self.params.iter().map(|(k, _)| k.to_string()).collect();
        for name in names {
            let t = self.params.remove(&name).expect("listed");
            old.insert(name, t);
        }
        let inverse = {
            let mut inv = vec![0; n];
            for (j, &p) in perm.iter().enumerate() {
                inv[p] = j;
            }
            inv
        };
        for (name, t) in old.iter() {
            let mut t = t.clone();
            let new_name = match ParamGroup::of(name) {
                ParamGroup::Experts => {
                    let rest = name.strip_prefix("expert").expect("expert name");
                    let (idx, tail) = rest.split_once('.').expect("dotted");
                    let j: usize = idx.parse().expect("index");
                    format!("expert{}.{tail}", inverse[j])
                }
                ParamGroup::Gates => {
                    let cols = n + 1;
                    let src = t.clone();
                    let rows = src.len() / cols;
                    for r in 0..rows {
                        for (j, &p) in perm.iter().enumerate() {
                            t.data_mut()[r * cols + j + 1] = src.data()[r * cols + p + 1];
                        }
                    }
                    name.to_string()
                }
                _ => name.to_string(),
            };
            self.params.insert(new_name, t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
