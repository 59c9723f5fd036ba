//! Stage 1 (per-domain experts), stage 2 (composition) and the baselines.

use serde::{Deserialize, Serialize};

use super::{train, TrainLog, TrainSpec};
use crate::data::DomainCorpus;
use crate::error::{Error, Result};
use crate::model::{attach_lora, FreezePolicy, LoraConfig, ModeConfig, ModeModel, ParamGroup};
use crate::tensor::Float;

/// How experts enter stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Stage-1 experts, fine-tuned together with a fresh gate.
    Standard,
    /// Stage-1 experts held fixed; only the gate trains.
    Frozen,
    /// No stage 1: this many randomly initialised experts train on the
    /// mixture directly.
    Uninitialized(usize),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Standard => "standard".into(),
            Variant::Frozen => "frozen".into(),
            Variant::Uninitialized(n) => format!("uninitialized-{n}"),
        }
    }
}

fn check_backbone<T: Float>(backbone: &ModeModel<T>, cfg: &ModeConfig) -> Result<()> {
    if backbone.config.backbone_key() != cfg.backbone_key() {
        return Err(Error::Composition(format!(
            "backbone `{}` does not match requested architecture `{}`",
            backbone.config.backbone_key(),
            cfg.backbone_key()
        )));
    }
    Ok(())
}

/// Trains a backbone from scratch with every parameter unfrozen.
pub fn pretrain_backbone<T: Float>(
    cfg: &ModeConfig,
    data: &DomainCorpus,
    spec: &TrainSpec,
) -> Result<(ModeModel<T>, TrainLog)> {
    let mut model = ModeModel::new(cfg.with_experts(0))?;
    let log = train(&mut model, data, &spec.with_policy(FreezePolicy::all()))?;
    model.apply_policy(&FreezePolicy::new(&[]));
    Ok((model, log))
}

/// Stage 1: a single expert plus gate trained on one domain over the
/// frozen backbone.
pub fn train_expert<T: Float>(
    backbone: &ModeModel<T>,
    domain: &DomainCorpus,
    cfg: &ModeConfig,
    spec: &TrainSpec,
) -> Result<(ModeModel<T>, TrainLog)> {
    if cfg.n_experts != 1 {
        return Err(Error::config(format!("expert training needs n_experts = 1, got {}", cfg.n_experts)));
    }
    check_backbone(backbone, cfg)?;
    let mut model = ModeModel::new(cfg.clone())?;
    model.load_backbone(backbone)?;
    let before = model.group_digest(ParamGroup::Backbone);
    let log = train(&mut model, domain, &spec.with_policy(FreezePolicy::experts_and_gates()))?;
    assert_eq!(before, model.group_digest(ParamGroup::Backbone), "backbone changed during expert training");
    Ok((model, log))
}

/// Stage 2: joins experts into one model with a fresh `N + 1`-way gate in
/// every block, then fine-tunes on `mixture` according to `variant`.
pub fn compose<T: Float>(
    backbone: &ModeModel<T>,
    experts: &[&ModeModel<T>],
    mixture: &DomainCorpus,
    spec: &TrainSpec,
    variant: Variant,
) -> Result<(ModeModel<T>, TrainLog)> {
    let (n, policy) = match variant {
        Variant::Uninitialized(n) => {
            if !experts.is_empty() {
                return Err(Error::Composition("uninitialized composition takes no trained experts".into()));
            }
            (n, FreezePolicy::experts_and_gates())
        }
        Variant::Standard => (experts.len(), FreezePolicy::experts_and_gates()),
        Variant::Frozen => (experts.len(), FreezePolicy::gates_only()),
    };
    if n == 0 {
        return Err(Error::Composition("composition needs at least one expert".into()));
    }
    let base = match experts.first() {
        Some(e) => e.config.clone(),
        None => backbone.config.with_experts(1),
    };
    for e in experts {
        let c = &e.config;
        if c.n_experts != 1
            || c.backbone_key() != base.backbone_key()
            || c.n_blocks != base.n_blocks
            || c.expert_layers_per_block != base.expert_layers_per_block
        {
            return Err(Error::Composition(format!(
                "expert with {} experts, {} blocks × {} layers does not match {} blocks × {} layers",
                c.n_experts, c.n_blocks, c.expert_layers_per_block, base.n_blocks, base.expert_layers_per_block
            )));
        }
        if e.group_digest(ParamGroup::Backbone) != backbone.group_digest(ParamGroup::Backbone) {
            return Err(Error::Composition("expert was trained on a different backbone".into()));
        }
    }
    check_backbone(backbone, &base)?;

    let mut model = ModeModel::new(base.with_experts(n))?;
    model.load_backbone(backbone)?;
    for (k, e) in experts.iter().enumerate() {
        for (name, t) in e.params.iter() {
            if ParamGroup::of(name) != ParamGroup::Experts {
                continue;
            }
            let target = name.replacen("expert0.", &format!("expert{k}."), 1);
            let dst = model.params.by_name_mut(&target).expect("same expert layout");
            dst.data_mut().copy_from_slice(t.data());
        }
    }
    let log = train(&mut model, mixture, &spec.with_policy(policy))?;
    Ok((model, log))
}

/// Baseline: every backbone parameter trains on `data`.
pub fn full_finetune<T: Float>(
    backbone: &ModeModel<T>,
    data: &DomainCorpus,
    spec: &TrainSpec,
) -> Result<(ModeModel<T>, TrainLog)> {
    let mut model = ModeModel::new(backbone.config.with_experts(0))?;
    model.load_backbone(backbone)?;
    let log = train(&mut model, data, &spec.with_policy(FreezePolicy::all()))?;
    Ok((model, log))
}

/// Baseline: low-rank adapters on a frozen backbone.
pub fn train_lora<T: Float>(
    backbone: &ModeModel<T>,
    lora: &LoraConfig,
    data: &DomainCorpus,
    spec: &TrainSpec,
) -> Result<(ModeModel<T>, TrainLog)> {
    let mut model = ModeModel::new(backbone.config.with_experts(0))?;
    model.load_backbone(backbone)?;
    attach_lora(&mut model, lora)?;
    let log = train(&mut model, data, &spec.with_policy(FreezePolicy::adapters_only()))?;
    Ok((model, log))
}
