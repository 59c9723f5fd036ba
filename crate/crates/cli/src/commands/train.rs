use std::path::Path;

use anyhow::Result;
use modelab_core::model::{ModeModel, ParamGroup};
use modelab_core::train::{self as tr, evaluate, Corpora, LabConfig, TrainLog, Variant};
use modelab_core::{Domain, Float};
use serde::Serialize;

use super::{dispatch, lab_config, write_losses, write_report, Outcome};
use crate::ckpt;
use crate::run::Run;
use crate::{ConfigArgs, Failure, VariantArg};

#[derive(Serialize)]
struct Digests {
    backbone: String,
    experts: String,
    gates: String,
    adapters: String,
}

/// Checkpoint, parameter digests, losses and the evaluation report.
fn finish_model<T: Float>(
    mut run: Run,
    corpora: &Corpora,
    label: &str,
    model: &ModeModel<T>,
    log: &TrainLog,
) -> Outcome {
    ckpt::save(&mut run, "model.ckpt", label, model, log.rng)?;
    let digests = Digests {
        backbone: model.group_digest(ParamGroup::Backbone),
        experts: model.group_digest(ParamGroup::Experts),
        gates: model.group_digest(ParamGroup::Gates),
        adapters: model.group_digest(ParamGroup::Adapters),
    };
    run.write("digests.json", serde_json::to_string_pretty(&digests)?.as_bytes())?;
    write_losses(&mut run, log)?;
    let report = evaluate(label, model, &corpora.tests)?;
    write_report(&mut run, "", &report)?;
    Ok(Some(run.finish()?))
}

pub fn pretrain(work: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = lab_config(args)?;
    dispatch!(cfg.model.precision, pretrain_with(work, &cfg))
}

fn pretrain_with<T: Float>(work: &Path, cfg: &LabConfig) -> Outcome {
    let run = Run::create(work, "pretrain-backbone", cfg.model.seed, cfg)?;
    let corpora = Corpora::new(cfg)?;
    let spec = cfg.train.with_steps(cfg.pretrain_steps);
    let (model, log) = tr::pretrain_backbone::<T>(&cfg.model, &corpora.pretrain, &spec)?;
    finish_model(run, &corpora, "Backbone", &model, &log)
}

pub fn expert(work: &Path, args: &ConfigArgs, backbone: &Path, domain: Domain) -> Outcome {
    let cfg = lab_config(args)?;
    dispatch!(cfg.model.precision, expert_with(work, &cfg, backbone, domain))
}

fn expert_with<T: Float>(work: &Path, cfg: &LabConfig, backbone: &Path, domain: Domain) -> Outcome {
    let bb = ckpt::load_backbone::<T>(backbone, &cfg.model)?;
    let run = Run::create(work, "train-expert", cfg.model.seed, cfg)?;
    let corpora = Corpora::new(cfg)?;
    let ecfg = cfg.model.with_experts(1);
    let spec = cfg.train.with_steps(cfg.stage1_steps());
    let (model, log) = tr::train_expert(&bb, corpora.train_for(domain), &ecfg, &spec)?;
    finish_model(run, &corpora, &format!("Expert {domain}"), &model, &log)
}

pub fn compose(
    work: &Path,
    args: &ConfigArgs,
    backbone: &Path,
    experts: &[std::path::PathBuf],
    variant: VariantArg,
    n_fresh: usize,
) -> Outcome {
    let cfg = lab_config(args)?;
    dispatch!(cfg.model.precision, compose_with(work, &cfg, backbone, experts, variant, n_fresh))
}

fn compose_with<T: Float>(
    work: &Path,
    cfg: &LabConfig,
    backbone: &Path,
    experts: &[std::path::PathBuf],
    variant: VariantArg,
    n_fresh: usize,
) -> Outcome {
    let bb = ckpt::load_backbone::<T>(backbone, &cfg.model)?;
    let loaded = experts.iter().map(|p| Ok(ckpt::load::<T>(p)?.1)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ModeModel<T>> = loaded.iter().collect();
    let (variant, steps, label) = match variant {
        VariantArg::Standard => (Variant::Standard, cfg.stage2_steps(), format!("MoDE {}xExperts", refs.len())),
        VariantArg::Frozen => (Variant::Frozen, cfg.stage2_steps(), format!("MoDE {}xFrozen", refs.len())),
        VariantArg::Uninitialized => {
            if !refs.is_empty() {
                return Err(Failure::Config("--variant uninitialized takes no --expert".into()).into());
            }
            (Variant::Uninitialized(n_fresh), cfg.train.steps, format!("MoDE {n_fresh}xUninitialized"))
        }
    };
    let run = Run::create(work, "compose", cfg.model.seed, cfg)?;
    let corpora = Corpora::new(cfg)?;
    let (model, log) = tr::compose(&bb, &refs, &corpora.mixture, &cfg.train.with_steps(steps), variant)?;
    finish_model(run, &corpora, &label, &model, &log)
}

pub fn finetune(work: &Path, args: &ConfigArgs, backbone: &Path, data: Domain) -> Outcome {
    let cfg = lab_config(args)?;
    dispatch!(cfg.model.precision, finetune_with(work, &cfg, backbone, data))
}

fn finetune_with<T: Float>(work: &Path, cfg: &LabConfig, backbone: &Path, data: Domain) -> Outcome {
    let bb = ckpt::load_backbone::<T>(backbone, &cfg.model)?;
    let run = Run::create(work, "finetune", cfg.model.seed, cfg)?;
    let corpora = Corpora::new(cfg)?;
    let (model, log) = tr::full_finetune(&bb, corpora.train_for(data), &cfg.train)?;
    finish_model(run, &corpora, "Full-FT", &model, &log)
}

pub fn lora(work: &Path, args: &ConfigArgs, backbone: &Path, data: Domain) -> Outcome {
    let cfg = lab_config(args)?;
    dispatch!(cfg.model.precision, lora_with(work, &cfg, backbone, data))
}

fn lora_with<T: Float>(work: &Path, cfg: &LabConfig, backbone: &Path, data: Domain) -> Outcome {
    let bb = ckpt::load_backbone::<T>(backbone, &cfg.model)?;
    let run = Run::create(work, "lora", cfg.model.seed, cfg)?;
    let corpora = Corpora::new(cfg)?;
    let (model, log) = tr::train_lora(&bb, &cfg.lora, corpora.train_for(data), &cfg.train)?;
    finish_model(run, &corpora, "LoRA", &model, &log)
}
