use super::{embed_name, param_rng, FreezePolicy, LoraConfig, ModeModel};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Backbone weight matrices adapted under `cfg`.
pub fn lora_targets<T: Float>(model: &ModeModel<T>, cfg: &LoraConfig) -> Vec<String> {
    model
        .params
        .iter()
        .map(|(name, _)| name)
        .filter(|name| {
            if !name.starts_with("backbone.") || !name.ends_with(".weight") {
                return false;
            }
            if name.contains(".attn.w") {
                return true;
            }
            if name.contains(".ffn.w") {
                return cfg.apply_to_ffn;
            }
            *name == embed_name() && cfg.apply_to_embeddings
        })
        .map(str::to_string)
        .collect()
}

/// Adds a low-rank update `(alpha / rank) · A · B` to every targeted
/// weight `W[m, n]`. `A[m, r]` starts at zero so outputs are unchanged
/// until training; `B[r, n]` is drawn from `N(0, 1 / r)`. Afterwards only
/// the adapters are trainable.
///
/// A rank above `m · n` cannot be represented by any factorisation and is
/// rejected.
pub fn attach_lora<T: Float>(model: &mut ModeModel<T>, cfg: &LoraConfig) -> Result<()> {
    cfg.validate()?;
    if model.lora.is_some() {
        return Err(Error::config("model already carries LoRA adapters"));
    }
    let targets = lora_targets(model, cfg);
    let r = cfg.rank;
    for name in &targets {
        let (m, n) = match model.params.by_name(name).expect("target exists").shape() {
            [m, n] => (*m, *n),
            s => return Err(Error::dim(format!("LoRA target `{name}` is not a matrix: {s:?}"))),
        };
        if r > m * n {
            return Err(Error::config(format!(
                "LoRA rank {r} exceeds the {m}×{n} matrix `{name}`"
            )));
        }
        let a_name = format!("{name}.lora_a");
        let b_name = format!("{name}.lora_b");
        let mut rng = param_rng(model.config.seed, &b_name);
        let b = super::layer::normal_tensor::<T>(&mut rng, &[r, n], 1.0 / (r as f64).sqrt());
        model.params.insert(a_name, Tensor::zeros(&[m, r]));
        model.params.insert(b_name, b);
    }
    model.lora = Some(cfg.clone());
    model.apply_policy(&FreezePolicy::adapters_only());
    Ok(())
}
