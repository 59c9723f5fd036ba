//! Model checkpoints: the core container plus a JSON header describing the
//! architecture.

use std::path::Path;

use anyhow::Result;
use modelab_core::model::{LoraConfig, ModeConfig, ModeModel};
use modelab_core::tensor::checkpoint::{self, Header, RngState};
use modelab_core::Float;
use serde::{Deserialize, Serialize};

use crate::run::Run;
use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub label: String,
    pub model: ModeConfig,
    pub lora: Option<LoraConfig>,
}

pub fn save<T: Float>(run: &mut Run, name: &str, label: &str, model: &ModeModel<T>, rng: RngState) -> Result<()> {
    let meta = ModelMeta { label: label.to_string(), model: model.config.clone(), lora: model.lora.clone() };
    let header = Header::new(serde_json::to_string(&meta)?, rng);
    run.write(name, &checkpoint::encode(&header, &model.params))?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<(ModelMeta, ModeModel<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Artifact(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let (header, params) =
        checkpoint::decode::<T>(&bytes).map_err(|e| Failure::Artifact(format!("{}: {e}", path.display())))?;
    let meta: ModelMeta = serde_json::from_str(&header.config_json)
        .map_err(|e| Failure::Artifact(format!("{}: bad header: {e}", path.display())))?;
    let model = ModeModel { config: meta.model.clone(), lora: meta.lora.clone(), params };
    Ok((meta, model))
}

/// Loads a backbone checkpoint and checks it was built for `expected`.
pub fn load_backbone<T: Float>(path: &Path, expected: &ModeConfig) -> Result<ModeModel<T>> {
    let (meta, model) = load::<T>(path)?;
    if meta.model.n_experts != 0 || meta.lora.is_some() {
        return Err(Failure::Artifact(format!("{} is not a bare backbone checkpoint", path.display())).into());
    }
    if meta.model.backbone_key() != expected.backbone_key() {
        return Err(Failure::Artifact(format!(
            "{}: incompatible checkpoint (backbone `{}`, config expects `{}`)",
            path.display(),
            meta.model.backbone_key(),
            expected.backbone_key()
        ))
        .into());
    }
    Ok(model)
}
