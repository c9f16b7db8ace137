use std::path::Path;

use serde_json::{json, Value};

use super::{BetaVae, EmbedLevel, ModelConfig, ModelError, NestedVae};
use crate::nn::{load_checkpoint, save_checkpoint, ParamStore};
use crate::tensor::Tensor;

/// Either trained model, as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Nested(NestedVae),
    BetaVae(BetaVae),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Nested(_) => "nested",
            SavedModel::BetaVae(_) => "beta-vae",
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            SavedModel::Nested(m) => &m.config,
            SavedModel::BetaVae(m) => &m.config,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            SavedModel::Nested(m) => &m.params,
            SavedModel::BetaVae(m) => &m.params,
        }
    }

    /// The representation probed downstream: nested means for the
    /// NestedVAE, outer means for the β-VAE.
    pub fn representation(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            SavedModel::Nested(m) => m.embed(x, EmbedLevel::Nested),
            SavedModel::BetaVae(m) => m.embed(x),
        }
    }

    pub fn outer_embedding(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            SavedModel::Nested(m) => m.embed(x, EmbedLevel::Outer),
            SavedModel::BetaVae(m) => m.embed(x),
        }
    }
}

/// Writes the parameters with the model kind, model configuration and
/// `extra` (typically the resolved run configuration) in the manifest.
pub fn save_model(path: &Path, model: &SavedModel, extra: Value) -> Result<(), ModelError> {
    let meta = json!({
        "model": model.kind(),
        "model_config": model.config(),
        "run": extra,
    });
    save_checkpoint(path, model.params(), meta)?;
    Ok(())
}

fn restore(target: &mut ParamStore, saved: &ParamStore) -> Result<(), ModelError> {
    if target.len() != saved.len() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint holds {} tensors, model needs {}",
            saved.len(),
            target.len()
        )));
    }
    for id in target.ids().collect::<Vec<_>>() {
        let name = target.name(id).to_string();
        let src = saved
            .find(&name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{name}`")))?;
        let value = saved.get(src);
        if value.shape() != target.get(id).shape() {
            return Err(ModelError::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, model needs {:?}",
                value.shape(),
                target.get(id).shape()
            )));
        }
        *target.get_mut(id) = value.clone();
    }
    Ok(())
}

/// Reads a checkpoint; returns the model and the `run` metadata.
pub fn load_model(path: &Path) -> Result<(SavedModel, Value), ModelError> {
    let ck = load_checkpoint(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let config: ModelConfig = serde_json::from_value(ck.meta["model_config"].clone())
        .map_err(|e| ModelError::Checkpoint(format!("model_config: {e}")))?;
    let model = match ck.meta["model"].as_str() {
        Some("nested") => {
            let mut m = NestedVae::new(&config, 0)?;
            restore(&mut m.params, &ck.params)?;
            SavedModel::Nested(m)
        }
        Some("beta-vae") => {
            let mut m = BetaVae::new(&config, 0)?;
            restore(&mut m.params, &ck.params)?;
            SavedModel::BetaVae(m)
        }
        other => {
            return Err(ModelError::Checkpoint(format!(
                "unknown model kind {other:?}"
            )))
        }
    };
    Ok((model, ck.meta["run"].clone()))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nfck");
        for model in [
            SavedModel::Nested(NestedVae::new(&tiny_config(), 11).unwrap()),
            SavedModel::BetaVae(BetaVae::new(&tiny_config(), 12).unwrap()),
        ] {
            save_model(&path, &model, json!({"seed": 11})).unwrap();
            let (back, run) = load_model(&path).unwrap();
            assert_eq!(back, model);
            assert_eq!(run["seed"], 11);
            let bytes = std::fs::read(&path).unwrap();
            save_model(&path, &back, json!({"seed": 11})).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), bytes);
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nfck");
        let model = NestedVae::new(&tiny_config(), 0).unwrap();
        let mut meta = json!({
            "model": "nested",
            "model_config": ModelConfig { latent_dim: 4, ..tiny_config() },
            "run": null,
        });
        save_checkpoint(&path, &model.params, meta.clone()).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::Checkpoint(_))));
        meta["model"] = json!("other");
        save_checkpoint(&path, &model.params, meta).unwrap();
        assert!(load_model(&path).is_err());
    }
}
