//! JSON model checkpoints: `{"format", "version", "config", "params"}` with
//! flat parameter arrays. `f64` values round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Parameters};

const FORMAT: &str = "pixelpick-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Parameters,
}

impl Model {
    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let model = Model::from_parameters(ck.config, ck.params)?;
        if let Some(index) = model.params.first_non_finite() {
            return Err(ModelError::NonFiniteParameter { index });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
