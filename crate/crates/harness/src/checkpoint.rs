//! JSON checkpoints with a SHA-256 checksum over the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use samlab::nn::{ModelSpec, NormState, ParamView};
use samlab::optim::OptimizerState;
use samlab::{Model, RngState};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Completed epochs and optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_spec: ModelSpec,
    pub param_views: Vec<ParamView>,
    pub flat_params: Vec<f64>,
    pub norm_states: Vec<NormState<f64>>,
    pub optimizer_state: OptimizerState<f64>,
    pub rng_state: RngState,
    pub progress: Progress,
    pub run_config: RunConfig,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        optimizer_state: OptimizerState<f64>,
        rng_state: RngState,
        progress: Progress,
        run_config: RunConfig,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_spec: model.spec.clone(),
            param_views: model.registry.views().to_vec(),
            flat_params: model.params.clone(),
            norm_states: model.norm_states.clone(),
            optimizer_state,
            rng_state,
            progress,
            run_config,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let model = Model::from_parts(self.model_spec.clone(), self.flat_params.clone(), self.norm_states.clone())?;
        if model.registry.views() != self.param_views.as_slice() {
            return Err(Error::Checkpoint("parameter views do not match the model spec".into()));
        }
        Ok(model)
    }

    fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        value
            .as_object_mut()
            .expect("checkpoint serializes to an object")
            .insert("checksum".into(), self.checksum()?.into());
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Checkpoint("top level must be an object".into()))?;
        let version = obj.get("format_version").and_then(|v| v.as_u64());
        if version != Some(u64::from(FORMAT_VERSION)) {
            return Err(Error::Checkpoint(format!(
                "format version {version:?} is not the supported {FORMAT_VERSION}"
            )));
        }
        let stored = match obj.remove("checksum") {
            Some(serde_json::Value::String(s)) => s,
            _ => return Err(Error::Checkpoint("missing checksum".into())),
        };
        let ckpt: Self = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let actual = ckpt.checksum()?;
        if actual != stored {
            return Err(Error::Checkpoint(format!("checksum mismatch: stored {stored}, computed {actual}")));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        // write-then-rename so an interrupted save never clobbers the last good file
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use samlab::nn::build_model;
    use samlab::optim::BaseOptimizer;
    use samlab::Rng;

    fn sample() -> Checkpoint {
        let cfg = RunConfig::from_json(
            r#"{
            "model": {"architecture": {"kind": "mlp_bn", "dims": [2, 4, 2]}},
            "optim": {"base": {"kind": "sgd", "lr": 0.1}},
            "data": {"kind": {"type": "spirals", "n": 40, "noise": 0.1, "seed": 0}},
            "epochs": 1,
            "batch_size": 4
        }"#,
        )
        .unwrap();
        let model = build_model(&cfg.model, 3).unwrap();
        let state = BaseOptimizer::sgd(0.1, 0.9, 0.0).init_state(model.num_params());
        let mut rng = Rng::new(5);
        rng.next_u64();
        Checkpoint::new(&model, state, rng.state(), Progress { epoch: 1, step: 10 }, cfg)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let text = c.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
        let m = back.model().unwrap();
        assert_eq!(m.params, c.flat_params);
    }

    #[test]
    fn corruption_is_detected() {
        let text = sample().to_json().unwrap();
        let pos = text.find("\"epoch\": 1").unwrap() + "\"epoch\": ".len();
        let mut bytes = text.into_bytes();
        bytes[pos] = b'2';
        let err = Checkpoint::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = sample().to_json().unwrap().replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert!(Checkpoint::from_json(&text).unwrap_err().to_string().contains("format version"));
    }
}
