use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use samlab::nn::ModelSpec;
use samlab::optim::OptimConfig;

use crate::error::{Error, Result};

fn default_smoothing() -> f64 {
    0.1
}

fn default_split() -> f64 {
    0.8
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataKind {
    /// Gaussian clusters around random unit-normal centers.
    Blobs {
        classes: usize,
        dim: usize,
        n: usize,
        noise: f64,
        seed: u64,
    },
    /// Two interleaved spiral arms in the plane.
    Spirals { n: usize, noise: f64, seed: u64 },
    /// Unsigned-byte IDX image and label files.
    IdxFiles {
        images_path: PathBuf,
        labels_path: PathBuf,
        #[serde(default)]
        take_n: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DataKind,
    /// Fraction of samples in the training split.
    #[serde(default = "default_split")]
    pub split: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub optim: OptimConfig,
    pub data: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Also keep `checkpoint_epoch_<k>.json` every `k` epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Record real per-epoch wall time; when off, `wall_ms` is written as 0 so
    /// that reruns produce byte-identical metrics.
    #[serde(default = "yes")]
    pub wall_clock: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optim
            .validate_for_run(self.epochs, self.batch_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.epochs < 1 {
            return cfg("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return cfg("batch_size must be at least 1".into());
        }
        if self.model.has_batch_norm() && self.batch_size < 2 {
            return cfg("batch_size must be at least 2 with BatchNorm".into());
        }
        if let Some(m) = self.optim.m {
            if self.model.has_batch_norm() && m < 2 {
                return cfg("m must be at least 2 with BatchNorm".into());
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return cfg("label_smoothing must lie in [0, 1)".into());
        }
        if !(self.data.split > 0.0 && self.data.split < 1.0) {
            return cfg("data.split must lie in (0, 1)".into());
        }
        if self.checkpoint_every == Some(0) {
            return cfg("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"architecture": {"kind": "mlp_bn", "dims": [2, 8, 2]}},
        "optim": {"base": {"kind": "sgd", "lr": 0.1, "momentum": 0.9}},
        "data": {"kind": {"type": "spirals", "n": 200, "noise": 0.1, "seed": 1}},
        "epochs": 2,
        "batch_size": 16
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.label_smoothing, 0.1);
        assert_eq!(c.data.split, 0.8);
        assert!(c.wall_clock);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let text = MINIMAL.replace("\"epochs\"", "\"epochz\": 1, \"epochs\"");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"colour\": 3");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn batch_norm_needs_two_samples() {
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }
}
