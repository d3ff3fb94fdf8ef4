use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use issl_core::evaluation::EvalSettings;
use issl_core::io;
use issl_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a `train` run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// Sequence evaluated after every epoch; frames need ground-truth depth.
    pub eval_dataset: Option<PathBuf>,
    /// Number of trailing frames of `dataset` kept out of training and
    /// evaluated instead, used when `eval_dataset` is absent.
    pub holdout: usize,
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(io::read_json(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_none() {
            bail!(issl_core::Error::invalid(
                "config field `dataset` is not set"
            ));
        }
        if self.output_dir.is_none() {
            bail!(issl_core::Error::invalid(
                "config field `output_dir` is not set"
            ));
        }
        if self.eval_dataset.is_some() && self.holdout > 0 {
            bail!(issl_core::Error::invalid(
                "set either `eval_dataset` or `holdout`, not both"
            ));
        }
        self.train.validate().context("config field `train`")?;
        self.eval.validate().context("config field `eval`")?;
        Ok(())
    }
}

/// What `train` writes as `run.json`: the resolved config plus the code
/// version; passing it back through `--rerun` repeats the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub version: String,
    pub config: RunConfig,
}

impl RunRecord {
    pub fn new(config: RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            config,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let record: Self = io::read_json(path)?;
        if record.version != env!("CARGO_PKG_VERSION") {
            log::warn!(
                "{} was written by version {}, this is {}",
                path.display(),
                record.version,
                env!("CARGO_PKG_VERSION")
            );
        }
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"dataset": "d", "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.eval, EvalSettings::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"epochz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn missing_dataset_fails_validation() {
        let err = RunConfig::default().validate().unwrap_err();
        assert!(err.to_string().contains("dataset"));
    }
}
