//! One JSON document configuring a whole run, with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fpm::PoolConfig;
use crate::fsutil::read_json;
use crate::fusion::LossWeights;
use crate::model::{FusionConfig, ModelKind};
use crate::model::ModelConfig;
use crate::synthgen::SynthConfig;
use crate::train::TrainConfig;

/// Optional file locations; relative paths resolve against the working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// `[N, C]` `.hpt` label embeddings replacing the stand-in encoder.
    pub label_embeddings: Option<PathBuf>,
    /// JSON list giving the row order of `label_embeddings`.
    pub label_list: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub pool: PoolConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub fusion: FusionConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Reads a config file; missing sections and keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let value: Value = read_json(path)?;
        Self::from_value(value)
    }

    /// Deserialises a JSON document, naming the offending field on failure.
    pub fn from_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })
    }

    /// Applies `section.key=value` overrides. Values parse as JSON when they
    /// can and as plain strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self).map_err(|e| Error::invalid(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like section.key=value"))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::config(key, "override key must look like section.key"));
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            for (depth, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::config(key, format!("`{}` is not a section", parts[..depth].join("."))))?;
                if !obj.contains_key(*part) {
                    return Err(Error::config(key, "unknown key"));
                }
                if depth + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).expect("checked above");
            }
        }
        Self::from_value(doc)
    }

    /// The global `--seed` drives both data generation and training.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.train.seed = s;
        }
        self
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pool.validate(self.synth.scales.len())?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.fusion.validate()?;
        if self.model.kind == ModelKind::Full && self.fusion.video_dim != self.synth.video_dim {
            return Err(Error::config(
                "fusion.video_dim",
                format!("{} but synth.video_dim is {}", self.fusion.video_dim, self.synth.video_dim),
            ));
        }
        if self.paths.label_embeddings.is_some() != self.paths.label_list.is_some() {
            return Err(Error::config("paths.label_list", "label_embeddings and label_list go together"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smclm::StreamKind;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(serde_json::from_str::<RunConfig>("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"synth": {"frame": 3}}"#).is_err());
        let err = RunConfig::from_value(serde_json::json!({"synth": {"frames": -2}})).unwrap_err();
        assert!(err.to_string().contains("synth.frames"), "{err}");
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": {}}"#).is_err());
        let err = RunConfig::default().with_overrides(&["train.epoch=3".into()]).unwrap_err();
        assert!(err.to_string().contains("train.epoch"));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "train.epochs=3".into(),
                "fusion.tau=0.5".into(),
                "model.kind=single".into(),
                "model.streams=[\"bone\"]".into(),
                "pool.reducer=max".into(),
            ])
            .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.fusion.tau, 0.5);
        assert_eq!(cfg.model.streams, vec![StreamKind::Bone]);
        cfg.validate().unwrap();
    }

    #[test]
    fn negative_frames_name_the_field() {
        let err = RunConfig::default().with_overrides(&["synth.frames=-4".into()]).unwrap_err();
        assert!(err.to_string().contains("synth.frames"), "{err}");
        let cfg = RunConfig::default().with_overrides(&["synth.frames=1".into()]).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("synth.frames"));
    }

    #[test]
    fn video_width_must_agree() {
        let cfg = RunConfig::default().with_overrides(&["fusion.video_dim=8".into()]).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("fusion.video_dim"));
    }
}
