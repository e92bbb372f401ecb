//! Run configuration: nested structs on the inside, flat dotted keys on disk.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::backbone::{DecoderConfig, EncoderConfig};
use crate::data::{DataConfig, SceneSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ModelKind, SegModel};
use crate::semisup::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub out_dir: String,
    pub model: ModelKind,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub fusion: FusionConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "run".into(),
            out_dir: "runs".into(),
            model: ModelKind::Lf,
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            fusion: FusionConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

pub type FlatConfig = BTreeMap<String, Value>;

fn flatten_into(prefix: &str, v: &Value, out: &mut FlatConfig) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run name `{}`", self.run_name)));
        }
        self.scene.validate()?;
        if self.decoder.num_classes != self.scene.num_classes {
            return Err(Error::Config(format!(
                "decoder.num_classes {} differs from scene.num_classes {}",
                self.decoder.num_classes, self.scene.num_classes
            )));
        }
        if !(self.data.labeled_fraction > 0.0 && self.data.labeled_fraction <= 1.0) {
            return Err(Error::Config("data.labeled_fraction must be in (0, 1]".into()));
        }
        self.trainer.validate()?;
        self.model_spec().map(|_| ())
    }

    pub fn model_spec(&self) -> Result<SegModel> {
        SegModel::new(self.model, self.encoder.clone(), self.decoder.clone(), self.fusion.clone())
    }

    /// Every leaf as a dotted key. Arrays are leaves.
    pub fn to_flat(&self) -> FlatConfig {
        let mut out = FlatConfig::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Apply dotted-key overrides on top of `self`. Keys must name an
    /// existing field; the result is validated.
    pub fn with_overrides(&self, overrides: &FlatConfig) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (key, value) in overrides {
            let mut node = &mut tree;
            for part in key.split('.') {
                node = match node {
                    Value::Object(map) => map.get_mut(part),
                    _ => None,
                }
                .ok_or_else(|| Error::UnknownParam(key.clone()))?;
            }
            *node = value.clone();
        }
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_flat(flat: &FlatConfig) -> Result<RunConfig> {
        RunConfig::default().with_overrides(flat)
    }

    pub fn parse_flat_json(text: &str) -> Result<FlatConfig> {
        let v: Value = serde_json::from_str(text)?;
        match v {
            Value::Object(map) => Ok(map.into_iter().collect()),
            _ => Err(Error::Config("configuration file must hold a JSON object".into())),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_flat(&RunConfig::parse_flat_json(&text)?)
    }

    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.to_flat().into_iter().collect();
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical flat JSON, hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_json().as_bytes()))
    }
}
