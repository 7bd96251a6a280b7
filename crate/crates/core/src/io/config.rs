//! Run configuration files.
//!
//! A config file is TOML. It names a `preset` (default `desk`) and may
//! override any key of that preset; keys the preset does not have are
//! rejected. Command-line overrides use the same dotted paths, e.g.
//! `train.lr=3e-4` or `model.schedule.shape=[64, 64, 64, 64]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::evaluation::IcpOptions;
use crate::model::{LatentMode, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size settings for rendered objects on a white background.
    Synthetic,
    /// Full-size settings for photographs with a learned background.
    Real,
    /// Small networks, images and budgets for one CPU core.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Preset::Synthetic),
            "real" => Ok(Preset::Real),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?}, expected synthetic, real or desk"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Surface samples per mesh.
    pub points: usize,
    pub seed: u64,
    pub icp: IcpOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub output_dir: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let eval = EvalConfig {
            points: 100_000,
            seed: 0,
            icp: IcpOptions::default(),
        };
        let data = SyntheticSpec::default();
        match preset {
            Preset::Synthetic => RunConfig {
                preset,
                output_dir: "runs/synthetic".into(),
                model: ModelConfig::synthetic(),
                train: TrainConfig::synthetic(),
                data,
                eval,
            },
            Preset::Real => RunConfig {
                preset,
                output_dir: "runs/real".into(),
                model: ModelConfig::real(),
                train: TrainConfig::real(),
                data,
                eval,
            },
            Preset::Desk => {
                let model = ModelConfig {
                    mode: LatentMode::AutoDecoder,
                    ..ModelConfig::desk()
                };
                RunConfig {
                    preset,
                    output_dir: "runs/desk".into(),
                    data: SyntheticSpec {
                        image_size: model.image_size,
                        texture_size: model.texture_size,
                        ..data
                    },
                    model,
                    train: TrainConfig::desk(),
                    eval: EvalConfig { points: 2048, ..eval },
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_for(self.model.num_images.max(1))?;
        self.train.validate()?;
        self.data.validate()?;
        if self.eval.points == 0 {
            return Err(Error::Config("eval.points must be positive".into()));
        }
        Ok(())
    }

    /// The model config for a dataset of `images` images. In auto-decoder
    /// mode `model.num_images = 0` means one latent row per image; any
    /// other value must match the dataset.
    pub fn model_for(&self, images: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.mode == LatentMode::AutoDecoder {
            if m.num_images == 0 {
                m.num_images = images;
            } else if m.num_images != images {
                return Err(Error::Config(format!(
                    "model.num_images is {} but the dataset has {images} images",
                    m.num_images
                )));
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Parses a config, then applies `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let mut base = to_table(&RunConfig::preset(preset))?;
        merge(&mut base, user, "")?;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            if key == "preset" {
                return Err(Error::Config("the preset can only be chosen in the config file or with --preset".into()));
            }
            set_path(&mut base, &key, value)?;
        }
        let cfg: RunConfig = Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// A preset with overrides and no file.
    pub fn from_preset(preset: Preset, overrides: &[String]) -> Result<Self> {
        let name = toml::Value::try_from(preset).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&format!("preset = {name}"), overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("structs serialize to tables"),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Overlays `user` onto `base`, refusing keys `base` does not have. Tables
/// merge recursively; anything else is replaced whole.
fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = join(prefix, &k);
        match (base.get_mut(&k), v) {
            (None, _) => return Err(Error::Config(format!("unknown key {path:?}"))),
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    // bare words such as `auto_decoder` are taken as strings
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(base: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {key:?}")))?;
    let mut t = base;
    for p in parts {
        t = match t.get_mut(p) {
            Some(Value::Table(next)) => next,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        };
    }
    match t.get_mut(last) {
        None => Err(Error::Config(format!("unknown key {key:?}"))),
        Some(Value::Table(b)) => match value {
            Value::Table(u) => merge(b, u, key),
            v => Err(Error::Config(format!("{key:?} is a section, cannot set it to {v}"))),
        },
        Some(slot) => {
            // integers given where floats live, e.g. `train.lr=1`
            *slot = match (&*slot, value) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            Ok(())
        }
    }
}
