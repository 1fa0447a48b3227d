//! Run configuration: one file (JSON or TOML) plus dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::apps::AnimationConfig;
use crate::dataio::SyntheticConfig;
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::metrics::MetricsConfig;
use crate::pyramid::PyramidConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub pyramid: PyramidConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub animation: AnimationConfig,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    /// Small settings that train in seconds on one core.
    pub fn toy() -> Self {
        let pyramid = PyramidConfig::toy();
        let n = pyramid.num_scales;
        Self {
            pyramid,
            train: TrainConfig {
                epochs_per_scale: 20,
                recon_only_epochs: 5,
                d_steps: 1,
                g_steps: 1,
                adv_batch: vec![2; n],
                recon_batch: vec![1; n],
                samples: Some(vec![32; n]),
                ..Default::default()
            },
            metrics: MetricsConfig {
                views_m: 4,
                scenes_j: 3,
                seed: 0,
            },
            animation: AnimationConfig {
                start_scale: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Reads `path` (`.toml` or JSON) on top of `base`, then applies overrides.
    pub fn load(base: RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(&base)?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: Value = if path.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            } else {
                serde_json::from_str(&text)?
            };
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.train.validate(self.pyramid.num_scales)?;
        self.metrics.validate()?;
        self.animation.validate(self.pyramid.num_scales)
    }

    /// Writes the resolved configuration as `resolved_config.json` in `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("resolved_config.json"), self)
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::invalid(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
