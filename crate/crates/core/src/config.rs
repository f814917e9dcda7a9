//! Training configuration and its flat dotted-key JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub min_size_px: usize,
    pub max_size_px: usize,
    pub scale_factor: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            min_size_px: 25,
            max_size_px: 250,
            scale_factor: 4.0 / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub n_blocks: usize,
    /// Start each scale from the next coarser one's weights when the
    /// shapes agree.
    pub init_from_coarser: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            n_blocks: 5,
            init_from_coarser: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_g: 1e-4,
            lr_d: 4e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub iters_per_scale: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Bound report cadence in iterations; 0 reports only at scale end.
    pub bound_every: usize,
    /// Critic steps between `W_σ` refreshes.
    pub w_sigma_refresh: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iters_per_scale: 2000,
            d_steps: 3,
            g_steps: 3,
            seed: 0,
            log_every: 100,
            bound_every: 500,
            w_sigma_refresh: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub gamma: f64,
    pub beta: f64,
    pub power_iters: usize,
    pub power_tol: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            gamma: 0.1,
            beta: 0.05,
            power_iters: 300,
            power_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pyramid: PyramidConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub attack: AttackConfig,
    pub optim: OptimConfig,
    pub train: LoopConfig,
    pub bounds: BoundConfig,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    /// Defaults for super-resolution: reconstruction weight 100.
    pub fn super_resolution() -> Self {
        TrainConfig {
            loss: LossWeights::super_resolution(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("optim.lr_g", self.optim.lr_g)?;
        positive("optim.lr_d", self.optim.lr_d)?;
        for (name, b) in [("optim.adam_beta1", self.optim.adam_beta1), ("optim.adam_beta2", self.optim.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.train.d_steps == 0 || self.train.g_steps == 0 {
            return Err(Error::Config("train.d_steps and train.g_steps must be at least 1".into()));
        }
        self.loss.validate()?;
        self.attack.validate()?;
        positive("bounds.gamma", self.bounds.gamma)?;
        if !(self.bounds.beta > 0.0 && self.bounds.beta < 1.0) {
            return Err(Error::Config(format!("bounds.beta must lie in (0, 1), got {}", self.bounds.beta)));
        }
        if self.model.base_channels == 0 || self.model.n_blocks < 3 {
            return Err(Error::Config("model needs base_channels >= 1 and n_blocks >= 3".into()));
        }
        let p = &self.pyramid;
        if p.min_size_px < 8 || p.max_size_px < p.min_size_px || !(p.scale_factor > 1.0) {
            return Err(Error::Config(format!(
                "invalid pyramid settings: min {} max {} factor {}",
                p.min_size_px, p.max_size_px, p.scale_factor
            )));
        }
        Ok(())
    }

    /// Build from flat dotted keys (`"attack.radius": 0.5`) over defaults.
    /// Nested objects are accepted and flattened.
    pub fn from_json(value: &Value) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let mut flat = Vec::new();
        flatten("", obj, &mut flat);
        for (k, v) in flat {
            cfg.set(&k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        TrainConfig::from_json(&value)
    }

    /// Set one dotted key.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        if slot.is_object() {
            return Err(Error::Config(format!("config key `{key}` names a section, not a value")));
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Parse `key=value`; the value is read as JSON, falling back to a
    /// plain string.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.set(k.trim(), value)
    }

    /// Flat dotted-key form.
    pub fn to_flat(&self) -> Map<String, Value> {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut flat = Vec::new();
        flatten("", tree.as_object().expect("object"), &mut flat);
        flat.into_iter().collect()
    }
}

fn flatten(prefix: &str, obj: &Map<String, Value>, out: &mut Vec<(String, Value)>) {
    for (k, v) in obj {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Object(inner) => flatten(&key, inner, out),
            other => out.push((key, other.clone())),
        }
    }
}
