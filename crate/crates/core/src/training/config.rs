//! Flat `key=value` training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bfn::{DecoderConfig, NoiseSchedule};
use crate::egnn::BackboneConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub recon_weight: f64,
    pub reg_weight: f64,
    pub var_x: f64,
    pub var_h: f64,
    pub n_z: usize,
    pub d_z: usize,
    pub d_f: usize,
    pub layers: usize,
    pub heads: usize,
    pub k: usize,
    /// Attention-weighted message aggregation; plain sums when false.
    pub attention: bool,
    /// Initial gain of the coordinate gate's output layer.
    pub coord_gain: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimiser steps; 0 means no limit.
    pub max_steps: usize,
    pub n_steps: usize,
    pub sigma1: f64,
    pub beta1: f64,
    pub vocab: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            recon_weight: 1.0,
            reg_weight: 0.1,
            var_x: 100.0,
            var_h: 1.0,
            n_z: 10,
            d_z: 32,
            d_f: 128,
            layers: 9,
            heads: 16,
            k: 32,
            attention: true,
            coord_gain: 0.001,
            adam_beta1: 0.95,
            adam_beta2: 0.99,
            lr: 0.005,
            weight_decay: 0.0,
            plateau_factor: 0.6,
            plateau_patience: 10,
            min_lr: 1e-6,
            clip_norm: 8.0,
            batch_size: 400,
            epochs: 250,
            max_steps: 0,
            n_steps: 1000,
            sigma1: 0.001,
            beta1: 1.0,
            vocab: "qm9".into(),
            seed: 0,
        }
    }
}

fn parse_value(raw: &str) -> Value {
    if let Ok(v) = raw.parse::<u64>() {
        return Value::from(v);
    }
    if let Ok(v) = raw.parse::<i64>() {
        return Value::from(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(v) {
            return Value::Number(n);
        }
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(raw.to_string()),
    }
}

impl TrainConfig {
    /// Applies `key=value` pairs on top of `self`. Blank lines and `#` comments are skipped.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(self)? else {
            unreachable!("config serialises to an object")
        };
        for (key, raw) in pairs {
            if !map.contains_key(key) {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
            let value = match &map[key] {
                Value::String(_) => Value::String(raw.to_string()),
                _ => parse_value(raw),
            };
            map.insert(key.to_string(), value);
        }
        let cfg: TrainConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::default().with_overrides(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// One `key=value` line per field, sorted by key.
    pub fn to_text(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("config serialises to an object")
        };
        let map: Map<String, Value> = map;
        let mut out = String::new();
        for (k, v) in map {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.recon_weight < 0.0 || self.reg_weight < 0.0 {
            return fail("loss weights must be nonnegative");
        }
        if !(self.lr > 0.0) || !(self.var_x > 0.0) || !(self.var_h > 0.0) {
            return fail("lr, var_x and var_h must be positive");
        }
        if [self.n_z, self.d_z, self.d_f, self.heads, self.k, self.batch_size, self.n_steps]
            .contains(&0)
        {
            return fail("counts must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail("plateau_factor must lie in (0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        NoiseSchedule::new(self.sigma1, self.beta1, self.n_steps)?;
        self.backbone().validate()
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma1: self.sigma1,
            beta1: self.beta1,
            n_steps: self.n_steps,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            hidden: self.d_f,
            layers: self.layers,
            heads: self.heads,
            k: self.k,
            attention: self.attention,
            time_conditioned: false,
            coord_gain: self.coord_gain,
        }
    }

    pub fn encoder(&self, num_types: usize) -> EncoderConfig {
        EncoderConfig {
            n_z: self.n_z,
            d_z: self.d_z,
            num_types,
            backbone: self.backbone(),
        }
    }

    pub fn decoder(&self, num_types: usize) -> DecoderConfig {
        DecoderConfig {
            d_z: self.d_z,
            num_types,
            backbone: BackboneConfig {
                time_conditioned: true,
                ..self.backbone()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_table() {
        let c = TrainConfig::default();
        assert_eq!((c.n_z, c.d_z, c.d_f, c.layers, c.heads, c.k), (10, 32, 128, 9, 16, 32));
        assert_eq!((c.var_x, c.var_h, c.recon_weight, c.reg_weight), (100.0, 1.0, 1.0, 0.1));
        assert_eq!((c.adam_beta1, c.adam_beta2, c.lr, c.weight_decay), (0.95, 0.99, 0.005, 0.0));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip_is_exact() {
        let c = TrainConfig::parse("lr = 0.0031\n# comment\nd_f=24\nheads=4\nattention=false\nvocab=drugs\nbeta1=1\n")
            .unwrap();
        assert_eq!(c.lr, 0.0031);
        assert_eq!(c.d_f, 24);
        assert!(!c.attention);
        assert_eq!(c.vocab, "drugs");
        let again = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TrainConfig::parse("learning_rate=0.1").is_err());
        assert!(TrainConfig::parse("heads=5").is_err());
        assert!(TrainConfig::parse("lr=-1").is_err());
        assert!(TrainConfig::parse("d_f=1.5").is_err());
        assert!(TrainConfig::parse("nonsense").is_err());
    }
}
