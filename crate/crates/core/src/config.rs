//! Run configuration: training hyperparameters, architecture knobs, loss
//! flags, and inference weights, with a flat `key=value` file format whose
//! keys are exactly the field names. CLI flags override file values.

use crate::encoder::EncoderShape;
use crate::error::{Error, Result};
use crate::objective::LossFlags;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    // Optimization.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    // Loss.
    pub tau: f64,
    pub use_global: bool,
    pub use_entity: bool,
    pub use_relation: bool,
    // Which heads get updated / replaced by plain normalization.
    pub train_image_encoder: bool,
    pub train_text_encoder: bool,
    pub bypass_image_encoder: bool,
    pub bypass_text_encoder: bool,
    // Architecture.
    pub n_entities: usize,
    pub m_relations: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub layers: usize,
    pub residual_scale: f64,
    pub pool_init: f64,
    pub positional_encoding: bool,
    pub seed: u64,
    // Inference weights.
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1_inf: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            batch_size: 64,
            epochs: 30,
            lr0: 1e-4,
            step_size: 10,
            gamma: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 0.0,
            tau: 1.0,
            use_global: true,
            use_entity: true,
            use_relation: true,
            train_image_encoder: true,
            train_text_encoder: true,
            bypass_image_encoder: false,
            bypass_text_encoder: false,
            n_entities: 10,
            m_relations: 10,
            dim: 32,
            heads: 4,
            ffn_ratio: 4,
            layers: 2,
            residual_scale: 0.1,
            pool_init: 0.0,
            positional_encoding: true,
            seed: 0,
            alpha1: 0.1,
            alpha2: 0.033,
            beta1_inf: 0.33,
        }
    }
}

/// Inference fusion weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 (contrastive training needs negatives)",
            ));
        }
        if self.lr0 < 0.0 || !self.lr0.is_finite() {
            return Err(Error::config("lr0 must be finite and non-negative"));
        }
        if self.step_size == 0 {
            return Err(Error::config("step_size must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma must be in (0, 1]"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip must be non-negative"));
        }
        self.loss_flags().validate()?;
        self.encoder_shape().validate()?;
        Ok(())
    }

    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            use_global: self.use_global,
            use_entity: self.use_entity,
            use_relation: self.use_relation,
            tau: self.tau,
        }
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            dim: self.dim,
            heads: self.heads,
            ffn_ratio: self.ffn_ratio,
            layers: self.layers,
            residual_scale: self.residual_scale,
            pool_init: self.pool_init,
        }
    }

    pub fn inference_weights(&self) -> InferenceWeights {
        InferenceWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            beta1: self.beta1_inf,
        }
    }

    /// Applies one `key=value` assignment; keys are the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("{key}: cannot parse {value:?} as {what}"));
        macro_rules! num {
            ($field:ident, $ty:ty, $what:literal) => {
                self.$field = value.trim().parse::<$ty>().map_err(|_| bad($what))?
            };
        }
        macro_rules! flag {
            ($field:ident) => {
                self.$field = match value.trim() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(bad("bool")),
                }
            };
        }
        match key {
            "batch_size" => num!(batch_size, usize, "integer"),
            "epochs" => num!(epochs, usize, "integer"),
            "lr0" => num!(lr0, f64, "float"),
            "step_size" => num!(step_size, usize, "integer"),
            "gamma" => num!(gamma, f64, "float"),
            "adam_beta1" => num!(adam_beta1, f64, "float"),
            "adam_beta2" => num!(adam_beta2, f64, "float"),
            "adam_eps" => num!(adam_eps, f64, "float"),
            "weight_decay" => num!(weight_decay, f64, "float"),
            "grad_clip" => num!(grad_clip, f64, "float"),
            "tau" => num!(tau, f64, "float"),
            "use_global" => flag!(use_global),
            "use_entity" => flag!(use_entity),
            "use_relation" => flag!(use_relation),
            "train_image_encoder" => flag!(train_image_encoder),
            "train_text_encoder" => flag!(train_text_encoder),
            "bypass_image_encoder" => flag!(bypass_image_encoder),
            "bypass_text_encoder" => flag!(bypass_text_encoder),
            "n_entities" => num!(n_entities, usize, "integer"),
            "m_relations" => num!(m_relations, usize, "integer"),
            "dim" => num!(dim, usize, "integer"),
            "heads" => num!(heads, usize, "integer"),
            "ffn_ratio" => num!(ffn_ratio, usize, "integer"),
            "layers" => num!(layers, usize, "integer"),
            "residual_scale" => num!(residual_scale, f64, "float"),
            "pool_init" => num!(pool_init, f64, "float"),
            "positional_encoding" => flag!(positional_encoding),
            "seed" => num!(seed, u64, "integer"),
            "alpha1" => num!(alpha1, f64, "float"),
            "alpha2" => num!(alpha2, f64, "float"),
            "beta1_inf" => num!(beta1_inf, f64, "float"),
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat key=value file ('#' starts a comment) on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}: line {}: expected key=value, got {raw:?}",
                    path.display(),
                    no + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Renders the full configuration as a key=value file body.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let kv = serde_json::to_value(self).expect("config serializes");
        for (key, value) in kv.as_object().expect("config is an object") {
            let _ = writeln!(out, "{key}={value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn set_and_file_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("batch_size", "128").unwrap();
        cfg.set("tau", "0.07").unwrap();
        cfg.set("use_relation", "false").unwrap();
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.tau, 0.07);
        assert!(!cfg.use_relation);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, cfg.to_key_values()).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs=3   # trailing\n\nlr0=0.01\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr0, 0.01);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("epochs", "three").is_err());
        assert!(cfg.set("use_global", "maybe").is_err());

        let mut cfg = RunConfig::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.dim = 30; // not divisible by 4 heads
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.use_global = false;
        cfg.use_entity = false;
        cfg.use_relation = false;
        assert!(cfg.validate().is_err());
    }
}
