//! Training configuration, read from a TOML file with sections mirroring
//! the struct, every field defaulted, and flags able to override on top.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub pad_crop: bool,
    /// Padding in pixels before the random crop back to input size.
    pub pad: usize,
    pub erase: bool,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            pad_crop: true,
            pad: 10,
            erase: true,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip: false,
            pad_crop: false,
            erase: false,
            ..AugmentConfig::default()
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.pad_crop || self.erase
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: String,
    pub batch_size: usize,
    /// K: instances per identity inside a batch.
    pub instances_per_id: usize,
    pub epochs: u32,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: u32,
    pub decay_epoch_first: u32,
    pub decay_epoch_rest: u32,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub input_height: usize,
    pub input_width: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Adaption kernel settings used by the adaptive method.
    pub sa_kernel_size: usize,
    /// "all", "none", "stages:2,3,4", or "layers:<spec indices>".
    pub sa_placement: String,
    /// Distillation-baseline knobs.
    pub kd_lambda: f64,
    pub kd_use_new_samples: bool,
    pub kd_old_classes_only: bool,
    pub exemplar_ids_per_step: usize,
    pub exemplar_images_per_id: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: "resnet50".into(),
            batch_size: 128,
            instances_per_id: 2,
            epochs: 80,
            base_lr: 3.5e-4,
            warmup_start_lr: 3.5e-5,
            warmup_epochs: 10,
            decay_epoch_first: 30,
            decay_epoch_rest: 10,
            decay_factor: 0.1,
            weight_decay: 5e-4,
            input_height: 256,
            input_width: 128,
            label_smoothing: 0.1,
            seed: 0,
            augment: AugmentConfig::default(),
            sa_kernel_size: 5,
            sa_placement: "all".into(),
            kd_lambda: 1.0,
            kd_use_new_samples: false,
            kd_old_classes_only: false,
            exemplar_ids_per_step: 250,
            exemplar_images_per_id: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances_per_id == 0 || self.batch_size % self.instances_per_id != 0 {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} must be divisible by instances_per_id {}",
                self.batch_size, self.instances_per_id
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.decay_epoch_first < self.warmup_epochs || self.decay_epoch_rest < self.warmup_epochs
        {
            return Err(Error::InvalidConfig(format!(
                "decay epochs ({}, {}) must not precede warmup ({})",
                self.decay_epoch_first, self.decay_epoch_rest, self.warmup_epochs
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidConfig("decay_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Learning rate at a 0-indexed epoch: linear warmup anchored at epoch 0
/// (warmup start) and at `warmup_epochs` (base), then constant, then one
/// drop by `decay_factor` from the decay epoch onward. The decay epoch
/// differs between the first domain and the rest.
pub fn lr_at_epoch(epoch: u32, cfg: &TrainConfig, is_first_domain: bool) -> f64 {
    let decay_epoch = if is_first_domain {
        cfg.decay_epoch_first
    } else {
        cfg.decay_epoch_rest
    };
    if epoch >= decay_epoch {
        cfg.base_lr * cfg.decay_factor
    } else if epoch >= cfg.warmup_epochs {
        cfg.base_lr
    } else if cfg.warmup_epochs == 0 {
        cfg.base_lr
    } else {
        cfg.warmup_start_lr
            + (cfg.base_lr - cfg.warmup_start_lr) * epoch as f64 / cfg.warmup_epochs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchors() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(0, &cfg, true), 3.5e-5);
        assert!((lr_at_epoch(10, &cfg, true) - 3.5e-4).abs() / 3.5e-4 < 1e-12);
        assert!((lr_at_epoch(30, &cfg, true) - 3.5e-5).abs() / 3.5e-5 < 1e-9);
        assert!((lr_at_epoch(79, &cfg, true) - 3.5e-5).abs() / 3.5e-5 < 1e-9);
        // mid-warmup interpolation
        assert!((lr_at_epoch(5, &cfg, true) - 1.925e-4).abs() / 1.925e-4 < 1e-12);
        // later domains decay at epoch 10
        assert!((lr_at_epoch(10, &cfg, false) - 3.5e-5).abs() / 3.5e-5 < 1e-9);
        assert!((lr_at_epoch(9, &cfg, false) - lr_at_epoch(9, &cfg, true)).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_piecewise_monotone() {
        let cfg = TrainConfig::default();
        // nondecreasing through warmup
        for e in 0..cfg.warmup_epochs {
            assert!(lr_at_epoch(e + 1, &cfg, true) >= lr_at_epoch(e, &cfg, true));
        }
        // constant plateau until decay
        for e in cfg.warmup_epochs..cfg.decay_epoch_first - 1 {
            assert_eq!(lr_at_epoch(e + 1, &cfg, true).max(lr_at_epoch(e, &cfg, true)), cfg.base_lr);
        }
        // exactly one drop, by exactly the decay factor
        let before = lr_at_epoch(cfg.decay_epoch_first - 1, &cfg, true);
        let after = lr_at_epoch(cfg.decay_epoch_first, &cfg, true);
        assert!((after / before - cfg.decay_factor).abs() < 1e-12);
        for e in cfg.decay_epoch_first..cfg.epochs - 1 {
            assert_eq!(lr_at_epoch(e, &cfg, true), lr_at_epoch(e + 1, &cfg, true));
        }
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml_string();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.batch_size, 128);
        assert_eq!(back.epochs, 80);
        assert_eq!(back.input_height, 256);
        assert_eq!(back.input_width, 128);

        // partial config falls back to defaults
        let partial = TrainConfig::from_toml_str("batch_size = 16\ninstances_per_id = 2").unwrap();
        assert_eq!(partial.batch_size, 16);
        assert_eq!(partial.epochs, 80);
        assert!((partial.weight_decay - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = TrainConfig {
            batch_size: 9,
            instances_per_id: 2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            decay_epoch_rest: 5,
            warmup_epochs: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
