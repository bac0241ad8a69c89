use serde::{Deserialize, Serialize};

use crate::degradation::{bank_sigmas, sigma_range};
use crate::error::{Error, Result};
use crate::losses::LossConfig;

/// Adversarial fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub epochs: usize,
    pub g_lr: f64,
    pub g_weight_decay: f64,
    pub d_lr: f64,
    pub d_weight_decay: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            epochs: 30,
            g_lr: 1e-4,
            g_weight_decay: 1e-4,
            d_lr: 1e-4,
            d_weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub factor: usize,
    /// Temporal radius `l`; windows hold `2l + 1` frames.
    pub radius: usize,
    pub patch_size: usize,
    /// Crops whose center-frame variance is below this are discarded.
    pub variance_threshold: f64,
    /// Crops drawn per video before filtering.
    pub patch_attempts: usize,
    /// Blur σ values to sample from; the factor's whole bank when absent.
    /// `0` stands for pure bicubic degradation.
    pub sigmas: Option<Vec<f64>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub gan: GanConfig,
    pub loss: LossConfig,
    /// Reduced sizes and budgets.
    pub desk: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            factor: 2,
            radius: 2,
            patch_size: 48,
            variance_threshold: 0.0035,
            patch_attempts: 64,
            sigmas: None,
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-5,
            seed: 0,
            gan: GanConfig::default(),
            loss: LossConfig::default(),
            desk: false,
        }
    }
}

impl TrainConfig {
    pub fn paper(factor: usize) -> Self {
        TrainConfig {
            factor,
            ..Default::default()
        }
    }

    /// Small patches and a fifth of the epochs; schedules, thresholds and
    /// loss weights unchanged.
    pub fn desk(factor: usize) -> Self {
        TrainConfig {
            factor,
            patch_size: if factor == 3 { 18 } else { 16 },
            patch_attempts: 32,
            epochs: 20,
            batch_size: 8,
            gan: GanConfig {
                epochs: 6,
                ..GanConfig::default()
            },
            desk: true,
            ..Default::default()
        }
    }

    pub fn sigma_choices(&self) -> Result<Vec<f64>> {
        match &self.sigmas {
            None => bank_sigmas(self.factor),
            Some(v) if v.is_empty() => Err(Error::Config("sigmas must not be empty".into())),
            Some(v) => Ok(v.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (lo, hi) = sigma_range(self.factor).map_err(|e| Error::Config(e.to_string()))?;
        if self.patch_size == 0 || self.patch_size % self.factor != 0 {
            return bad(format!(
                "patch_size {} must be a positive multiple of factor {}",
                self.patch_size, self.factor
            ));
        }
        for s in self.sigma_choices()? {
            let in_bank = s >= lo as f64 / 10.0 - 1e-9 && s <= hi as f64 / 10.0 + 1e-9;
            if !(s == 0.0 || in_bank) {
                return bad(format!(
                    "sigma {s} outside the kernel bank [{}, {}] for factor {}",
                    lo as f64 / 10.0,
                    hi as f64 / 10.0,
                    self.factor
                ));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.gan.g_lr > 0.0) || !(self.gan.d_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.weight_decay < 0.0 || self.gan.g_weight_decay < 0.0 || self.gan.d_weight_decay < 0.0 {
            return bad("weight decay must be non-negative".into());
        }
        if !(self.variance_threshold >= 0.0) {
            return bad("variance_threshold must be non-negative".into());
        }
        self.loss.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for f in [2, 3, 4] {
            TrainConfig::paper(f).validate().unwrap();
            TrainConfig::desk(f).validate().unwrap();
        }
        assert_eq!(TrainConfig::paper(2).patch_size, 48);
        assert_eq!(TrainConfig::paper(2).variance_threshold, 0.0035);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            TrainConfig {
                patch_size: 17,
                ..TrainConfig::desk(2)
            },
            TrainConfig {
                sigmas: Some(vec![2.5]),
                ..TrainConfig::desk(2)
            },
            TrainConfig {
                sigmas: Some(vec![]),
                ..TrainConfig::desk(2)
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::desk(2)
            },
            TrainConfig {
                factor: 5,
                ..TrainConfig::desk(2)
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let bicubic = TrainConfig {
            sigmas: Some(vec![0.0]),
            ..TrainConfig::desk(2)
        };
        bicubic.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<TrainConfig>("factor = 3\nbogus = 1\n").is_err());
        let c: TrainConfig = toml::from_str("factor = 3\npatch_size = 24\n[gan]\nepochs = 2\n").unwrap();
        assert_eq!((c.factor, c.patch_size, c.gan.epochs), (3, 24, 2));
    }
}
