//! Run configuration, loaded from TOML. Unknown keys are rejected everywhere.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::NoiseSpec;
use crate::error::{Error, Result};
use crate::estimator::EmConfig;
use crate::ledger::{ThresholdMode, ThresholdPolicy};
use crate::ssl::SslWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    DltLastEpoch,
    DltSlideWindow,
    PlainCe,
}

impl Mode {
    pub fn threshold_mode(self) -> Option<ThresholdMode> {
        match self {
            Mode::DltLastEpoch => Some(ThresholdMode::LastEpoch),
            Mode::DltSlideWindow => Some(ThresholdMode::SlideWindow),
            Mode::PlainCe => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs; the test split shares the centers but uses its own seed.
    Blobs {
        n_per_class: usize,
        classes: usize,
        dim: usize,
        center_spread: f64,
        cluster_std: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Pre-built datasets (`.csv` or binary, chosen by extension).
    Files { train: PathBuf, test: PathBuf },
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs {
            n_per_class: 1000,
            classes: 4,
            dim: 16,
            center_spread: 1.0,
            cluster_std: 1.0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseRateSource {
    /// Measured disagreement between observed and true labels.
    True,
    /// Estimated from a plain cross-entropy pass.
    Estimated,
    /// Taken from `threshold.noise_rate`.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub window: usize,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
    pub noise_rate_source: NoiseRateSource,
    pub noise_rate: Option<f64>,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            window: 16,
            warmup_epochs: 10,
            ramp_epochs: 40,
            noise_rate_source: NoiseRateSource::True,
            noise_rate: None,
        }
    }
}

impl ThresholdConfig {
    pub fn policy(&self, mode: ThresholdMode, noise_rate: f64) -> ThresholdPolicy {
        ThresholdPolicy {
            mode,
            window: self.window,
            noise_rate,
            warmup_epochs: self.warmup_epochs,
            ramp_epochs: self.ramp_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs after this one run at `learning_rate · lr_drop_factor`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            lr_drop_epoch: Some(60),
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_drop_epoch {
            Some(drop) if epoch > drop => self.learning_rate * self.lr_drop_factor,
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub theta: f64,
    /// Early epoch for the loss difference; defaults to 10% of the run.
    pub early_epoch: Option<usize>,
    /// Length of the plain cross-entropy pass; defaults to `epochs`.
    pub epochs: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            theta: 0.5,
            early_epoch: None,
            epochs: None,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

impl EstimatorConfig {
    pub fn em(&self) -> EmConfig {
        EmConfig {
            max_iter: self.max_iter,
            tol: self.tol,
            ..EmConfig::default()
        }
    }

    pub fn early_epoch_for(&self, total: usize) -> usize {
        self.early_epoch
            .unwrap_or_else(|| ((total as f64 * 0.1).round() as usize).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardConfig {
    /// Fraction of the training set whose clean members seed hard samples.
    pub subset_fraction: f64,
    pub ratio: f64,
    pub erase_fraction: f64,
    pub epsilon: f64,
}

impl Default for HardConfig {
    fn default() -> Self {
        HardConfig {
            subset_fraction: 0.1,
            ratio: 1.0,
            erase_fraction: 0.25,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub epochs: usize,
    pub data: DataConfig,
    pub noise: Option<NoiseSpec>,
    pub threshold: ThresholdConfig,
    pub ssl: SslWeights,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub estimator: EstimatorConfig,
    pub hard: HardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            mode: Mode::DltSlideWindow,
            epochs: 120,
            data: DataConfig::default(),
            noise: Some(NoiseSpec::Symmetric { rate: 0.4 }),
            threshold: ThresholdConfig::default(),
            ssl: SslWeights::default(),
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            estimator: EstimatorConfig::default(),
            hard: HardConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.mode != Mode::PlainCe && self.threshold.warmup_epochs >= self.epochs {
            return fail(format!(
                "warm-up ({}) must be shorter than the run ({})",
                self.threshold.warmup_epochs, self.epochs
            ));
        }
        if let Some(mode) = self.mode.threshold_mode() {
            self.threshold.policy(mode, 0.0).validate()?;
        }
        match (self.threshold.noise_rate_source, self.threshold.noise_rate) {
            (NoiseRateSource::Manual, None) => {
                return fail("manual noise-rate source needs threshold.noise_rate".into())
            }
            (NoiseRateSource::Manual, Some(w)) if !(0.0..1.0).contains(&w) => {
                return fail(format!("threshold.noise_rate {w} outside [0, 1)"))
            }
            _ => {}
        }
        self.ssl.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite())
            || !(0.0..1.0).contains(&o.momentum)
            || !(o.weight_decay >= 0.0)
            || o.batch_size == 0
            || !(o.lr_drop_factor > 0.0)
        {
            return fail(format!("invalid optimizer settings {o:?}"));
        }
        if self.model.hidden.contains(&0) {
            return fail("hidden layer widths must be positive".into());
        }
        if let DataConfig::Blobs {
            n_per_class,
            classes,
            dim,
            cluster_std,
            test_fraction,
            ..
        } = &self.data
        {
            if *n_per_class == 0 || *classes < 2 || *dim == 0 || !(*cluster_std > 0.0) {
                return fail(
                    "blob settings need n_per_class, dim > 0, classes >= 2, cluster_std > 0".into(),
                );
            }
            if !(*test_fraction > 0.0 && *test_fraction <= 1.0) {
                return fail(format!("test_fraction {test_fraction} outside (0, 1]"));
            }
        }
        match &self.noise {
            Some(NoiseSpec::Symmetric { rate }) | Some(NoiseSpec::Asymmetric { rate, .. })
                if !(0.0..1.0).contains(rate) =>
            {
                return fail(format!("noise rate {rate} outside [0, 1)"))
            }
            _ => {}
        }
        let e = &self.estimator;
        if !(0.0..=1.0).contains(&e.theta) || e.max_iter == 0 || e.epochs == Some(0) {
            return fail(format!("invalid estimator settings {e:?}"));
        }
        let h = &self.hard;
        if !(0.0..=1.0).contains(&h.subset_fraction)
            || !(h.ratio >= 0.0)
            || !(h.erase_fraction > 0.0 && h.erase_fraction < 1.0)
            || !(h.epsilon >= 0.0)
        {
            return fail(format!("invalid hard-sample settings {h:?}"));
        }
        Ok(())
    }
}
