//! End-to-end training: warm-up, thresholded clean/noisy split, the
//! semi-supervised objective, and plain cross-entropy baselines.

pub mod config;
pub mod metrics;
pub mod study;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use log::{debug, warn};
use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{self, BlobGenerator, Dataset};
use crate::error::{Error, Result};
use crate::ledger::{LossLedger, ThresholdPolicy};
use crate::nn::{self, LossKind, Mlp, PerSampleLoss, Sgd};
use crate::rng;
use crate::ssl::{self, SslBatch};

pub use config::{
    DataConfig, EstimatorConfig, HardConfig, Mode, ModelConfig, NoiseRateSource, OptimizerConfig,
    ThresholdConfig, TrainConfig,
};
pub use metrics::{write_metrics_csv, EpochMetrics, Phase, SelectionCounts, METRICS_HEADER};
pub use study::{
    estimate_noise, run_hard_sample_study, HardSampleKind, HardStudyReport, NoiseEstimate,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = BufReader::new(File::open(path)?);
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        data::read_csv(file)
    } else {
        data::read_binary(file)
    }
}

/// Training and test sets for a config; label noise is applied to the
/// training set only.
pub fn build_datasets(config: &TrainConfig) -> Result<Splits> {
    let (train, test) = match &config.data {
        DataConfig::Blobs {
            n_per_class,
            classes,
            dim,
            center_spread,
            cluster_std,
            test_fraction,
        } => {
            let generator =
                BlobGenerator::new(*classes, *dim, *center_spread, *cluster_std, config.seed)?;
            let n_test = ((*n_per_class as f64 * test_fraction).round() as usize).max(1);
            (
                generator.sample(*n_per_class, config.seed)?,
                generator.sample(n_test, rng::derive(config.seed, rng::TAG_TEST_SPLIT))?,
            )
        }
        DataConfig::Files { train, test } => (load_dataset(train)?, load_dataset(test)?),
    };
    let train = match &config.noise {
        Some(spec) => spec.apply(&train, config.seed)?,
        None => train,
    };
    if train.dim() != test.dim() || train.class_count() != test.class_count() {
        return Err(Error::Config(
            "training and test sets are incompatible".into(),
        ));
    }
    Ok(Splits { train, test })
}

/// Fraction of samples whose argmax prediction equals the true label.
pub fn evaluate(model: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let probs = model.forward_batch(data.features())?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(data.true_labels())
        .filter(|(p, &y)| nn::argmax(p.as_slice().expect("contiguous")) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mutable state of one training run.
pub struct Session<'a> {
    config: &'a TrainConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    pub model: Mlp,
    pub optimizer: Sgd,
    pub ledger: LossLedger,
    policy: Option<ThresholdPolicy>,
}

impl<'a> Session<'a> {
    pub fn new(
        config: &'a TrainConfig,
        train: &'a Dataset,
        test: &'a Dataset,
        policy: Option<ThresholdPolicy>,
    ) -> Result<Self> {
        let mut dims = vec![train.dim()];
        dims.extend(&config.model.hidden);
        dims.push(train.class_count());
        let model = Mlp::init(&dims, config.seed)?;
        let o = &config.optimizer;
        let optimizer = Sgd::new(&model, o.learning_rate, o.momentum, o.weight_decay);
        let window = policy.as_ref().map_or(1, |p| p.window);
        let ledger = LossLedger::new(train.len(), o.batch_size, window)?;
        Ok(Session {
            config,
            train,
            test,
            model,
            optimizer,
            ledger,
            policy,
        })
    }

    pub fn policy(&self) -> Option<&ThresholdPolicy> {
        self.policy.as_ref()
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut r = rng::stream(
            rng::derive(self.config.seed, epoch as u64),
            rng::TAG_SHUFFLE,
        );
        order.shuffle(&mut r);
        order
            .chunks(self.config.optimizer.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Pre-update per-sample cross-entropy against the observed labels.
    fn batch_losses(
        &self,
        x: &Array2<f64>,
        ids: &[usize],
        epoch: usize,
        batch: usize,
    ) -> Result<Vec<f64>> {
        let probs = self.model.forward_batch(x.view())?;
        let labels = self.train.observed_labels();
        let mut out = Vec::with_capacity(ids.len());
        for (p, &id) in probs.rows().into_iter().zip(ids) {
            let l = -p[labels[id]].max(nn::PROB_FLOOR).ln();
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    detail: format!("loss of sample {id} is {l}"),
                });
            }
            out.push(l + 0.0);
        }
        Ok(out)
    }

    fn targets(&self, ids: &[usize]) -> Array2<f64> {
        let c = self.train.class_count();
        let mut y = Array2::zeros((ids.len(), c));
        for (mut row, &id) in y.rows_mut().into_iter().zip(ids) {
            row[self.train.observed_labels()[id]] = 1.0;
        }
        y
    }

    fn finish_epoch(
        &self,
        epoch: usize,
        phase: Phase,
        loss_sum: f64,
        objective_sum: f64,
        batches: usize,
    ) -> Result<EpochMetrics> {
        Ok(EpochMetrics {
            epoch,
            phase,
            learning_rate: self.optimizer.learning_rate,
            train_loss: loss_sum / self.train.len() as f64,
            objective: objective_sum / batches as f64,
            test_accuracy: evaluate(&self.model, self.test)?,
            q: None,
            tau_mean: None,
            selection: None,
        })
    }

    /// One pass of standard cross-entropy SGD over all samples, recording every
    /// per-sample loss.
    pub fn warmup_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        self.cross_entropy_epoch(epoch, Phase::Warmup)
    }

    pub fn plain_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        self.cross_entropy_epoch(epoch, Phase::PlainCe)
    }

    fn cross_entropy_epoch(&mut self, epoch: usize, phase: Phase) -> Result<EpochMetrics> {
        self.optimizer.learning_rate = self.config.optimizer.learning_rate_at(epoch);
        let batches = self.batches(epoch);
        let (mut loss_sum, mut objective_sum) = (0.0, 0.0);
        for (p, ids) in batches.iter().enumerate() {
            let x = self.train.features().select(Axis(0), ids);
            let losses = self.batch_losses(&x, ids, epoch, p)?;
            self.ledger.record(epoch, p, ids, &losses)?;
            let y = self.targets(ids);
            let (loss, grads) = nn::backward(
                &self.model,
                x.view(),
                y.view(),
                LossKind::CrossEntropy,
                &vec![1.0; ids.len()],
            )
            .map_err(|e| divergence(e, epoch, p))?;
            self.optimizer.step(&mut self.model, &grads)?;
            loss_sum += losses.iter().sum::<f64>();
            objective_sum += loss;
        }
        self.finish_epoch(epoch, phase, loss_sum, objective_sum, batches.len())
    }

    /// One epoch of thresholded training: split each batch at the dynamic
    /// threshold, train the clean side with mixup and cross-entropy, replace
    /// noisy labels by sharpened pseudo-labels mixed with clean samples under
    /// squared error, and regularise towards a uniform mean prediction.
    pub fn dlt_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let policy = self
            .policy
            .clone()
            .ok_or_else(|| Error::State("thresholded epoch without a policy".into()))?;
        if epoch <= policy.warmup_epochs {
            return Err(Error::State(format!(
                "epoch {epoch} is still inside the {}-epoch warm-up",
                policy.warmup_epochs
            )));
        }
        self.optimizer.learning_rate = self.config.optimizer.learning_rate_at(epoch);
        let q = policy.selection_proportion(epoch);
        let batches = self.batches(epoch);
        let mut counts = SelectionCounts::default();
        let (mut loss_sum, mut objective_sum) = (0.0, 0.0);
        let mut taus = Vec::new();
        for (p, ids) in batches.iter().enumerate() {
            let x = self.train.features().select(Axis(0), ids);
            let losses = self.batch_losses(&x, ids, epoch, p)?;
            // q = 1 admits every sample, whatever the history says.
            let tau = if q >= 1.0 {
                f64::INFINITY
            } else {
                let t = policy.threshold(&self.ledger, epoch, q)?;
                taus.push(t);
                t
            };
            self.ledger.record(epoch, p, ids, &losses)?;
            loss_sum += losses.iter().sum::<f64>();

            let per_sample: Vec<PerSampleLoss> = ids
                .iter()
                .zip(&losses)
                .map(|(&sample_id, &value)| PerSampleLoss { sample_id, value })
                .collect();
            let split = ssl::split_batch(&per_sample, tau);
            for &id in &split.clean_ids {
                counts.add(self.train.provenance()[id], true);
            }
            for &id in &split.noisy_ids {
                counts.add(self.train.provenance()[id], false);
            }
            if split.clean_ids.is_empty() {
                warn!("epoch {epoch} batch {p}: clean side empty, skipping its loss term");
            }

            let batch = self.build_ssl_batch(&split, epoch, p)?;
            let (parts, grads) = ssl::total_loss_gradients(&self.model, &batch, &self.config.ssl)
                .map_err(|e| divergence(e, epoch, p))?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: p,
                    detail: format!("objective is {}", parts.total),
                });
            }
            self.optimizer.step(&mut self.model, &grads)?;
            objective_sum += parts.total;
        }
        let mut m = self.finish_epoch(epoch, Phase::Dlt, loss_sum, objective_sum, batches.len())?;
        m.q = Some(q);
        m.tau_mean = (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64);
        m.selection = Some(counts);
        debug!(
            "epoch {epoch}: q={q:.3} precision={:.3} recall={:.3} acc={:.3}",
            counts.precision(),
            counts.recall(),
            m.test_accuracy
        );
        Ok(m)
    }

    fn views(&self, id: usize, epoch: usize) -> Result<Vec<Vec<f64>>> {
        let s = &self.config.ssl;
        let seed = rng::derive(rng::derive(self.config.seed, epoch as u64), id as u64);
        data::augment(
            self.train.row(id).as_slice().expect("contiguous"),
            s.augmentations,
            s.augment_strength,
            seed,
        )
    }

    fn build_ssl_batch(
        &self,
        split: &ssl::BatchSplit,
        epoch: usize,
        batch: usize,
    ) -> Result<SslBatch> {
        let s = &self.config.ssl;
        let c = self.train.class_count();
        let mut r = rng::stream(
            rng::derive(rng::derive(self.config.seed, epoch as u64), batch as u64),
            rng::TAG_MIXUP,
        );

        // Clean side: every augmented view with its observed label.
        let mut clean_x = Vec::new();
        let mut clean_y = Vec::new();
        for &id in &split.clean_ids {
            let y = self.train.observed_one_hot(id);
            for v in self.views(id, epoch)? {
                clean_x.push(v);
                clean_y.push(y.clone());
            }
        }

        // Noisy side: labels replaced by the sharpened mean prediction over views.
        let mut noisy_x = Vec::new();
        let mut noisy_y = Vec::new();
        for &id in &split.noisy_ids {
            let views = self.views(id, epoch)?;
            let pseudo = ssl::pseudo_label(&self.model, &views, s.temperature)?;
            for v in views {
                noisy_x.push(v);
                noisy_y.push(pseudo.clone());
            }
        }

        // Mixup among clean pairs.
        let mut perm: Vec<usize> = (0..clean_x.len()).collect();
        perm.shuffle(&mut r);
        let mut mixed_clean_x = Vec::with_capacity(clean_x.len());
        let mut mixed_clean_y = Vec::with_capacity(clean_x.len());
        for (i, &j) in perm.iter().enumerate() {
            let lam = ssl::sample_mix_lambda(&mut r, s.beta_alpha)?;
            let (x, y) = ssl::mixup(&clean_x[i], &clean_y[i], &clean_x[j], &clean_y[j], lam);
            mixed_clean_x.push(x);
            mixed_clean_y.push(y);
        }

        // Each noisy view is mixed with a partner from a random portion of the
        // clean views, or with another noisy view when that portion is empty.
        let n_pool = (s.mix_fraction * clean_x.len() as f64).round() as usize;
        let pool: Vec<usize> = index::sample(&mut r, clean_x.len(), n_pool).into_vec();
        let mut mixed_noisy_x = Vec::with_capacity(noisy_x.len());
        let mut mixed_noisy_y = Vec::with_capacity(noisy_x.len());
        for i in 0..noisy_x.len() {
            let lam = ssl::sample_mix_lambda(&mut r, s.beta_alpha)?;
            let (px, py) = if pool.is_empty() {
                let j = r.random_range(0..noisy_x.len());
                (&noisy_x[j], &noisy_y[j])
            } else {
                let j = pool[r.random_range(0..pool.len())];
                (&clean_x[j], &clean_y[j])
            };
            let (x, y) = ssl::mixup(&noisy_x[i], &noisy_y[i], px, py, lam);
            mixed_noisy_x.push(x);
            mixed_noisy_y.push(y);
        }

        let dim = self.train.dim();
        Ok(SslBatch {
            clean_x: stack(&mixed_clean_x, dim),
            clean_y: stack(&mixed_clean_y, c),
            noisy_x: stack(&mixed_noisy_x, dim),
            noisy_y: stack(&mixed_noisy_y, c),
        })
    }
}

fn stack(rows: &[Vec<f64>], width: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat).expect("rows share a width")
}

fn divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFiniteLayer { layer, context } => Error::Divergence {
            epoch,
            batch,
            detail: format!("non-finite {context} in layer {layer}"),
        },
        other => other,
    }
}

/// Final model, per-epoch metrics and the full loss history of a run.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub mode: Mode,
    pub model: Mlp,
    pub metrics: Vec<EpochMetrics>,
    pub ledger: LossLedger,
    pub noise_rate_used: Option<f64>,
    pub true_noise_fraction: f64,
    pub estimated_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub epochs: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub true_noise_fraction: f64,
    pub noise_rate_used: Option<f64>,
    pub estimated_rate: Option<f64>,
    pub final_precision: Option<f64>,
    pub final_recall: Option<f64>,
}

impl RunArtifact {
    pub fn best(&self) -> (usize, f64) {
        self.metrics
            .iter()
            .fold((0, f64::NEG_INFINITY), |(be, ba), m| {
                if m.test_accuracy > ba {
                    (m.epoch, m.test_accuracy)
                } else {
                    (be, ba)
                }
            })
    }

    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.test_accuracy)
    }

    pub fn summary(&self) -> RunSummary {
        let (best_epoch, best_accuracy) = self.best();
        let last = self.metrics.last();
        RunSummary {
            mode: self.mode,
            epochs: self.metrics.len(),
            final_accuracy: self.final_accuracy(),
            best_accuracy,
            best_epoch,
            true_noise_fraction: self.true_noise_fraction,
            noise_rate_used: self.noise_rate_used,
            estimated_rate: self.estimated_rate,
            final_precision: last.and_then(EpochMetrics::precision),
            final_recall: last.and_then(EpochMetrics::recall),
        }
    }

    pub fn write_metrics_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_metrics_csv(&self.metrics, out)
    }
}

/// Runs a config end to end on its own datasets.
pub fn train(config: &TrainConfig) -> Result<RunArtifact> {
    config.validate()?;
    let splits = build_datasets(config)?;
    let (noise_rate, estimated) = if config.mode == Mode::PlainCe {
        (None, None)
    } else {
        match config.threshold.noise_rate_source {
            NoiseRateSource::True => (Some(splits.train.noise_fraction()), None),
            NoiseRateSource::Manual => (config.threshold.noise_rate, None),
            NoiseRateSource::Estimated => {
                let est = study::estimate_noise_on(config, &splits)?;
                let r = est.result.rate.min(0.99);
                (Some(r), Some(r))
            }
        }
    };
    train_on(config, &splits.train, &splits.test, noise_rate).map(|mut a| {
        a.estimated_rate = estimated;
        a
    })
}

/// Runs `config.epochs` epochs on the given data. `noise_rate` drives the
/// selection schedule and is required for thresholded modes.
pub fn train_on(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    noise_rate: Option<f64>,
) -> Result<RunArtifact> {
    config.validate()?;
    let policy = match config.mode.threshold_mode() {
        Some(mode) => {
            let w = noise_rate
                .ok_or_else(|| Error::Config("thresholded mode needs a noise rate".into()))?;
            let p = config.threshold.policy(mode, w);
            p.validate()?;
            Some(p)
        }
        None => None,
    };
    let mut session = Session::new(config, train, test, policy)?;
    let mut metrics = Vec::with_capacity(config.epochs);
    for t in 1..=config.epochs {
        let m = match session.policy() {
            None => session.plain_epoch(t)?,
            Some(p) if t <= p.warmup_epochs => session.warmup_epoch(t)?,
            Some(_) => session.dlt_epoch(t)?,
        };
        metrics.push(m);
    }
    Ok(RunArtifact {
        mode: config.mode,
        model: session.model,
        metrics,
        ledger: session.ledger,
        noise_rate_used: noise_rate,
        true_noise_fraction: train.noise_fraction(),
        estimated_rate: None,
    })
}
