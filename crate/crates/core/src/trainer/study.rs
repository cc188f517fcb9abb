//! Noise-rate estimation runs and hard-sample studies built on top of the
//! training loop.

use serde::{Deserialize, Serialize};

use crate::data::{self, HardKind, Provenance};
use crate::error::{Error, Result};
use crate::estimator::{self, EstimationResult};
use crate::ledger::LossLedger;
use crate::nn::Mlp;
use crate::rng;

use super::{build_datasets, train_on, Mode, Splits, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimate {
    pub result: EstimationResult,
    pub early_epoch: usize,
    pub late_epoch: usize,
    pub true_noise_fraction: f64,
}

/// Plain cross-entropy pass followed by the mixture fit on per-sample loss
/// differences between an early and the last epoch.
pub fn estimate_noise(config: &TrainConfig) -> Result<NoiseEstimate> {
    config.validate()?;
    let splits = build_datasets(config)?;
    estimate_noise_on(config, &splits)
}

pub(crate) fn estimate_noise_on(config: &TrainConfig, splits: &Splits) -> Result<NoiseEstimate> {
    let mut plain = config.clone();
    plain.mode = Mode::PlainCe;
    plain.epochs = config.estimator.epochs.unwrap_or(config.epochs);
    let early = config.estimator.early_epoch_for(plain.epochs);
    let late = plain.epochs;
    if early >= late {
        return Err(Error::Config(format!(
            "early epoch {early} must precede the last estimation epoch {late}"
        )));
    }
    let run = train_on(&plain, &splits.train, &splits.test, None)?;
    let diffs = run.ledger.loss_difference(early, late)?;
    let result =
        estimator::estimate_noise_rate(&diffs, config.estimator.theta, &config.estimator.em())?;
    Ok(NoiseEstimate {
        result,
        early_epoch: early,
        late_epoch: late,
        true_noise_fraction: splits.train.noise_fraction(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardSampleKind {
    Erasure,
    Fgsm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardStudyReport {
    pub kind: HardSampleKind,
    pub ratio: f64,
    pub hard_count: usize,
    /// Mean per-sample loss per epoch under plain cross-entropy.
    pub clean_trajectory: Vec<f64>,
    pub noisy_trajectory: Vec<f64>,
    pub hard_trajectory: Vec<f64>,
    pub hard_to_clean_l2: Option<f64>,
    pub hard_to_noisy_l2: Option<f64>,
    /// Share of hard samples on the clean side in the final thresholded epoch.
    pub hard_clean_fraction: Option<f64>,
}

fn group_trajectory(
    ledger: &LossLedger,
    provenance: &[Provenance],
    epochs: usize,
    keep: impl Fn(Provenance) -> bool,
) -> Result<Vec<f64>> {
    let members: Vec<usize> = (0..provenance.len())
        .filter(|&i| keep(provenance[i]))
        .collect();
    if members.is_empty() {
        return Ok(Vec::new());
    }
    (1..=epochs)
        .map(|t| {
            let losses = ledger.epoch_losses(t)?;
            Ok(members.iter().map(|&i| losses[i]).sum::<f64>() / members.len() as f64)
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> Option<f64> {
    (!a.is_empty() && a.len() == b.len()).then(|| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    })
}

/// Appends hard samples to the noisy training set, records per-group loss
/// trajectories under plain cross-entropy, then runs thresholded training to
/// see where the hard samples are routed. A thresholded `config.mode` is used
/// for the second run; plain mode falls back to the slide window.
pub fn run_hard_sample_study(
    config: &TrainConfig,
    kind: HardSampleKind,
    ratio: f64,
    attack_model: Option<&Mlp>,
) -> Result<HardStudyReport> {
    config.validate()?;
    let splits = build_datasets(config)?;
    let hard_kind = match kind {
        HardSampleKind::Erasure => HardKind::Erasure {
            erase_fraction: config.hard.erase_fraction,
        },
        HardSampleKind::Fgsm => HardKind::Fgsm {
            model: attack_model.ok_or_else(|| {
                Error::State("fgsm hard samples need a pre-trained attack model".into())
            })?,
            epsilon: config.hard.epsilon,
        },
    };
    let train = data::append_hard_samples(
        &splits.train,
        hard_kind,
        config.hard.subset_fraction,
        ratio,
        rng::derive(config.seed, rng::TAG_HARD),
    )?;
    let hard_count = train.provenance().iter().filter(|p| p.is_hard()).count();

    let mut plain = config.clone();
    plain.mode = Mode::PlainCe;
    let base = train_on(&plain, &train, &splits.test, None)?;
    let prov = train.provenance();
    let clean = group_trajectory(&base.ledger, prov, plain.epochs, |p| p == Provenance::Clean)?;
    let noisy = group_trajectory(&base.ledger, prov, plain.epochs, |p| p == Provenance::Noisy)?;
    let hard = group_trajectory(&base.ledger, prov, plain.epochs, Provenance::is_hard)?;

    let hard_clean_fraction = if hard_count == 0 {
        None
    } else {
        let mut dlt = config.clone();
        if dlt.mode == Mode::PlainCe {
            dlt.mode = Mode::DltSlideWindow;
        }
        let run = train_on(&dlt, &train, &splits.test, Some(train.noise_fraction()))?;
        run.metrics
            .last()
            .and_then(|m| m.selection)
            .and_then(|s| s.hard_clean_fraction())
    };

    Ok(HardStudyReport {
        kind,
        ratio,
        hard_count,
        hard_to_clean_l2: l2(&hard, &clean),
        hard_to_noisy_l2: l2(&hard, &noisy),
        clean_trajectory: clean,
        noisy_trajectory: noisy,
        hard_trajectory: hard,
        hard_clean_fraction,
    })
}
