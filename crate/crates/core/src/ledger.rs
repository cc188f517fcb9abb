//! Per-sample loss history and the dynamic thresholds computed from it.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract, state, Error, Result};

/// Slack applied before taking `⌈q·n⌉`, so that products such as `0.7·10`
/// that land a hair above an integer do not skip a rank.
const RANK_SLACK: f64 = 1e-9;

/// Nearest-rank quantile: the `⌈q·n⌉`-th smallest value, or the smallest when
/// `q = 0`. Always returns an element of `values`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("quantile of an empty set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(contract(format!("quantile level {q} outside [0, 1]")));
    }
    let n = values.len();
    let rank = ((q * n as f64 - RANK_SLACK).ceil() as usize).clamp(1, n);
    let mut scratch = values.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*kth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    LastEpoch,
    SlideWindow,
}

/// Threshold strategy plus the decreasing selection-proportion schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub mode: ThresholdMode,
    /// Slide-window length in batches.
    pub window: usize,
    /// Noise rate driving the final selection proportion `1 - w`.
    pub noise_rate: f64,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.warmup_epochs == 0 || self.ramp_epochs == 0 {
            return Err(Error::Config(
                "window, warmup_epochs and ramp_epochs must all be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise rate {} outside [0, 1)",
                self.noise_rate
            )));
        }
        Ok(())
    }

    /// Fraction of samples admitted as clean at epoch `t` (1-based): 1 during
    /// warm-up, then a linear ramp down to `1 - w` over `ramp_epochs` epochs.
    pub fn selection_proportion(&self, t: usize) -> f64 {
        let (warm, ramp, w) = (self.warmup_epochs, self.ramp_epochs, self.noise_rate);
        if t <= warm {
            1.0
        } else if t >= warm + ramp {
            1.0 - w
        } else {
            1.0 - w * ((t - warm) as f64 / ramp as f64)
        }
    }

    /// Threshold for batches of epoch `t` at selection proportion `q`.
    pub fn threshold(&self, ledger: &LossLedger, t: usize, q: f64) -> Result<f64> {
        match self.mode {
            ThresholdMode::LastEpoch => ledger.threshold_last_epoch(t, q),
            ThresholdMode::SlideWindow => ledger.threshold_slide_window(self.window, q),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub sample_ids: Vec<usize>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EpochRecord {
    losses: Vec<f64>,
    seen: Vec<bool>,
    filled: usize,
    batches: Vec<(usize, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct LossLedger {
    n: usize,
    batch_size: usize,
    epochs: BTreeMap<usize, EpochRecord>,
    window: VecDeque<BatchRecord>,
    window_capacity: usize,
}

impl LossLedger {
    pub fn new(n: usize, batch_size: usize, window_capacity: usize) -> Result<Self> {
        if n == 0 || batch_size == 0 || window_capacity == 0 {
            return Err(contract(
                "ledger needs positive N, batch size and window capacity",
            ));
        }
        Ok(LossLedger {
            n,
            batch_size,
            epochs: BTreeMap::new(),
            window: VecDeque::with_capacity(window_capacity),
            window_capacity,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn record(
        &mut self,
        epoch: usize,
        batch: usize,
        sample_ids: &[usize],
        losses: &[f64],
    ) -> Result<()> {
        if sample_ids.len() != losses.len() {
            return Err(contract("sample ids and losses differ in length"));
        }
        for (&id, &l) in sample_ids.iter().zip(losses) {
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { sample_id: id });
            }
            if l < 0.0 {
                return Err(contract(format!("negative loss {l} for sample {id}")));
            }
            if id >= self.n {
                return Err(contract(format!("sample id {id} out of range")));
            }
        }
        let n = self.n;
        let rec = self.epochs.entry(epoch).or_insert_with(|| EpochRecord {
            losses: vec![f64::NAN; n],
            seen: vec![false; n],
            filled: 0,
            batches: Vec::new(),
        });
        if rec.batches.iter().any(|(b, _)| *b == batch) {
            return Err(state(format!(
                "batch {batch} of epoch {epoch} already recorded"
            )));
        }
        for (k, &id) in sample_ids.iter().enumerate() {
            if rec.seen[id] {
                // Roll back the partial write before reporting.
                for &prev in &sample_ids[..k] {
                    rec.seen[prev] = false;
                    rec.losses[prev] = f64::NAN;
                    rec.filled -= 1;
                }
                return Err(contract(format!(
                    "sample {id} recorded twice in epoch {epoch}"
                )));
            }
            rec.seen[id] = true;
            rec.losses[id] = losses[k];
            rec.filled += 1;
        }
        rec.batches.push((batch, sample_ids.to_vec()));

        if self.window.len() == self.window_capacity {
            self.window.pop_front();
        }
        self.window.push_back(BatchRecord {
            epoch,
            batch,
            sample_ids: sample_ids.to_vec(),
            losses: losses.to_vec(),
        });
        Ok(())
    }

    pub fn epoch_complete(&self, epoch: usize) -> bool {
        self.epochs.get(&epoch).is_some_and(|r| r.filled == self.n)
    }

    /// Losses of a completed epoch, indexed by sample id.
    pub fn epoch_losses(&self, epoch: usize) -> Result<&[f64]> {
        match self.epochs.get(&epoch) {
            Some(r) if r.filled == self.n => Ok(&r.losses),
            _ => Err(state(format!("epoch {epoch} is not complete"))),
        }
    }

    /// Recorded `(sample_id, loss)` pairs of one batch.
    pub fn batch_losses(&self, epoch: usize, batch: usize) -> Option<Vec<(usize, f64)>> {
        let rec = self.epochs.get(&epoch)?;
        let (_, ids) = rec.batches.iter().find(|(b, _)| *b == batch)?;
        Some(ids.iter().map(|&id| (id, rec.losses[id])).collect())
    }

    pub fn window(&self) -> impl Iterator<Item = &BatchRecord> {
        self.window.iter()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn completed_epochs(&self) -> Vec<usize> {
        self.epochs
            .iter()
            .filter(|(_, r)| r.filled == self.n)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Quantile of the previous epoch's losses; the same value for every batch
    /// of epoch `t`.
    pub fn threshold_last_epoch(&self, t: usize, q: f64) -> Result<f64> {
        if t == 0 {
            return Err(state("no epoch precedes epoch 0"));
        }
        quantile(self.epoch_losses(t - 1)?, q)
    }

    /// Quantile over the most recent `min(s, available)` recorded batches.
    pub fn threshold_slide_window(&self, s: usize, q: f64) -> Result<f64> {
        if self.window.is_empty() {
            return Err(state("slide window is empty"));
        }
        let take = s.min(self.window.len());
        let values: Vec<f64> = self
            .window
            .iter()
            .skip(self.window.len() - take)
            .flat_map(|b| b.losses.iter().copied())
            .collect();
        quantile(&values, q)
    }

    /// Per-sample `L^early - L^late`.
    pub fn loss_difference(&self, early: usize, late: usize) -> Result<Vec<f64>> {
        let a = self.epoch_losses(early)?;
        let b = self.epoch_losses(late)?;
        Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
    }

    /// CSV `epoch,batch,sample_id,loss`, epochs ascending, batches in
    /// recording order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "batch", "sample_id", "loss"])?;
        for (epoch, rec) in &self.epochs {
            for (batch, ids) in &rec.batches {
                for &id in ids {
                    w.write_record([
                        epoch.to_string(),
                        batch.to_string(),
                        id.to_string(),
                        rec.losses[id].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(w: f64) -> ThresholdPolicy {
        ThresholdPolicy {
            mode: ThresholdMode::LastEpoch,
            window: 4,
            noise_rate: w,
            warmup_epochs: 10,
            ramp_epochs: 40,
        }
    }

    #[test]
    fn quantile_reference_values() {
        let v = [3.0, 1.0, 4.0, 2.0];
        assert_eq!(quantile(&v, 1.0).unwrap(), 4.0);
        assert_eq!(quantile(&v, 0.5).unwrap(), 2.0);
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&[5.0], 0.3).unwrap(), 5.0);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile(&ten, 0.7).unwrap(), 7.0);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&v, 1.5).is_err());
    }

    #[test]
    fn schedule_reference_values() {
        let p = policy(0.5);
        assert_eq!(p.selection_proportion(1), 1.0);
        assert_eq!(p.selection_proportion(10), 1.0);
        assert_eq!(p.selection_proportion(30), 0.75);
        assert_eq!(p.selection_proportion(50), 0.5);
        assert_eq!(p.selection_proportion(51), 0.5);
        assert_eq!(p.selection_proportion(500), 0.5);
    }

    #[test]
    fn record_round_trip_and_completion() {
        let mut l = LossLedger::new(5, 2, 2).unwrap();
        assert_eq!(l.batches_per_epoch(), 3);
        l.record(0, 0, &[3, 1], &[0.5, 0.25]).unwrap();
        assert_eq!(l.batch_losses(0, 0).unwrap(), vec![(3, 0.5), (1, 0.25)]);
        assert!(!l.epoch_complete(0));
        assert!(matches!(l.epoch_losses(0), Err(Error::State(_))));
        l.record(0, 1, &[0, 4], &[1.0, 2.0]).unwrap();
        l.record(0, 2, &[2], &[3.0]).unwrap();
        assert!(l.epoch_complete(0));
        assert_eq!(l.epoch_losses(0).unwrap(), &[1.0, 0.25, 3.0, 0.5, 2.0]);
    }

    #[test]
    fn window_keeps_newest() {
        let mut l = LossLedger::new(10, 1, 3).unwrap();
        for b in 0..4 {
            l.record(0, b, &[b], &[b as f64]).unwrap();
        }
        let kept: Vec<usize> = l.window().map(|r| r.batch).collect();
        assert_eq!(kept, vec![1, 2, 3]);
    }

    #[test]
    fn record_rejects_bad_input() {
        let mut l = LossLedger::new(4, 2, 2).unwrap();
        assert!(matches!(
            l.record(0, 0, &[2, 1], &[0.1, f64::NAN]),
            Err(Error::NonFiniteLoss { sample_id: 1 })
        ));
        assert!(l.record(0, 0, &[1, 1], &[0.1, 0.2]).is_err());
        assert!(l.batch_losses(0, 0).is_none());
        l.record(0, 0, &[0, 1], &[0.1, 0.2]).unwrap();
        assert!(l.record(0, 0, &[2, 3], &[0.1, 0.2]).is_err());
        assert!(l.record(0, 1, &[1, 3], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn last_epoch_threshold() {
        let mut l = LossLedger::new(4, 4, 1).unwrap();
        assert!(matches!(
            l.threshold_last_epoch(1, 0.5),
            Err(Error::State(_))
        ));
        l.record(0, 0, &[0, 1, 2, 3], &[0.7; 4]).unwrap();
        assert_eq!(l.threshold_last_epoch(1, 0.3).unwrap(), 0.7);
        l.record(1, 0, &[0, 1, 2, 3], &[0.4, 0.9, 0.1, 0.3])
            .unwrap();
        assert_eq!(l.threshold_last_epoch(2, 1.0).unwrap(), 0.9);
        assert_eq!(l.threshold_last_epoch(2, 0.5).unwrap(), 0.3);
    }

    #[test]
    fn slide_window_threshold() {
        let mut l = LossLedger::new(100, 4, 3).unwrap();
        assert!(matches!(
            l.threshold_slide_window(2, 0.5),
            Err(Error::State(_))
        ));
        l.record(0, 0, &[0, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0])
            .unwrap();
        assert_eq!(l.threshold_slide_window(1, 0.5).unwrap(), 2.0);
        // Fewer batches than s: everything available is used.
        assert_eq!(l.threshold_slide_window(50, 0.5).unwrap(), 2.0);
        l.record(0, 1, &[4, 5, 6, 7], &[10.0, 20.0, 30.0, 40.0])
            .unwrap();
        assert_eq!(l.threshold_slide_window(1, 0.25).unwrap(), 10.0);
        assert_eq!(l.threshold_slide_window(2, 0.5).unwrap(), 4.0);
    }

    #[test]
    fn loss_difference_subtracts() {
        let mut l = LossLedger::new(2, 2, 1).unwrap();
        l.record(0, 0, &[0, 1], &[2.0, 0.1]).unwrap();
        l.record(1, 0, &[0, 1], &[0.2, 0.05]).unwrap();
        let d = l.loss_difference(0, 1).unwrap();
        assert!((d[0] - 1.8).abs() < 1e-15 && (d[1] - 0.05).abs() < 1e-15);
        assert_eq!(l.loss_difference(1, 1).unwrap(), vec![0.0, 0.0]);
        assert!(l.loss_difference(0, 2).is_err());
    }

    #[test]
    fn csv_dump_lists_every_record() {
        let mut l = LossLedger::new(3, 2, 1).unwrap();
        l.record(0, 0, &[2, 0], &[0.5, 0.25]).unwrap();
        l.record(0, 1, &[1], &[1.5]).unwrap();
        let mut out = Vec::new();
        l.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "epoch,batch,sample_id,loss\n0,0,2,0.5\n0,0,0,0.25\n0,1,1,1.5\n"
        );
    }
}
