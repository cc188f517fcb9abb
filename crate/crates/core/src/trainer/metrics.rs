use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Provenance;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Dlt,
    PlainCe,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Dlt => "dlt",
            Phase::PlainCe => "plain-ce",
        }
    }
}

/// How one epoch's samples were routed, keyed by ground truth. "Clean" here
/// means the observed label is correct, which includes hard samples; the
/// `hard_*` counts break that group down further.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCounts {
    pub clean_as_clean: usize,
    pub clean_as_noisy: usize,
    pub noisy_as_clean: usize,
    pub noisy_as_noisy: usize,
    pub hard_as_clean: usize,
    pub hard_as_noisy: usize,
}

impl SelectionCounts {
    pub fn add(&mut self, provenance: Provenance, routed_clean: bool) {
        let truly_clean = provenance != Provenance::Noisy;
        match (truly_clean, routed_clean) {
            (true, true) => self.clean_as_clean += 1,
            (true, false) => self.clean_as_noisy += 1,
            (false, true) => self.noisy_as_clean += 1,
            (false, false) => self.noisy_as_noisy += 1,
        }
        if provenance.is_hard() {
            if routed_clean {
                self.hard_as_clean += 1;
            } else {
                self.hard_as_noisy += 1;
            }
        }
    }

    pub fn total(&self) -> usize {
        self.clean_as_clean + self.clean_as_noisy + self.noisy_as_clean + self.noisy_as_noisy
    }

    pub fn routed_clean(&self) -> usize {
        self.clean_as_clean + self.noisy_as_clean
    }

    /// Share of the clean side that is truly clean (1 when the side is empty).
    pub fn precision(&self) -> f64 {
        ratio(self.clean_as_clean, self.routed_clean())
    }

    /// Share of truly clean samples routed to the clean side (1 when there are none).
    pub fn recall(&self) -> f64 {
        ratio(
            self.clean_as_clean,
            self.clean_as_clean + self.clean_as_noisy,
        )
    }

    pub fn hard_clean_fraction(&self) -> Option<f64> {
        let total = self.hard_as_clean + self.hard_as_noisy;
        (total > 0).then(|| self.hard_as_clean as f64 / total as f64)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    /// Mean pre-update cross-entropy against the observed labels.
    pub train_loss: f64,
    /// Mean value of the optimised objective over batches.
    pub objective: f64,
    pub test_accuracy: f64,
    pub q: Option<f64>,
    pub tau_mean: Option<f64>,
    pub selection: Option<SelectionCounts>,
}

impl EpochMetrics {
    pub fn precision(&self) -> Option<f64> {
        self.selection.map(|s| s.precision())
    }

    pub fn recall(&self) -> Option<f64> {
        self.selection.map(|s| s.recall())
    }
}

pub const METRICS_HEADER: [&str; 16] = [
    "epoch",
    "phase",
    "learning_rate",
    "train_loss",
    "objective",
    "test_accuracy",
    "q",
    "tau_mean",
    "selection_precision",
    "selection_recall",
    "clean_as_clean",
    "clean_as_noisy",
    "noisy_as_clean",
    "noisy_as_noisy",
    "hard_as_clean",
    "hard_as_noisy",
];

/// One row per epoch with [`METRICS_HEADER`] columns. Selection columns are
/// empty for epochs without a clean/noisy split.
pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in metrics {
        let mut rec = vec![
            m.epoch.to_string(),
            m.phase.as_str().to_string(),
            m.learning_rate.to_string(),
            m.train_loss.to_string(),
            m.objective.to_string(),
            m.test_accuracy.to_string(),
            opt(m.q),
            opt(m.tau_mean),
            opt(m.precision()),
            opt(m.recall()),
        ];
        match &m.selection {
            Some(s) => rec.extend(
                [
                    s.clean_as_clean,
                    s.clean_as_noisy,
                    s.noisy_as_clean,
                    s.noisy_as_noisy,
                    s.hard_as_clean,
                    s.hard_as_noisy,
                ]
                .map(|c| c.to_string()),
            ),
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
