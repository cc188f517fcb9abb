//! Learning from noisy labels with dynamic loss thresholds.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small dense softmax classifier with hand-derived gradients and SGD.
//! - [`data`]: synthetic Gaussian-blob datasets, label-noise injection, jitter
//!   augmentation and hard-sample generation.
//! - [`ledger`]: per-sample loss history, nearest-rank quantiles, last-epoch and
//!   slide-window thresholds, and the decreasing selection-proportion schedule.
//! - [`ssl`]: the clean/noisy batch split, sharpened pseudo-labels, mixup and the
//!   regularised total loss.
//! - [`estimator`]: noise-rate estimation from early/late loss differences with a
//!   two-component Gaussian mixture.
//! - [`trainer`]: the end-to-end training loop, plain cross-entropy baselines,
//!   metrics and the hard-sample study.
//!
//! Everything runs in `f64` and every randomised step takes an explicit seed, so
//! a run is bitwise reproducible.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimator;
pub mod ledger;
pub mod nn;
pub mod rng;
pub mod ssl;
pub mod trainer;

pub use error::{Error, Result};
