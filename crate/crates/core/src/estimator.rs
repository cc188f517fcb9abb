//! Noise-rate estimation from per-sample loss differences.
//!
//! A two-component 1-D Gaussian mixture is fitted to `L^early − L^late` with
//! EM. Clean samples are fitted early and change little, so they sit in the
//! small-mean component; a sample is counted clean when its posterior for that
//! component reaches `theta`, and the noise rate is `1 − n_clean / N`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture2 {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

impl GaussianMixture2 {
    /// Log-likelihood of `values` under the mixture.
    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .map(|&x| {
                let a = self.log_weighted_density(0, x);
                let b = self.log_weighted_density(1, x);
                log_add(a, b)
            })
            .sum()
    }

    fn log_weighted_density(&self, k: usize, x: f64) -> f64 {
        let v = self.variances[k];
        self.weights[k].ln() - 0.5 * (2.0 * PI * v).ln() - (x - self.means[k]).powi(2) / (2.0 * v)
    }

    fn sorted(mut self) -> Self {
        if self.means[0] > self.means[1] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
        }
        self
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-6,
            variance_floor: VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub mixture: GaussianMixture2,
    /// Log-likelihood at initialisation and after every EM iteration.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// EM for a two-component mixture, initialised by splitting the sorted values
/// at the median. The initialisation depends only on the multiset of values,
/// so the fit does not depend on input order.
pub fn fit_gmm2(values: &[f64], config: &EmConfig) -> Result<EmFit> {
    let n = values.len();
    if n < 4 {
        return Err(contract(format!(
            "mixture fit needs at least 4 values, got {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(contract("mixture fit needs finite values"));
    }
    let floor = config.variance_floor;
    let (_, total_var) = mean_var(values);
    if total_var <= floor {
        return Err(Error::Degenerate(format!(
            "sample variance {total_var:e} is within the variance floor"
        )));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = sorted.split_at(n / 2);
    let (m_lo, v_lo) = mean_var(lo);
    let (m_hi, v_hi) = mean_var(hi);
    let mut gmm = GaussianMixture2 {
        weights: [lo.len() as f64 / n as f64, hi.len() as f64 / n as f64],
        means: [m_lo, m_hi],
        variances: [v_lo.max(floor), v_hi.max(floor)],
    };

    let mut lls = vec![gmm.log_likelihood(values)];
    let mut resp = vec![0.0; n];
    let mut converged = false;
    for _ in 0..config.max_iter {
        // E-step: responsibility of component 0.
        for (r, &x) in resp.iter_mut().zip(values) {
            let a = gmm.log_weighted_density(0, x);
            let b = gmm.log_weighted_density(1, x);
            *r = (a - log_add(a, b)).exp();
        }
        // M-step.
        let n0: f64 = resp.iter().sum();
        let n1 = n as f64 - n0;
        if n0 < 1e-9 || n1 < 1e-9 {
            return Err(Error::Degenerate(
                "a mixture component lost all mass".into(),
            ));
        }
        let mu0 = resp.iter().zip(values).map(|(r, x)| r * x).sum::<f64>() / n0;
        let mu1 = resp
            .iter()
            .zip(values)
            .map(|(r, x)| (1.0 - r) * x)
            .sum::<f64>()
            / n1;
        let var0 = resp
            .iter()
            .zip(values)
            .map(|(r, x)| r * (x - mu0).powi(2))
            .sum::<f64>()
            / n0;
        let var1 = resp
            .iter()
            .zip(values)
            .map(|(r, x)| (1.0 - r) * (x - mu1).powi(2))
            .sum::<f64>()
            / n1;
        gmm = GaussianMixture2 {
            weights: [n0 / n as f64, n1 / n as f64],
            means: [mu0, mu1],
            variances: [var0.max(floor), var1.max(floor)],
        };
        let ll = gmm.log_likelihood(values);
        let gain = ll - lls.last().unwrap();
        lls.push(ll);
        if gain < config.tol {
            converged = true;
            break;
        }
    }
    let mixture = gmm.sorted();
    if mixture.weights.iter().any(|&w| !(w > 0.0 && w < 1.0)) {
        return Err(Error::Degenerate("a mixture weight collapsed".into()));
    }
    Ok(EmFit {
        mixture,
        log_likelihoods: lls,
        converged,
    })
}

/// Posterior probability that `value` came from the small-mean component.
/// Evaluated from the log-density gap, so it stays monotone in the tails where
/// both densities underflow.
pub fn posterior_clean(gmm: &GaussianMixture2, value: f64) -> f64 {
    let (small, large) = if gmm.means[0] <= gmm.means[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let gap = gmm.log_weighted_density(large, value) - gmm.log_weighted_density(small, value);
    1.0 / (1.0 + gap.exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub phi: Vec<f64>,
    pub theta: f64,
    pub n_clean: usize,
    pub rate: f64,
    pub mixture: GaussianMixture2,
}

pub fn estimate_noise_rate(
    diffs: &[f64],
    theta: f64,
    config: &EmConfig,
) -> Result<EstimationResult> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(contract(format!("theta {theta} outside [0, 1]")));
    }
    let fit = fit_gmm2(diffs, config)?;
    let phi: Vec<f64> = diffs
        .iter()
        .map(|&d| posterior_clean(&fit.mixture, d))
        .collect();
    let n_clean = phi.iter().filter(|&&p| p >= theta).count();
    let rate = 1.0 - n_clean as f64 / diffs.len() as f64;
    Ok(EstimationResult {
        phi,
        theta,
        n_clean,
        rate,
        mixture: fit.mixture,
    })
}

/// JSON-friendly view of an [`EstimationResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationSummary {
    pub theta: f64,
    pub n_clean: usize,
    pub n_total: usize,
    pub estimated_rate: f64,
    pub mixture: GaussianMixture2,
    /// Counts of `phi` in ten equal bins over `[0, 1]`.
    pub phi_histogram: Vec<usize>,
}

impl EstimationResult {
    pub fn summary(&self) -> EstimationSummary {
        let mut hist = vec![0usize; 10];
        for &p in &self.phi {
            hist[((p * 10.0) as usize).min(9)] += 1;
        }
        EstimationSummary {
            theta: self.theta,
            n_clean: self.n_clean,
            n_total: self.phi.len(),
            estimated_rate: self.rate,
            mixture: self.mixture,
            phi_histogram: hist,
        }
    }
}
