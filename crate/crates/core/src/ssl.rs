//! Semi-supervised pieces applied after a batch is split by the loss
//! threshold: sharpened pseudo-labels, mixup, the uniform-prior regulariser and
//! the combined objective `L_clean + λ_n·L_noisy + λ_r·L_reg`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape, Result};
use crate::nn::{self, Gradients, LossKind, Mlp, PerSampleLoss, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchSplit {
    pub clean_ids: Vec<usize>,
    pub noisy_ids: Vec<usize>,
}

/// `l ≤ τ` goes to the clean side, everything else to the noisy side.
pub fn split_batch(losses: &[PerSampleLoss], threshold: f64) -> BatchSplit {
    let mut split = BatchSplit::default();
    for l in losses {
        if l.value <= threshold {
            split.clean_ids.push(l.sample_id);
        } else {
            split.noisy_ids.push(l.sample_id);
        }
    }
    split
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslWeights {
    pub lambda_noisy: f64,
    pub lambda_reg: f64,
    pub temperature: f64,
    pub augmentations: usize,
    /// Portion of the clean side mixed into the noisy side.
    pub mix_fraction: f64,
    pub beta_alpha: f64,
    /// Standard deviation of the jitter used as augmentation.
    pub augment_strength: f64,
}

impl Default for SslWeights {
    fn default() -> Self {
        SslWeights {
            lambda_noisy: 25.0,
            lambda_reg: 1.0,
            temperature: 0.5,
            augmentations: 2,
            mix_fraction: 0.5,
            beta_alpha: 4.0,
            augment_strength: 0.1,
        }
    }
}

impl SslWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_noisy >= 0.0
            && self.lambda_reg >= 0.0
            && self.temperature > 0.0
            && self.augmentations >= 1
            && (0.0..=1.0).contains(&self.mix_fraction)
            && self.beta_alpha > 0.0
            && self.augment_strength >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!(
                "invalid ssl weights {self:?}"
            )))
        }
    }
}

/// Temperature sharpening `p_c^{1/T} / Σ_k p_k^{1/T}`, evaluated in log space
/// so small probabilities do not underflow for small `T`.
pub fn sharpen(probs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(contract("temperature must be positive"));
    }
    if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(contract("probabilities must be finite and nonnegative"));
    }
    let max = probs.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(contract("cannot sharpen an all-zero vector"));
    }
    if temperature == 1.0 {
        let sum: f64 = probs.iter().sum();
        return Ok(probs.iter().map(|p| p / sum).collect());
    }
    let lmax = max.ln();
    let mut out: Vec<f64> = probs
        .iter()
        .map(|&p| ((p.ln() - lmax) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Mean softmax output over the augmented views, sharpened.
pub fn pseudo_label(model: &Mlp, views: &[Vec<f64>], temperature: f64) -> Result<Vec<f64>> {
    if views.is_empty() {
        return Err(contract("pseudo-label needs at least one view"));
    }
    let dim = views[0].len();
    let flat: Vec<f64> = views.iter().flatten().copied().collect();
    let batch =
        ArrayView2::from_shape((views.len(), dim), &flat).map_err(|e| shape(e.to_string()))?;
    let mean = model
        .forward_batch(batch)?
        .mean_axis(Axis(0))
        .expect("nonempty");
    sharpen(mean.as_slice().expect("contiguous"), temperature)
}

/// `λ·(x1, y1) + (1−λ)·(x2, y2)`.
pub fn mixup(x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
            .collect()
    };
    (mix(x1, x2), mix(y1, y2))
}

/// `max(λ', 1−λ')` with `λ' ~ Beta(α, α)`, so the first mixup operand dominates.
pub fn sample_mix_lambda<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| contract(e.to_string()))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// `KL(π ‖ p̄)` with the uniform prior `π_c = 1/C`.
pub fn reg_loss(mean_prediction: &[f64]) -> f64 {
    let prior = 1.0 / mean_prediction.len() as f64;
    let kl: f64 = mean_prediction
        .iter()
        .map(|&p| prior * (prior / p.max(PROB_FLOOR)).ln())
        .sum();
    kl.max(0.0)
}

pub fn total_loss(
    l_clean: f64,
    l_noisy: f64,
    l_reg: f64,
    lambda_noisy: f64,
    lambda_reg: f64,
) -> f64 {
    l_clean + lambda_noisy * l_noisy + lambda_reg * l_reg
}

/// Mixed inputs and soft targets for one optimisation step.
#[derive(Debug, Clone)]
pub struct SslBatch {
    pub clean_x: Array2<f64>,
    pub clean_y: Array2<f64>,
    pub noisy_x: Array2<f64>,
    pub noisy_y: Array2<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub clean: f64,
    pub noisy: f64,
    pub reg: f64,
    pub total: f64,
}

/// Value and parameter gradients of the combined objective.
///
/// `L_clean` is the mean cross-entropy over the clean rows, `L_noisy` the mean
/// squared error over the noisy rows, and `L_reg` is taken on the mean softmax
/// output over all rows. An empty side contributes nothing.
pub fn total_loss_gradients(
    model: &Mlp,
    batch: &SslBatch,
    weights: &SslWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let (n_clean, n_noisy) = (batch.clean_x.nrows(), batch.noisy_x.nrows());
    let rows = n_clean + n_noisy;
    if rows == 0 {
        return Err(contract("both sides of the batch are empty"));
    }
    let c = model.class_count();
    if batch.clean_y.dim() != (n_clean, c) || batch.noisy_y.dim() != (n_noisy, c) {
        return Err(shape("targets do not match inputs"));
    }
    let x = concatenate(Axis(0), &[batch.clean_x.view(), batch.noisy_x.view()])
        .map_err(|e| shape(e.to_string()))?;
    let cache = model.forward_cached(x.view())?;
    let probs = cache.probs();
    let mut dlogits = Array2::<f64>::zeros((rows, c));
    let mut parts = LossBreakdown::default();

    if n_clean > 0 {
        let (l, d) = nn::loss_and_logit_grad(
            probs.slice(s![..n_clean, ..]),
            batch.clean_y.view(),
            LossKind::CrossEntropy,
            &vec![1.0; n_clean],
        )?;
        parts.clean = l;
        dlogits.slice_mut(s![..n_clean, ..]).assign(&d);
    }
    if n_noisy > 0 {
        let (l, d) = nn::loss_and_logit_grad(
            probs.slice(s![n_clean.., ..]),
            batch.noisy_y.view(),
            LossKind::Mse,
            &vec![1.0; n_noisy],
        )?;
        parts.noisy = l;
        let d = d * weights.lambda_noisy;
        dlogits.slice_mut(s![n_clean.., ..]).assign(&d);
    }

    let mean = probs.mean_axis(Axis(0)).expect("nonempty");
    let mean = mean.as_slice().expect("contiguous");
    parts.reg = reg_loss(mean);
    if weights.lambda_reg != 0.0 {
        // ∂L_reg/∂p_i,c = −π_c / (M · p̄_c)
        let prior = 1.0 / c as f64;
        let dp: Vec<f64> = mean
            .iter()
            .map(|&m| -prior / (rows as f64 * m.max(PROB_FLOOR)))
            .collect();
        let mut buf = vec![0.0; c];
        for (p, mut d) in probs.rows().into_iter().zip(dlogits.rows_mut()) {
            nn::softmax_vjp(
                p.as_slice().expect("contiguous"),
                &dp,
                &mut buf,
                weights.lambda_reg,
            );
            d.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
        }
    }
    parts.total = total_loss(
        parts.clean,
        parts.noisy,
        parts.reg,
        weights.lambda_noisy,
        weights.lambda_reg,
    );
    let grads = model.backward_from_logits(&cache, dlogits.view())?;
    Ok((parts, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn losses(values: &[f64]) -> Vec<PerSampleLoss> {
        values
            .iter()
            .enumerate()
            .map(|(sample_id, &value)| PerSampleLoss { sample_id, value })
            .collect()
    }

    #[test]
    fn split_is_inclusive_at_threshold() {
        let s = split_batch(&losses(&[0.1, 0.5, 0.9]), 0.5);
        assert_eq!(s.clean_ids, vec![0, 1]);
        assert_eq!(s.noisy_ids, vec![2]);
        assert!(split_batch(&losses(&[0.1, 0.2]), 0.2).noisy_ids.is_empty());
    }

    #[test]
    fn sharpen_reference_values() {
        let out = sharpen(&[0.6, 0.4], 0.5).unwrap();
        assert_abs_diff_eq!(out[0], 0.692308, epsilon = 1e-6);
        assert_abs_diff_eq!(out[1], 0.307692, epsilon = 1e-6);
        let p = [0.2, 0.5, 0.3];
        for (a, b) in sharpen(&p, 1.0).unwrap().iter().zip(&p) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        for v in sharpen(&[0.25; 4], 0.1).unwrap() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        assert!(sharpen(&[0.0, 0.0], 0.5).is_err());
        assert!(sharpen(&[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn sharpen_survives_tiny_probabilities() {
        let out = sharpen(&[1e-200, 1e-180], 0.01).unwrap();
        assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mixup_endpoints() {
        let (x, y) = mixup(&[1.0, 2.0], &[1.0, 0.0], &[3.0, 6.0], &[0.0, 1.0], 1.0);
        assert_eq!((x, y), (vec![1.0, 2.0], vec![1.0, 0.0]));
        let (x, y) = mixup(&[1.0, 2.0], &[1.0, 0.0], &[3.0, 6.0], &[0.0, 1.0], 0.5);
        assert_eq!((x, y), (vec![2.0, 4.0], vec![0.5, 0.5]));
    }

    #[test]
    fn mix_lambda_dominates() {
        let mut r = crate::rng::stream(1, 1);
        for _ in 0..1000 {
            let l = sample_mix_lambda(&mut r, 4.0).unwrap();
            assert!((0.5..=1.0).contains(&l));
        }
    }

    #[test]
    fn reg_loss_reference_values() {
        assert_eq!(reg_loss(&[0.25; 4]), 0.0);
        assert_abs_diff_eq!(reg_loss(&[0.75, 0.25]), 0.143841, epsilon = 1e-6);
    }

    #[test]
    fn total_loss_reference_values() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 25.0, 1.0), 54.0);
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
    }

    #[test]
    fn pseudo_label_single_view_matches_forward() {
        let m = Mlp::init(&[3, 6, 4], 5).unwrap();
        let x = vec![0.2, -1.0, 0.4];
        let p = pseudo_label(&m, std::slice::from_ref(&x), 1.0).unwrap();
        for (a, b) in p.iter().zip(m.forward(&x).unwrap()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn pseudo_label_averages_before_sharpening() {
        let m = Mlp::init(&[3, 6, 4], 5).unwrap();
        let views = vec![vec![0.2, -1.0, 0.4], vec![1.0, 0.5, -0.3]];
        let a = m.forward(&views[0]).unwrap();
        let b = m.forward(&views[1]).unwrap();
        let mean: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect();
        let expected = sharpen(&mean, 0.5).unwrap();
        let got = pseudo_label(&m, &views, 0.5).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(got.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    fn sample_batch() -> SslBatch {
        SslBatch {
            clean_x: array![[0.5, -1.0, 2.0], [1.5, 0.3, -0.7], [0.0, 0.2, 0.1]],
            clean_y: array![[0.8, 0.2, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
            noisy_x: array![[-0.4, 0.9, 1.1], [0.7, -0.6, 0.0]],
            noisy_y: array![[0.1, 0.6, 0.3], [0.5, 0.25, 0.25]],
        }
    }

    #[test]
    fn reduces_to_clean_cross_entropy_without_weights() {
        let m = Mlp::init(&[3, 8, 3], 4).unwrap();
        let b = sample_batch();
        let w = SslWeights {
            lambda_noisy: 0.0,
            lambda_reg: 0.0,
            ..SslWeights::default()
        };
        let (parts, g) = total_loss_gradients(&m, &b, &w).unwrap();
        let (l, g_ref) = nn::backward(
            &m,
            b.clean_x.view(),
            b.clean_y.view(),
            LossKind::CrossEntropy,
            &[1.0; 3],
        )
        .unwrap();
        assert_abs_diff_eq!(parts.total, l, epsilon = 1e-14);
        for (a, e) in g.iter().zip(g_ref.iter()) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-13);
        }
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let m = Mlp::init(&[3, 8, 3], 9).unwrap();
        let b = sample_batch();
        let w = SslWeights::default();
        let (parts, g) = total_loss_gradients(&m, &b, &w).unwrap();
        let objective = |model: &Mlp| -> f64 {
            let x = concatenate(Axis(0), &[b.clean_x.view(), b.noisy_x.view()]).unwrap();
            let p = model.forward_batch(x.view()).unwrap();
            let mut clean = 0.0;
            for i in 0..3 {
                clean +=
                    nn::soft_cross_entropy(&p.row(i).to_vec(), &b.clean_y.row(i).to_vec()).unwrap();
            }
            let mut noisy = 0.0;
            for i in 0..2 {
                noisy += nn::mse_loss(&p.row(3 + i).to_vec(), &b.noisy_y.row(i).to_vec()).unwrap();
            }
            let mean = p.mean_axis(Axis(0)).unwrap().to_vec();
            total_loss(
                clean / 3.0,
                noisy / 2.0,
                reg_loss(&mean),
                w.lambda_noisy,
                w.lambda_reg,
            )
        };
        assert_abs_diff_eq!(parts.total, objective(&m), epsilon = 1e-12);
        let h = 1e-5;
        let mut probe = m.clone();
        for li in 0..m.layers().len() {
            let (rows, cols) = m.layers()[li].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = probe.layers()[li].weights[[r, c]];
                    probe.layers_mut()[li].weights[[r, c]] = orig + h;
                    let plus = objective(&probe);
                    probe.layers_mut()[li].weights[[r, c]] = orig - h;
                    let minus = objective(&probe);
                    probe.layers_mut()[li].weights[[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * h);
                    let analytic = g.layers[li].weights[[r, c]];
                    let rel =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-4, "layer {li} ({r},{c}): {analytic} vs {numeric}");
                }
            }
        }
    }
}
