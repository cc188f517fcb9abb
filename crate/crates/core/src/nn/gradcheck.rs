//! Central finite-difference checks for the analytic gradients.
//!
//! The numerical side only ever calls the forward pass, so it stays
//! independent of the backpropagation code it checks. Coordinates whose
//! perturbation flips the sign of any hidden pre-activation straddle a
//! rectifier kink, where finite differences are meaningless; those are skipped
//! and counted.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rng;

use super::{backward, mse_loss, soft_cross_entropy, Layer, LossKind, Mlp};

/// Denominator floor for relative errors, so entries that are zero up to
/// round-off do not dominate.
pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub models: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_param_rel_error: f64,
    pub max_input_rel_error: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_param_rel_error.max(self.max_input_rel_error)
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.models += other.models;
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.max_param_rel_error = self.max_param_rel_error.max(other.max_param_rel_error);
        self.max_input_rel_error = self.max_input_rel_error.max(other.max_input_rel_error);
    }
}

fn batch_loss(
    model: &Mlp,
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    kind: LossKind,
    weights: &[f64],
) -> Result<f64> {
    let probs = model.forward_batch(x)?;
    let mut total = 0.0;
    for (i, (p, t)) in probs.rows().into_iter().zip(targets.rows()).enumerate() {
        let (p, t) = (p.to_vec(), t.to_vec());
        let l = match kind {
            LossKind::CrossEntropy => soft_cross_entropy(&p, &t)?,
            LossKind::Mse => mse_loss(&p, &t)?,
        };
        total += weights[i] * l;
    }
    Ok(total / x.nrows() as f64)
}

/// The `k`-th parameter of a layer, weights (row-major) before bias.
fn param_mut(layer: &mut Layer, k: usize) -> &mut f64 {
    let n_w = layer.weights.len();
    if k < n_w {
        let cols = layer.weights.ncols();
        &mut layer.weights[[k / cols, k % cols]]
    } else {
        &mut layer.bias[k - n_w]
    }
}

fn relu_pattern(model: &Mlp, x: ArrayView2<f64>) -> Result<Vec<bool>> {
    let cache = model.forward_cached(x)?;
    let hidden = cache.pre_activations();
    Ok(hidden[..hidden.len() - 1]
        .iter()
        .flat_map(|z| z.iter().map(|&v| v > 0.0))
        .collect())
}

/// Compares [`backward`] against central differences of the batch loss.
pub fn check_parameters(
    model: &Mlp,
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    kind: LossKind,
    weights: &[f64],
    step: f64,
) -> Result<GradCheckReport> {
    let (_, mut grads) = backward(model, x, targets, kind, weights)?;
    let base_pattern = relu_pattern(model, x)?;
    let mut report = GradCheckReport::default();
    let mut probe = model.clone();
    for li in 0..model.layers().len() {
        let n_w = model.layers()[li].weights.len();
        let n_b = model.layers()[li].bias.len();
        for k in 0..n_w + n_b {
            let analytic = *param_mut(&mut grads.layers[li], k);
            let original = *param_mut(&mut probe.layers_mut()[li], k);
            *param_mut(&mut probe.layers_mut()[li], k) = original + step;
            let pattern_plus = relu_pattern(&probe, x)?;
            let plus = batch_loss(&probe, x, targets, kind, weights)?;
            *param_mut(&mut probe.layers_mut()[li], k) = original - step;
            let pattern_minus = relu_pattern(&probe, x)?;
            let minus = batch_loss(&probe, x, targets, kind, weights)?;
            *param_mut(&mut probe.layers_mut()[li], k) = original;
            if pattern_plus != base_pattern || pattern_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            report.checked += 1;
            report.max_param_rel_error = report
                .max_param_rel_error
                .max(relative_error(analytic, numeric));
        }
    }
    Ok(report)
}

/// Compares [`Mlp::input_gradient`] against central differences on `x`.
pub fn check_input(model: &Mlp, x: &[f64], label: usize, step: f64) -> Result<GradCheckReport> {
    let analytic = model.input_gradient(x, label)?;
    let target = super::one_hot(label, model.class_count());
    let loss = |v: &[f64]| -> Result<f64> { soft_cross_entropy(&model.forward(v)?, &target) };
    let pattern = |v: &[f64]| relu_pattern(model, ArrayView2::from_shape((1, v.len()), v).unwrap());
    let base_pattern = pattern(x)?;
    let mut report = GradCheckReport::default();
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let (plus, pp) = (loss(&probe)?, pattern(&probe)?);
        probe[j] = x[j] - step;
        let (minus, pm) = (loss(&probe)?, pattern(&probe)?);
        probe[j] = x[j];
        if pp != base_pattern || pm != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        report.checked += 1;
        report.max_input_rel_error = report
            .max_input_rel_error
            .max(relative_error(analytic[j], numeric));
    }
    Ok(report)
}

/// Random small models, batches, soft targets and sample weights; both loss
/// kinds and input gradients are checked for each model.
pub fn run_suite(n_models: usize, seed: u64, step: f64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for m in 0..n_models {
        let mut r = rng::stream(seed, m as u64);
        let depth = r.random_range(1..=3);
        let mut dims = vec![r.random_range(2..=6)];
        for _ in 0..depth - 1 {
            dims.push(r.random_range(3..=8));
        }
        let classes = r.random_range(2..=5);
        dims.push(classes);
        let mut model = Mlp::init(&dims, r.random())?;
        for layer in model.layers_mut() {
            layer
                .bias
                .mapv_inplace(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut r));
        }
        let batch = r.random_range(1..=4);
        let x = Array2::from_shape_fn((batch, dims[0]), |_| StandardNormal.sample(&mut r));
        let mut targets = Array2::from_shape_fn((batch, classes), |_| r.random::<f64>());
        for mut row in targets.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let weights: Vec<f64> = (0..batch).map(|_| r.random_range(0.1..2.0)).collect();
        for kind in [LossKind::CrossEntropy, LossKind::Mse] {
            report.merge(&check_parameters(
                &model,
                x.view(),
                targets.view(),
                kind,
                &weights,
                step,
            )?);
        }
        for row in x.rows() {
            let label = r.random_range(0..classes);
            report.merge(&check_input(&model, &row.to_vec(), label, step)?);
        }
        report.models += 1;
    }
    Ok(report)
}
