use crate::error::{contract, shape, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerSampleLoss {
    pub sample_id: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Cross-entropy against a one-hot label vector.
pub fn cross_entropy(probs: &[f64], y: &[f64]) -> Result<f64> {
    if probs.len() != y.len() {
        return Err(shape(format!(
            "{} probs vs {} label entries",
            probs.len(),
            y.len()
        )));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(contract("label is not one-hot"));
    }
    soft_cross_entropy(probs, y)
}

/// `-Σ_c t_c log p_c` for an arbitrary nonnegative target vector.
pub fn soft_cross_entropy(probs: &[f64], target: &[f64]) -> Result<f64> {
    if probs.len() != target.len() {
        return Err(shape(format!(
            "{} probs vs {} targets",
            probs.len(),
            target.len()
        )));
    }
    let loss = probs
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_FLOOR).ln())
        .sum::<f64>();
    // -0.0 when the true class has probability 1.
    Ok(loss + 0.0)
}

pub fn mse_loss(probs: &[f64], target: &[f64]) -> Result<f64> {
    if probs.len() != target.len() {
        return Err(shape(format!(
            "{} probs vs {} targets",
            probs.len(),
            target.len()
        )));
    }
    let sum: f64 = probs.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_reference_values() {
        assert_eq!(
            cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            cross_entropy(&[0.25, 0.5, 0.25], &[0.0, 0.0, 1.0]).unwrap(),
            1.386294,
            epsilon = 1e-6
        );
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let l = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(l, -PROB_FLOOR.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_soft_labels() {
        assert!(cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[1.0, 1.0]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn mse_reference_values() {
        assert_eq!(mse_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse_loss(&[0.75, 0.25], &[0.25, 0.75]).unwrap(), 0.25);
        assert!(mse_loss(&[1.0], &[0.0, 1.0]).is_err());
    }
}
