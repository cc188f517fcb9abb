use crate::error::{shape, Result};

use super::{Gradients, Mlp};

/// SGD with classical momentum; weight decay is folded into the gradient
/// before it enters the velocity.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &Mlp, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(model),
        }
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }

    /// `v ← μ·v + g + λ·θ`, then `θ ← θ − η·v`.
    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != model.layers().len() {
            return Err(shape("gradient layer count differs from model"));
        }
        for ((param, grad), vel) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity.layers)
        {
            if param.weights.dim() != grad.weights.dim() || param.bias.dim() != grad.bias.dim() {
                return Err(shape("gradient shape differs from parameter shape"));
            }
            ndarray::Zip::from(&mut param.weights)
                .and(&grad.weights)
                .and(&mut vel.weights)
                .for_each(|p, &g, v| {
                    *v = self.momentum * *v + g + self.weight_decay * *p;
                    *p -= self.learning_rate * *v;
                });
            ndarray::Zip::from(&mut param.bias)
                .and(&grad.bias)
                .and(&mut vel.bias)
                .for_each(|p, &g, v| {
                    *v = self.momentum * *v + g + self.weight_decay * *p;
                    *p -= self.learning_rate * *v;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn filled(model: &Mlp, value: f64) -> Gradients {
        let mut g = Gradients::zeros_like(model);
        for l in &mut g.layers {
            l.weights.fill(value);
            l.bias.fill(value);
        }
        g
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut m = Mlp::init(&[3, 4, 2], 0).unwrap();
        let before = m.clone();
        let mut opt = Sgd::new(&m, 1.0, 0.0, 0.0);
        let g = filled(&m, 0.25);
        opt.step(&mut m, &g).unwrap();
        for (a, b) in m.layers().iter().zip(before.layers()) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_eq!(*x, y - 0.25);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = Mlp::init(&[3, 4, 2], 0).unwrap();
        let before = m.clone();
        let mut opt = Sgd::new(&m, 0.1, 0.9, 0.0);
        let g = Gradients::zeros_like(&m);
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn momentum_unrolls_over_two_steps() {
        let mut m = Mlp::zeros(&[2, 2]).unwrap();
        let g = filled(&m, 0.5);
        let lr = 0.1;
        let mut opt = Sgd::new(&m, lr, 0.9, 0.0);
        opt.step(&mut m, &g).unwrap();
        opt.step(&mut m, &g).unwrap();
        let expected = -lr * 0.5 * (1.0 + 1.9);
        for v in m.layers()[0].weights.iter() {
            assert_abs_diff_eq!(*v, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut m = Mlp::zeros(&[1, 2]).unwrap();
        m.layers_mut()[0].weights.fill(2.0);
        let mut opt = Sgd::new(&m, 0.5, 0.9, 0.1);
        let g = Gradients::zeros_like(&m);
        opt.step(&mut m, &g).unwrap();
        // v = 0.1 * 2 = 0.2, p = 2 - 0.5 * 0.2
        assert_abs_diff_eq!(m.layers()[0].weights[[0, 0]], 1.9, epsilon = 1e-15);
        assert_abs_diff_eq!(
            opt.velocity().layers[0].weights[[0, 0]],
            0.2,
            epsilon = 1e-15
        );
    }
}
