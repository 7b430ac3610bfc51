//! Stochastic gradient descent with classical momentum and a cosine
//! learning-rate schedule.

use super::Tensor;

/// SGD with momentum over a fixed parameter list.
///
/// Velocity follows `v <- momentum * v + g`, then `w <- w - lr * v`.
/// Velocity buffers are keyed by position in the parameter list and start
/// at zero.
pub struct SgdMomentum {
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(params: Vec<Tensor>, momentum: f64) -> Self {
        let velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        SgdMomentum { params, velocity, momentum }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Apply one update using each parameter's accumulated gradient, which
    /// is consumed. Every parameter must have a gradient; a missing one
    /// means the loss graph silently dropped a parameter, which is a bug.
    pub fn step(&mut self, lr: f64) {
        for (idx, p) in self.params.iter().enumerate() {
            let g = p.take_grad().unwrap_or_else(|| {
                panic!(
                    "optimizer step: parameter {idx} (shape {:?}) has no gradient",
                    p.shape()
                )
            });
            let v = &mut self.velocity[idx];
            p.update_data(|w| {
                for i in 0..w.len() {
                    v[i] = self.momentum * v[i] + g[i];
                    w[i] -= lr * v[i];
                }
            });
        }
    }

    /// Drop any gradients left on the parameters without updating.
    pub fn zero_grad(&self) {
        for p in &self.params {
            p.take_grad();
        }
    }
}

/// Cosine-annealed learning rate: starts at `lr0`, ends at zero.
///
/// `lr(step) = lr0 * 0.5 * (1 + cos(pi * step / total))` with `step`
/// counted from zero over `total` scheduled steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    assert!(total > 0, "cosine_lr: total steps must be positive");
    let frac = step as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_single_step() {
        let w = Tensor::vector(vec![1.0]).with_grad();
        let loss = w.mul(&w).sum_all();
        loss.backward();
        let mut opt = SgdMomentum::new(vec![w.clone()], 0.0);
        opt.step(0.05);
        assert_eq!(w.data_vec(), vec![0.9]);
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        // Constant gradient 1.0, momentum 0.9, lr 0.1:
        // step 1: v = 1.0, w = 1.0 - 0.1 = 0.9
        // step 2: v = 1.9, w = 0.9 - 0.19 = 0.71
        let w = Tensor::vector(vec![1.0]).with_grad();
        let mut opt = SgdMomentum::new(vec![w.clone()], 0.9);
        for _ in 0..2 {
            let loss = w.sum_all();
            loss.backward();
            opt.step(0.1);
        }
        let got = w.data_vec()[0];
        assert!((got - 0.71).abs() < 1e-15, "expected 0.71, got {got}");
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged_but_advances_velocity() {
        let w = Tensor::vector(vec![2.0, -3.0]).with_grad();
        let mut opt = SgdMomentum::new(vec![w.clone()], 0.9);
        let loss = w.mul(&w).sum_all();
        loss.backward();
        opt.step(0.0);
        assert_eq!(w.data_vec(), vec![2.0, -3.0]);
        assert_eq!(opt.velocity[0], vec![4.0, -6.0]);
    }

    #[test]
    #[should_panic(expected = "has no gradient")]
    fn step_without_backward_panics() {
        let w = Tensor::vector(vec![1.0]).with_grad();
        let mut opt = SgdMomentum::new(vec![w], 0.9);
        opt.step(0.1);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        let mid = cosine_lr(0.01, 50, 100);
        assert!((mid - 0.005).abs() < 1e-15, "midpoint {mid}");
        let end = cosine_lr(0.01, 100, 100);
        assert!(end.abs() < 1e-17, "endpoint {end}");
    }

    #[test]
    fn cosine_schedule_is_monotone_decreasing() {
        let total = 64;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(0.01, s, total);
            assert!(lr <= prev, "lr increased at step {s}");
            prev = lr;
        }
    }

    #[test]
    fn zero_grad_discards_pending_gradients() {
        let w = Tensor::vector(vec![1.0]).with_grad();
        let loss = w.sum_all();
        loss.backward();
        let opt = SgdMomentum::new(vec![w.clone()], 0.0);
        opt.zero_grad();
        assert!(w.grad_vec().is_none());
    }
}
