use std::collections::BTreeMap;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to `params`. Parameters without a gradient entry
    /// see a zero gradient. Nothing is modified if any gradient is non-finite
    /// or misshapen.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name.into(), Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = one("w", 0.5);
        let grads = one("w", 1.0);
        let mut adam = AdamState::new(1e-4);
        adam.step(&mut params, &grads).unwrap();
        // m_hat = v_hat = 1 so the step is lr / (1 + eps)
        let delta = params["w"].item() - 0.5;
        assert!((delta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
    }

    #[test]
    fn zero_gradient_leaves_param_and_counts_step() {
        let mut params = one("w", 0.5);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut params, &one("w", 0.0)).unwrap();
        assert_eq!(params["w"].item(), 0.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn two_steps_match_scripted_reference() {
        // reference: plain scalar transcription of the Adam recurrences
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let g = 0.3;
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut params = one("w", 1.0);
        let mut adam = AdamState::with_hyper(lr, b1, b2, eps);
        for _ in 0..2 {
            adam.step(&mut params, &one("w", g)).unwrap();
        }
        assert!((params["w"].item() - x).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_rejected_without_partial_update() {
        let mut params = one("a", 1.0);
        params.insert("b".into(), Tensor::scalar(2.0));
        let mut grads = one("a", 1.0);
        grads.insert("b".into(), Tensor::scalar(f64::NAN));
        let mut adam = AdamState::new(1e-3);
        assert!(matches!(adam.step(&mut params, &grads), Err(Error::NonFiniteGradient(_))));
        assert_eq!(params["a"].item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut grads = one("a", 30.0);
        grads.insert("b".into(), Tensor::scalar(40.0));
        let before = clip_global_norm(&mut grads, 10.0);
        assert_eq!(before, 50.0);
        assert!((global_norm(&grads) - 10.0).abs() < 1e-12);
    }
}
