//! Per-parameter optimizers with named state slots.
//!
//! State is keyed by parameter name so the trainer can update whichever
//! subset of parameters a task trains, and so the lookahead step can preview
//! what Adam *would* do to the generator weights without committing it.

use std::collections::BTreeMap;

use crate::config::OptKind;
use crate::error::{Error, Result};
use crate::hypernet::ParamMap;

#[derive(Debug, Clone, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam (or plain SGD) over named parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, AdamSlot>,
    lr_overrides: BTreeMap<String, f64>,
    lr_scale: f64,
}

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
            lr_overrides: BTreeMap::new(),
            lr_scale: 1.0,
        }
    }

    /// Drops all moment estimates and step counts (keeps rate overrides).
    pub fn reset(&mut self) {
        self.slots.clear();
    }

    /// Overrides the learning rate for one named parameter.
    pub fn set_lr(&mut self, name: &str, lr: f64) {
        self.lr_overrides.insert(name.to_string(), lr);
    }

    /// Scales every learning rate (base and overrides) by `scale`; the
    /// trainer drives this with its schedule.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.lr_overrides.get(name).copied().unwrap_or(self.lr) * self.lr_scale
    }

    fn adam_update(&self, lr: f64, slot: &mut AdamSlot, grad: &[f64]) -> Vec<f64> {
        if slot.m.is_empty() {
            slot.m = vec![0.0; grad.len()];
            slot.v = vec![0.0; grad.len()];
        }
        slot.step += 1;
        let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
        let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
        let mut delta = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            delta.push(-lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        delta
    }

    /// The additive update (new minus old) the next `apply` for `name`
    /// would produce, without touching optimizer state.
    pub fn preview_delta(&self, name: &str, grad: &[f64]) -> Vec<f64> {
        let lr = self.lr_for(name);
        match self.kind {
            OptKind::Sgd => grad.iter().map(|g| -lr * g).collect(),
            OptKind::Adam => {
                let mut slot = self.slots.get(name).cloned().unwrap_or_default();
                self.adam_update(lr, &mut slot, grad)
            }
        }
    }

    /// Applies one update to `params[name]` and advances the state slot.
    pub fn apply(&mut self, params: &mut ParamMap, name: &str, grad: &[f64]) -> Result<()> {
        let tensor = params
            .get_mut(name)
            .ok_or_else(|| Error::registry(format!("optimizer: unknown parameter '{name}'")))?;
        if tensor.numel() != grad.len() {
            return Err(Error::Shape {
                op: "optimizer apply",
                lhs: vec![tensor.numel()],
                rhs: vec![grad.len()],
            });
        }
        let lr = self.lr_for(name);
        match self.kind {
            OptKind::Sgd => {
                for (p, g) in tensor.data_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptKind::Adam => {
                let mut slot = self.slots.remove(name).unwrap_or_default();
                let delta = self.adam_update(lr, &mut slot, grad);
                for (p, d) in tensor.data_mut().iter_mut().zip(&delta) {
                    *p += d;
                }
                self.slots.insert(name.to_string(), slot);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params_with(name: &str, values: Vec<f64>) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert(name.to_string(), Tensor::row(values));
        p
    }

    #[test]
    fn sgd_is_a_plain_scaled_step() {
        let mut opt = Optimizer::new(OptKind::Sgd, 0.1);
        let mut params = params_with("w", vec![1.0, -2.0]);
        opt.apply(&mut params, "w", &[0.5, -1.0]).unwrap();
        assert_eq!(params["w"].data(), &[0.95, -1.9]);
    }

    #[test]
    fn adam_first_step_oracle() {
        // With fresh moments, m_hat = g and v_hat = g^2, so the first update
        // is -lr * g / (|g| + eps) regardless of gradient magnitude.
        let lr = 1e-3;
        let mut opt = Optimizer::new(OptKind::Adam, lr);
        let mut params = params_with("w", vec![0.2, 0.2, 0.2]);
        let grad = [3.0, -0.007, 0.0];
        opt.apply(&mut params, "w", &grad).unwrap();
        for (i, &g) in grad.iter().enumerate() {
            let expected = 0.2 - lr * g / (g.abs() + 1e-8);
            assert!(
                (params["w"].data()[i] - expected).abs() < 1e-15,
                "component {i}"
            );
        }
    }

    #[test]
    fn adam_second_step_oracle() {
        let lr = 0.01;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut opt = Optimizer::new(OptKind::Adam, lr);
        let mut params = params_with("w", vec![1.0]);
        opt.apply(&mut params, "w", &[2.0]).unwrap();
        opt.apply(&mut params, "w", &[-1.0]).unwrap();

        // replay by hand
        let mut theta = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 2.0f64), (2, -1.0)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1f(b1, t));
            let v_hat = v / (1.0 - b1f(b2, t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((params["w"].data()[0] - theta).abs() < 1e-15);
    }

    fn b1f(b: f64, t: i32) -> f64 {
        b.powi(t)
    }

    #[test]
    fn preview_matches_apply_and_leaves_state_untouched() {
        let mut opt = Optimizer::new(OptKind::Adam, 1e-3);
        let mut params = params_with("w", vec![0.5, -0.5]);
        // advance state a little first
        opt.apply(&mut params, "w", &[0.1, 0.2]).unwrap();

        let grad = [0.3, -0.4];
        let preview = opt.preview_delta("w", &grad);
        let before = params["w"].data().to_vec();
        opt.apply(&mut params, "w", &grad).unwrap();
        for i in 0..2 {
            // apply performs the same `old + delta` addition, so the result
            // must be bitwise identical
            let expected = before[i] + preview[i];
            assert_eq!(params["w"].data()[i].to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn preview_is_repeatable() {
        let opt = Optimizer::new(OptKind::Adam, 1e-3);
        let a = opt.preview_delta("w", &[1.0, 2.0]);
        let b = opt.preview_delta("w", &[1.0, 2.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn slots_are_independent_per_name() {
        let mut opt = Optimizer::new(OptKind::Adam, 1e-2);
        let mut params = params_with("a", vec![0.0]);
        params.insert("b".into(), Tensor::row(vec![0.0]));
        for _ in 0..5 {
            opt.apply(&mut params, "a", &[1.0]).unwrap();
        }
        // b's first step must still behave like a fresh slot
        opt.apply(&mut params, "b", &[1.0]).unwrap();
        let expected = -1e-2 * 1.0 / (1.0 + 1e-8);
        assert!((params["b"].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn reset_forgets_moments() {
        let mut opt = Optimizer::new(OptKind::Adam, 1e-2);
        let mut params = params_with("w", vec![0.0]);
        opt.apply(&mut params, "w", &[5.0]).unwrap();
        opt.reset();
        let after_reset = params["w"].data()[0];
        opt.apply(&mut params, "w", &[5.0]).unwrap();
        let expected = after_reset - 1e-2 * 5.0 / (5.0 + 1e-8);
        assert!((params["w"].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn lr_scale_multiplies_base_and_overrides() {
        let mut opt = Optimizer::new(OptKind::Sgd, 0.1);
        opt.set_lr("special", 0.4);
        opt.set_lr_scale(0.5);
        let mut params = params_with("w", vec![1.0]);
        params.insert("special".into(), Tensor::row(vec![1.0]));
        opt.apply(&mut params, "w", &[1.0]).unwrap();
        opt.apply(&mut params, "special", &[1.0]).unwrap();
        assert!((params["w"].data()[0] - 0.95).abs() < 1e-15);
        assert!((params["special"].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unknown_parameter_is_a_registry_error() {
        let mut opt = Optimizer::new(OptKind::Adam, 1e-3);
        let mut params = params_with("w", vec![0.0]);
        assert!(matches!(
            opt.apply(&mut params, "nope", &[1.0]),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = Optimizer::new(OptKind::Sgd, 1e-3);
        let mut params = params_with("w", vec![0.0, 0.0]);
        assert!(matches!(
            opt.apply(&mut params, "w", &[1.0]),
            Err(Error::Shape { .. })
        ));
    }
}
