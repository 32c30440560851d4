//! Optimizers: Adam with bias correction, and plain SGD.

use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::invalid(format!(
                "unknown optimizer \"{other}\" (expected adam|sgd)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

/// First/second moment state for one parameter.
struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
}

pub struct Optimizer<E: Element> {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Zero-initialized per parameter, keyed by position in the step call.
    state: Vec<Option<Moments<E>>>,
    /// Completed steps; drives bias correction.
    t: u64,
}

impl<E: Element> Optimizer<E> {
    pub fn new(kind: OptimizerKind, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            state: Vec::new(),
            t: 0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr, (0.9, 0.999), 1e-8)
    }

    /// Apply one update to every trainable parameter that has a gradient.
    /// Non-trainable parameters are left bitwise untouched and their state
    /// does not advance.
    pub fn step(&mut self, params: &[&Param<E>]) -> Result<()> {
        if self.state.len() < params.len() {
            self.state.resize_with(params.len(), || None);
        }
        self.t += 1;
        for (i, p) in params.iter().enumerate() {
            if !p.trainable() {
                continue;
            }
            let grad = match p.value.grad() {
                Some(g) => g,
                None => continue,
            };
            if grad.len() != p.value.numel() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: vec![grad.len()],
                    rhs: p.value.shape().to_vec(),
                });
            }
            let mut data = p.value.to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = E::from_f64(self.lr);
                    for (w, &g) in data.iter_mut().zip(&grad) {
                        *w = *w - lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let slot = self.state[i].get_or_insert_with(|| Moments {
                        m: vec![E::zero(); grad.len()],
                        v: vec![E::zero(); grad.len()],
                    });
                    let b1 = E::from_f64(self.beta1);
                    let b2 = E::from_f64(self.beta2);
                    let one = E::one();
                    let bias1 = 1.0 - self.beta1.powi(self.t as i32);
                    let bias2 = 1.0 - self.beta2.powi(self.t as i32);
                    let inv_bias1 = E::from_f64(1.0 / bias1);
                    let inv_bias2 = E::from_f64(1.0 / bias2);
                    let lr = E::from_f64(self.lr);
                    let eps = E::from_f64(self.eps);
                    for (((w, &g), m), v) in data
                        .iter_mut()
                        .zip(&grad)
                        .zip(slot.m.iter_mut())
                        .zip(slot.v.iter_mut())
                    {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let m_hat = *m * inv_bias1;
                        let v_hat = *v * inv_bias2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            p.value.set_data(&data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, Tensor};

    fn param(name: &str, data: Vec<f64>) -> Param<f64> {
        Param::for_test(name, Tensor::param_from_vec(&[data.len()], data).unwrap())
    }

    #[test]
    fn first_step_magnitude_is_close_to_lr() {
        // With |g| >= 1 the bias-corrected first step is lr * g/(|g| + eps).
        for &g in &[1.0, -2.5, 7.0] {
            let p = param("w", vec![0.0]);
            p.value.accumulate_grad(&[g]);
            let mut opt = Optimizer::adam(0.01);
            opt.step(&[&p]).unwrap();
            let delta = p.value.data()[0].abs();
            assert!(
                (0.0099..=0.01).contains(&delta),
                "first-step magnitude {delta}"
            );
            assert_eq!(p.value.data()[0].signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let p = param("w", vec![1.25, -0.5]);
        let before: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..5 {
            p.value.zero_grad();
            p.value.accumulate_grad(&[0.0, 0.0]);
            opt.step(&[&p]).unwrap();
        }
        let after: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // Minimize (w - 3)^2 from w = 0 with lr 0.1, via the autodiff path.
        let p = param("w", vec![0.0]);
        let target = Tensor::<f64>::from_vec(&[1], vec![-3.0]).unwrap();
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..100 {
            p.value.zero_grad();
            let diff = ops::add(&p.value, &target).unwrap();
            let loss = ops::sum(&ops::mul(&diff, &diff).unwrap()).unwrap();
            loss.backward().unwrap();
            opt.step(&[&p]).unwrap();
        }
        let w = p.value.data()[0];
        assert!((w - 3.0).abs() < 0.5, "w after 100 steps: {w}");
    }

    #[test]
    fn masked_parameters_are_bitwise_invariant() {
        let p = param("frozen", vec![0.7, -0.3]);
        p.set_trainable(false);
        let q = param("live", vec![0.7, -0.3]);
        let before: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
        let mut opt = Optimizer::adam(0.05);
        for _ in 0..3 {
            p.value.zero_grad();
            q.value.zero_grad();
            p.value.accumulate_grad(&[1.0, 1.0]);
            q.value.accumulate_grad(&[1.0, 1.0]);
            opt.step(&[&p, &q]).unwrap();
        }
        let after: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after, "masked parameter drifted");
        assert_ne!(q.value.data()[0], 0.7, "live parameter moved");
    }

    #[test]
    fn sgd_takes_plain_steps() {
        let p = param("w", vec![1.0]);
        p.value.accumulate_grad(&[0.5]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.2, (0.9, 0.999), 1e-8);
        opt.step(&[&p]).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-12);
    }
}
