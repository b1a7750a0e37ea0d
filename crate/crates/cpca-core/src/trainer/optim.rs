//! SGD with classic momentum and coupled weight decay, plus the polynomial
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One update step on a single tensor:
/// `v <- mu * v + (g + lambda * p); p <- p - lr * v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(param.shape(), grad.shape());
    debug_assert_eq!(param.shape(), velocity.shape());
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

/// Momentum buffers keyed by parameter name; buffers appear lazily the
/// first time a parameter receives a gradient and persist in checkpoints.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    pub velocities: BTreeMap<String, Tensor>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState::default()
    }

    /// Apply one step to every (name, param, grad) triple. Non-finite
    /// gradients abort with the offending tensor named.
    pub fn step(
        &mut self,
        updates: Vec<(&str, &mut Tensor, &Tensor)>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        iteration: usize,
    ) -> Result<()> {
        for (name, _, grad) in &updates {
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    tensor: format!("grad({name})"),
                    iteration,
                });
            }
        }
        for (name, param, grad) in updates {
            let velocity = self
                .velocities
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            sgd_step(param, grad, velocity, lr, momentum, weight_decay);
            if !param.all_finite() {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                    iteration,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// `lr0 * (1 - t/T)^power`
    Poly,
    Const,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "poly" => Some(LrSchedule::Poly),
            "const" => Some(LrSchedule::Const),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LrSchedule::Poly => "poly",
            LrSchedule::Const => "const",
        }
    }
}

/// Learning rate at iteration t of T.
pub fn lr_at(schedule: LrSchedule, t: usize, total: usize, lr0: f64, power: f64) -> f64 {
    assert!(t <= total && total > 0);
    match schedule {
        LrSchedule::Const => lr0,
        LrSchedule::Poly => lr0 * (1.0 - t as f64 / total as f64).powf(power),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(vals: &[f64]) -> Tensor {
        Tensor::new(vec![vals.len()], vals.to_vec())
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut p = t(&[1.0, -2.0]);
        let mut v = t(&[0.0, 0.0]);
        sgd_step(&mut p, &t(&[0.0, 0.0]), &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn pure_decay_shrinks_params_by_one_minus_lr_lambda() {
        let mut p = t(&[2.0]);
        let mut v = t(&[0.0]);
        sgd_step(&mut p, &t(&[0.0]), &mut v, 0.1, 0.0, 0.5);
        // v = 0.5 * 2 = 1; p = 2 - 0.1 * 1 = 2 * (1 - 0.05)
        assert!((p.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_the_closed_form_accumulation() {
        // mu = 0.9, lambda = 0, grads g1, g2:
        // v1 = g1, p1 = p0 - lr g1
        // v2 = 0.9 g1 + g2, p2 = p1 - lr (0.9 g1 + g2)
        let (g1, g2, lr) = (0.4, -0.3, 0.05);
        let mut p = t(&[1.0]);
        let mut v = t(&[0.0]);
        sgd_step(&mut p, &t(&[g1]), &mut v, lr, 0.9, 0.0);
        sgd_step(&mut p, &t(&[g2]), &mut v, lr, 0.9, 0.0);
        let expect = 1.0 - lr * g1 - lr * (0.9 * g1 + g2);
        assert!((p.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_with_diagnostics() {
        let mut state = SgdState::new();
        let mut p = t(&[1.0]);
        let g = t(&[f64::NAN]);
        let err = state
            .step(vec![("w", &mut p, &g)], 0.1, 0.9, 0.0, 7)
            .unwrap_err();
        match err {
            Error::NonFinite { tensor, iteration } => {
                assert!(tensor.contains("w"));
                assert_eq!(iteration, 7);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn poly_schedule_endpoints_and_midpoint() {
        assert_eq!(lr_at(LrSchedule::Poly, 0, 100, 1e-3, 0.9), 1e-3);
        assert_eq!(lr_at(LrSchedule::Poly, 100, 100, 1e-3, 0.9), 0.0);
        let mid = lr_at(LrSchedule::Poly, 50, 100, 1.0, 0.9);
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.5359).abs() < 1e-4);
        assert_eq!(lr_at(LrSchedule::Const, 73, 100, 5e-4, 0.9), 5e-4);
    }
}
