//! Finite-difference gradient verification.
//!
//! Central differences in f64 against the analytic reverse-mode gradient.
//! The acceptance thresholds: relative error ≤ rel_tol where the analytic
//! gradient is above min_grad, absolute error ≤ abs_tol otherwise.

use crate::numerics::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub min_grad: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            h: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            min_grad: 1e-6,
        }
    }
}

impl FdSettings {
    /// Looser bound for whole-model end-to-end sweeps.
    pub fn end_to_end() -> Self {
        FdSettings {
            rel_tol: 1e-3,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub pass: bool,
}

impl FdReport {
    pub fn line(&self) -> String {
        format!(
            "{:<44} {:>7} entries  rel {:.3e}  abs {:.3e}  {}",
            self.name,
            self.checked,
            self.max_rel,
            self.max_abs,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

/// Verify d(loss)/d(target) for one tensor. `loss_fn` must rebuild the full
/// forward pass from current tensor data on every call.
pub fn check_grad(
    name: &str,
    loss_fn: &dyn Fn() -> Tensor<f64>,
    target: &Tensor<f64>,
    s: FdSettings,
) -> FdReport {
    target.zero_grad();
    let loss = loss_fn();
    loss.backward().expect("gradcheck loss must be scalar");
    let analytic = target.grad_or_zeros();
    target.zero_grad();

    let n = target.numel();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut pass = true;
    for i in 0..n {
        let orig = target.data()[i];
        target.update_data(|d| d[i] = orig + s.h);
        let f_plus = no_grad(|| loss_fn().item());
        target.update_data(|d| d[i] = orig - s.h);
        let f_minus = no_grad(|| loss_fn().item());
        target.update_data(|d| d[i] = orig);
        let fd = (f_plus - f_minus) / (2.0 * s.h);
        let g = analytic[i];
        let abs_err = (fd - g).abs();
        if g.abs() > s.min_grad {
            let rel = abs_err / g.abs();
            max_rel = max_rel.max(rel);
            if rel > s.rel_tol {
                pass = false;
            }
        } else {
            max_abs = max_abs.max(abs_err);
            if abs_err > s.abs_tol {
                pass = false;
            }
        }
    }
    FdReport {
        name: name.to_string(),
        checked: n,
        max_rel,
        max_abs,
        pass,
    }
}

/// Sweep several tensors against the same loss.
pub fn check_grads(
    loss_fn: &dyn Fn() -> Tensor<f64>,
    targets: &[(String, Tensor<f64>)],
    s: FdSettings,
) -> Vec<FdReport> {
    targets
        .iter()
        .map(|(name, t)| check_grad(name, loss_fn, t, s))
        .collect()
}
