//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Passed,
    Failed,
    /// The input sits within the kink radius of a non-differentiable point.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub status: CheckStatus,
    /// Distance of the base point to the nearest recorded kink.
    pub kink_margin: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Passed
    }
}

/// Step, tolerance and kink policy for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub kink_radius: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-4,
            kink_radius: 1e-3,
            floor: 1e-2,
        }
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor, cfg: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(x, cfg, |pt, with_grad| {
        let mut g = Graph::new();
        let v = if with_grad { g.param(pt.clone()) } else { g.constant(pt.clone()) };
        let y = f(&mut g, v)?;
        evaluate(&mut g, v, y, with_grad)
    })
}

/// Output of one evaluation driven by [`grad_check_with`].
#[derive(Debug, Clone)]
pub struct Probe {
    pub value: f64,
    /// Gradient with respect to the input; only read when requested.
    pub grad: Vec<f64>,
    pub kink_margin: f64,
}

/// Reads value, input gradient and kink margin off a finished tape.
pub fn evaluate(g: &mut Graph, x: Var, y: Var, with_grad: bool) -> Result<Probe> {
    let value = g.value(y).item();
    let kink_margin = g.kink_margin();
    let mut grad = Vec::new();
    if with_grad {
        g.backward(y)?;
        grad = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; g.value(x).len()]);
    }
    Ok(Probe { value, grad, kink_margin })
}

/// [`grad_check`] over an arbitrary evaluator, for forwards that own their tape.
/// `run(point, with_grad)` must be a pure function of `point`.
pub fn grad_check_with<R>(x: &Tensor, cfg: GradCheck, run: R) -> Result<GradCheckReport>
where
    R: Fn(&Tensor, bool) -> Result<Probe>,
{
    let base = run(x, true)?;
    let (analytic, kink_margin) = (base.grad, base.kink_margin);
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += cfg.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= cfg.step;
        numeric.push((run(&plus, false)?.value - run(&minus, false)?.value) / (2.0 * cfg.step));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| libm::fabs(a - n) / libm::fabs(*a).max(libm::fabs(*n)).max(cfg.floor))
        .fold(0.0, f64::max);
    let status = if kink_margin < cfg.kink_radius {
        CheckStatus::Skipped
    } else if max_rel_error < cfg.tol {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    Ok(GradCheckReport {
        max_rel_error,
        status,
        kink_margin,
        analytic,
        numeric,
    })
}
