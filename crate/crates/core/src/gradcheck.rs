//! Central finite-difference verification of tape gradients.

use crate::data::SequenceBatch;
use crate::error::Result;
use crate::model::{Noise, SWaveNet};
use crate::objective::{elbo_terms, objective_loss};
use crate::params::Binding;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Per-tensor result of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic - numeric| / max(1, |numeric|)`, one per input tensor.
    pub max_rel_error: Vec<f64>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` records a scalar loss on a fresh graph given leaves for `params`, in
/// order. It must be deterministic.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(finite_diff_report(f, params, epsilon, |_, _| {})?.max())
}

/// Like [`finite_diff_check`] with a per-tensor breakdown.
///
/// `tamper` may modify each analytic gradient before comparison; checks that
/// the comparison itself can fail use it as a negative control.
pub fn finite_diff_report<F, T>(f: F, params: &[Tensor], epsilon: f64, tamper: T) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    T: Fn(usize, &mut [f64]),
{
    let params: Vec<Tensor> = params
        .iter()
        .map(|p| if p.requires_grad() { p.clone() } else { p.clone().with_grad() })
        .collect();
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut work = params.clone();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (pi, &v) in vars.iter().enumerate() {
        let mut analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        tamper(pi, &mut analytic);
        let mut worst: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params[pi].values()[j];
            work[pi].values_mut()[j] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].values_mut()[j] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport { max_rel_error })
}

/// Checks the gradient of the annealed objective with respect to every
/// parameter tensor of `model`, under fixed `noise`. Returns
/// `(parameter name, max relative error)` in store order.
///
/// With `corrupt` set, the analytic gradient of the first tensor is offset
/// before comparison, which must make the check fail.
pub fn model_gradcheck(model: &SWaveNet, batch: &SequenceBatch, noise: &Noise, lambda: f64, epsilon: f64, corrupt: bool) -> Result<Vec<(String, f64)>> {
    let loss = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let bind = Binding::from_vars(vars.to_vec());
        let terms = elbo_terms(model, g, &bind, batch, noise)?;
        objective_loss(g, &terms, lambda)
    };
    let tamper = |i: usize, grad: &mut [f64]| {
        if corrupt && i == 0 {
            grad[0] += 1e-2;
        }
    };
    let report = finite_diff_report(loss, model.params().tensors(), epsilon, tamper)?;
    Ok(model.params().names().iter().cloned().zip(report.max_rel_error).collect())
}
