//! Evidence lower bound, KL annealing and an importance-weighted likelihood estimate.

use serde::{Deserialize, Serialize};

use crate::data::{Sequence, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Noise, SWaveNet};
use crate::params::Binding;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealKind {
    Linear,
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub kind: AnnealKind,
    pub total_steps: usize,
}

/// KL weight at optimizer step `step`.
///
/// Linear: `min(step / total, 1)`. Cosine: `1 - cos(u * pi / 2)` with
/// `u = min(step / total, 1)`. A zero horizon gives 1.
pub fn anneal_lambda(schedule: &AnnealSchedule, step: usize) -> f64 {
    if schedule.kind == AnnealKind::Constant || schedule.total_steps == 0 {
        return 1.0;
    }
    let u = (step as f64 / schedule.total_steps as f64).min(1.0);
    match schedule.kind {
        AnnealKind::Linear => u,
        AnnealKind::Cosine => {
            if u >= 1.0 {
                1.0
            } else {
                1.0 - (u * std::f64::consts::FRAC_PI_2).cos()
            }
        }
        AnnealKind::Constant => unreachable!(),
    }
}

/// Batch-mean ELBO terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl_per_layer: Vec<f64>,
    pub lambda: f64,
    /// `recon - lambda * sum(kl)`.
    pub objective: f64,
    /// `recon - sum(kl)`.
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn kl_total(&self) -> f64 {
        self.kl_per_layer.iter().sum()
    }
}

/// Per-sequence ELBO pieces recorded on a graph, each `[B]`.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub pass: ForwardPass,
    pub recon: Var,
    pub kl: Vec<Var>,
}

/// One posterior pass with analytic KL per stochastic layer.
pub fn elbo_terms(model: &SWaveNet, g: &mut Graph, bind: &Binding, batch: &SequenceBatch, noise: &Noise) -> Result<ElboTerms> {
    let pass = model.posterior_pass(g, bind, batch, noise)?;
    let recon = model.emission_logprob(g, &pass.hidden, batch)?;
    let mask = batch.mask();
    let mut kl = Vec::with_capacity(pass.latents.layers.len());
    for lat in &pass.latents.layers {
        let (qm, qlv) = (lat.post_mean.expect("posterior pass"), lat.post_log_var.expect("posterior pass"));
        let per_step = g.kl_diag_gaussian(qm, qlv, lat.prior_mean, lat.prior_log_var)?;
        let per_step = g.mul_const(per_step, mask.clone())?;
        kl.push(g.sum_last(per_step)?);
    }
    Ok(ElboTerms { pass, recon, kl })
}

/// Scalar loss `-(1/B) sum_b (recon_b - lambda * sum_l kl_lb)`.
pub fn objective_loss(g: &mut Graph, terms: &ElboTerms, lambda: f64) -> Result<Var> {
    let batch = g.shape(terms.recon)[0];
    let mut obj = terms.recon;
    for &kl in &terms.kl {
        let weighted = g.scale(kl, lambda)?;
        obj = g.sub(obj, weighted)?;
    }
    let total = g.sum(obj)?;
    g.scale(total, -1.0 / batch as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Batch means of recorded terms.
pub fn breakdown(g: &Graph, terms: &ElboTerms, lambda: f64) -> ElboBreakdown {
    let recon = mean(g.value(terms.recon));
    let kl_per_layer: Vec<f64> = terms.kl.iter().map(|&k| mean(g.value(k))).collect();
    let kl: f64 = kl_per_layer.iter().sum();
    ElboBreakdown {
        recon,
        kl_per_layer,
        lambda,
        objective: recon - lambda * kl,
        elbo: recon - kl,
    }
}

pub fn elbo(model: &SWaveNet, batch: &SequenceBatch, lambda: f64, seed: u64) -> Result<ElboBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut g = Graph::new();
    let bind = model.params().bind(&mut g);
    let terms = elbo_terms(model, &mut g, &bind, batch, &Noise::Keyed { seed })?;
    Ok(breakdown(&g, &terms, lambda))
}

/// Single-sample ELBO of every sequence in the batch (the exact
/// log-likelihood for a model without latents).
pub fn per_sequence_elbo(model: &SWaveNet, batch: &SequenceBatch, seed: u64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bind = model.params().bind(&mut g);
    let terms = elbo_terms(model, &mut g, &bind, batch, &Noise::Keyed { seed })?;
    let mut out = g.value(terms.recon).to_vec();
    for &k in &terms.kl {
        for (o, v) in out.iter_mut().zip(g.value(k)) {
            *o -= v;
        }
    }
    Ok(out)
}

/// Log importance weights `log p(x, z) - log q(z | x)` for `k` posterior
/// draws of `x`. Draw `i` uses keyed noise with sequence id `i`.
pub fn log_importance_weights(model: &SWaveNet, x: &Sequence, k: usize, seed: u64) -> Result<Vec<f64>> {
    const CHUNK: usize = 512;
    if k == 0 {
        return Err(Error::config("importance sampling needs K >= 1"));
    }
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    while start < k {
        let n = CHUNK.min(k - start);
        let copies: Vec<&Sequence> = vec![x; n];
        let batch = SequenceBatch::from_sequences(&copies, (start as u64..(start + n) as u64).collect())?;
        let mut g = Graph::new();
        let bind = constant_binding(model, &mut g);
        let pass = model.posterior_pass(&mut g, &bind, &batch, &Noise::Keyed { seed })?;
        let joint = model.log_joint(&mut g, &pass, &batch)?;
        let post = model.log_posterior(&mut g, &pass, &batch)?;
        out.extend(g.value(joint).iter().zip(g.value(post)).map(|(a, b)| a - b));
        start += n;
    }
    Ok(out)
}

/// Parameters bound without gradient tracking.
fn constant_binding(model: &SWaveNet, g: &mut Graph) -> Binding {
    let vars = model
        .params()
        .tensors()
        .iter()
        .map(|t| g.leaf(&Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("valid parameter")))
        .collect();
    Binding::from_vars(vars)
}

/// `log (1/K) sum_k w_k` with a delta-method standard error.
pub fn importance_ll_estimate(model: &SWaveNet, x: &Sequence, k: usize, seed: u64) -> Result<(f64, f64)> {
    let lw = log_importance_weights(model, x, k, seed)?;
    Ok(log_mean_exp_with_se(&lw))
}

/// `(log mean exp(lw), standard error)` where the error is
/// `sd(w) / (sqrt(K) * mean(w))`.
pub fn log_mean_exp_with_se(lw: &[f64]) -> (f64, f64) {
    let k = lw.len() as f64;
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|&v| (v - m).exp()).collect();
    let mean_w = w.iter().sum::<f64>() / k;
    let estimate = m + mean_w.ln();
    if lw.len() < 2 {
        return (estimate, 0.0);
    }
    let var_w = w.iter().map(|&v| (v - mean_w).powi(2)).sum::<f64>() / (k - 1.0);
    (estimate, (var_w / k).sqrt() / mean_w)
}
