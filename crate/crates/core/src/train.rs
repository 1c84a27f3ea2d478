//! Optimization loop, learning-rate schedule and evaluation protocol.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, NormStats, Sequence, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{Noise, SWaveNet};
use crate::objective::{anneal_lambda, breakdown, elbo_terms, objective_loss, per_sequence_elbo, AnnealKind, AnnealSchedule};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::Graph;

/// Adam moment buffers and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect::<Vec<_>>();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Bias-corrected Adam update of every parameter from its gradient slot.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!("optimizer holds {} buffers for {} parameters", state.m.len(), params.len())));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((t, m), v) in params.tensors_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let (values, grad) = t.values_and_grad_mut();
        let grad = grad.ok_or_else(|| Error::shape("parameter without gradient slot"))?;
        if m.len() != values.len() {
            return Err(Error::shape(format!("moment buffer of {} for {} values", m.len(), values.len())));
        }
        for i in 0..values.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let u = (step as f64 / total_steps as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * u).cos())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm when clipping happened.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> Option<f64> {
    let norm = params.grad_norm();
    if norm <= max_norm {
        return None;
    }
    let scale = max_norm / norm;
    for t in params.tensors_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Some(norm)
}

fn default_batch() -> usize {
    32
}
fn default_lr_max() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_anneal() -> AnnealKind {
    AnnealKind::Cosine
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_anneal")]
    pub anneal: AnnealKind,
    /// KL annealing horizon in steps; defaults to the total step count.
    #[serde(default)]
    pub anneal_steps: Option<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Standardize frames with statistics of the training split.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            max_steps: None,
            lr_max: default_lr_max(),
            lr_min: default_lr_min(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            anneal: default_anneal(),
            anneal_steps: None,
            val_fraction: default_val_fraction(),
            clip_norm: None,
            normalize: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config("lr_max must be positive and lr_min in [0, lr_max]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1 and beta2 must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0 || !c.is_finite()) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n_train);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub lr: f64,
    pub objective: f64,
    pub recon: f64,
    pub kl_total: f64,
    pub kl_per_layer: Vec<f64>,
    pub wall_clock: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// `(last step of the epoch, validation ELBO per sequence)`.
    pub val_elbo: Vec<(usize, f64)>,
    /// `(step, pre-clip gradient norm)` whenever clipping was applied.
    pub clip_events: Vec<(usize, f64)>,
    pub stochastic_layers: usize,
}

impl TrainReport {
    pub fn best_val(&self) -> Option<f64> {
        self.val_elbo.iter().map(|v| v.1).fold(None, |a, v| Some(a.map_or(v, |a: f64| a.max(v))))
    }

    pub fn final_val(&self) -> Option<f64> {
        self.val_elbo.last().map(|v| v.1)
    }

    /// Metrics table. Wall-clock time is left out so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lambda,lr,objective,recon,kl_total");
        for l in 1..=self.stochastic_layers {
            write!(out, ",kl_l{l}").unwrap();
        }
        out.push_str(",val_elbo\n");
        let mut vals = self.val_elbo.iter().peekable();
        for r in &self.steps {
            write!(out, "{},{},{},{},{},{}", r.step, r.lambda, r.lr, r.objective, r.recon, r.kl_total).unwrap();
            for k in &r.kl_per_layer {
                write!(out, ",{k}").unwrap();
            }
            out.push(',');
            if let Some(&&(s, v)) = vals.peek() {
                if s == r.step {
                    write!(out, "{v}").unwrap();
                    vals.next();
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters with the best validation ELBO (the initial ones without any epoch).
    pub best: Checkpoint,
    /// Parameters after the last step.
    pub last: Checkpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    PerSequence,
    PerSegment(usize),
}

const EVAL_CHUNK: usize = 64;

/// Key of the evaluation noise stream, separate from training draws.
pub const EVAL_SEED_KEY: u64 = 0xe7a1;

/// Single-sample ELBO of every sequence in data units. Sequence `i` uses
/// noise keyed by id `i`, so results do not depend on chunking.
pub fn sequence_scores(model: &SWaveNet, norm: &NormStats, data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset has no sequences".into()));
    }
    let d = data.frame_dim()?;
    if d != model.config().frame_dim || norm.mean.len() != d {
        return Err(Error::shape(format!(
            "dataset frame width {d} vs model {} / normalizer {}",
            model.config().frame_dim,
            norm.mean.len()
        )));
    }
    let normed = norm.normalize(data)?;
    let log_det = norm.log_det_per_frame();
    let eval_seed = rng::mix(&[seed, EVAL_SEED_KEY]);
    let mut out = Vec::with_capacity(data.len());
    for (c, chunk) in normed.sequences.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&Sequence> = chunk.iter().collect();
        let ids = (0..chunk.len()).map(|i| (c * EVAL_CHUNK + i) as u64).collect();
        let batch = SequenceBatch::from_sequences(&refs, ids)?;
        let scores = per_sequence_elbo(model, &batch, eval_seed)?;
        out.extend(scores.iter().zip(chunk).map(|(s, seq)| s - seq.len() as f64 * log_det));
    }
    Ok(out)
}

/// Mean per-sequence ELBO (exact log-likelihood without latents) in data units.
pub fn evaluate(model: &SWaveNet, norm: &NormStats, data: &Dataset, mode: EvalMode, seed: u64) -> Result<f64> {
    let scores = match mode {
        EvalMode::PerSequence => sequence_scores(model, norm, data, seed)?,
        EvalMode::PerSegment(len) => sequence_scores(model, norm, &data.segmented(len)?, seed)?,
    };
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Trains `model` on `data` with a held-out validation split.
///
/// The best validation checkpoint is written to `checkpoint` after every
/// improving epoch when a path is given.
pub fn train(model: SWaveNet, data: &Dataset, cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset has no sequences".into()));
    }
    if data.frame_dim()? != model.config().frame_dim {
        return Err(Error::shape(format!(
            "dataset frame width {} vs model frame_dim {}",
            data.frame_dim()?,
            model.config().frame_dim
        )));
    }
    let (train_raw, val_raw) = data.split(cfg.val_fraction, cfg.seed);
    let val_raw = if val_raw.is_empty() { train_raw.clone() } else { val_raw };
    train_with_validation(model, &train_raw, &val_raw, cfg, checkpoint)
}

/// Like [`train`] with an explicit validation set; `val_fraction` is ignored.
pub fn train_with_validation(
    model: SWaveNet,
    train_raw: &Dataset,
    val_raw: &Dataset,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (what, set) in [("training", train_raw), ("validation", val_raw)] {
        if set.is_empty() {
            return Err(Error::Empty(format!("{what} dataset has no sequences")));
        }
        if set.frame_dim()? != model.config().frame_dim {
            return Err(Error::shape(format!(
                "{what} frame width {} vs model frame_dim {}",
                set.frame_dim()?,
                model.config().frame_dim
            )));
        }
    }
    let norm = if cfg.normalize {
        NormStats::fit(train_raw)?
    } else {
        NormStats::identity(model.config().frame_dim)
    };
    let train_set = norm.normalize(train_raw)?;
    let log_det = norm.log_det_per_frame();

    let total = cfg.total_steps(train_set.len());
    let schedule = AnnealSchedule {
        kind: cfg.anneal,
        total_steps: cfg.anneal_steps.unwrap_or(total),
    };
    let mut model = model;
    let mut opt = OptimizerState::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut report = TrainReport {
        stochastic_layers: model.config().stochastic_layers,
        ..TrainReport::default()
    };
    let mut best = Checkpoint {
        model: model.clone(),
        norm: norm.clone(),
    };
    let mut best_val = f64::NEG_INFINITY;
    let started = Instant::now();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::keyed_rng(&[cfg.seed, 0xe90c, epoch as u64]));
        let epoch_start = step;
        for ids in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let seqs: Vec<&Sequence> = ids.iter().map(|&i| &train_set.sequences[i]).collect();
            let batch = SequenceBatch::from_sequences(&seqs, ids.iter().map(|&i| i as u64).collect())?;
            let lambda = anneal_lambda(&schedule, step);
            let lr = lr_schedule(step, total, cfg.lr_max, cfg.lr_min);

            let abort = |detail: String| Error::NumericAbort { step, detail };
            let mut g = Graph::new();
            let bind = model.params().bind(&mut g);
            let noise = Noise::Keyed {
                seed: rng::mix(&[cfg.seed, step as u64]),
            };
            let terms = elbo_terms(&model, &mut g, &bind, &batch, &noise).map_err(|e| abort(e.to_string()))?;
            let loss = objective_loss(&mut g, &terms, lambda)?;
            let parts = breakdown(&g, &terms, lambda);
            if !parts.objective.is_finite() {
                return Err(abort(format!("objective is {}", parts.objective)));
            }
            let grads = g.backward(loss).map_err(|e| abort(e.to_string()))?;
            let params = model.params_mut();
            params.zero_grads();
            params.accumulate_grads(&bind, &grads)?;
            if let Some(c) = cfg.clip_norm {
                if let Some(norm) = clip_grad_norm(params, c) {
                    report.clip_events.push((step, norm));
                }
            }
            adam_step(params, &mut opt, lr)?;

            let shift = batch.lengths().iter().sum::<usize>() as f64 / batch.batch_size() as f64 * log_det;
            report.steps.push(StepRecord {
                step,
                lambda,
                lr,
                objective: parts.objective - shift,
                recon: parts.recon - shift,
                kl_total: parts.kl_total(),
                kl_per_layer: parts.kl_per_layer,
                wall_clock: started.elapsed().as_secs_f64(),
            });
            step += 1;
        }
        if step == epoch_start {
            break;
        }
        let val = evaluate(&model, &norm, val_raw, EvalMode::PerSequence, cfg.seed)?;
        if !val.is_finite() {
            return Err(Error::NumericAbort {
                step: step.saturating_sub(1),
                detail: format!("validation ELBO is {val}"),
            });
        }
        report.val_elbo.push((step.saturating_sub(1), val));
        if val > best_val {
            best_val = val;
            best = Checkpoint {
                model: model.clone(),
                norm: norm.clone(),
            };
            if let Some(path) = checkpoint {
                best.save(path)?;
            }
        }
        if step >= total {
            break;
        }
    }
    Ok(TrainOutcome {
        report,
        best,
        last: Checkpoint { model, norm },
    })
}
