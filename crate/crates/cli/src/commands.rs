use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use swavenet::gradcheck::model_gradcheck;
use swavenet::model::Noise;
use swavenet::synth::{BimodalWalk, StrokeToy};
use swavenet::train::{evaluate, train, train_with_validation, EvalMode, TrainOutcome};
use swavenet::{rng, Checkpoint, Dataset, SWaveNet, Sequence, SequenceBatch};

use crate::config::RunConfig;
use crate::{svg, CliError};

pub const GRADCHECK_MAX_PARAMS: usize = 20_000;
pub const GRADCHECK_LEN: usize = 16;
pub const GRADCHECK_BATCH: usize = 2;
pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Bimodal,
    Stroke,
}

pub fn make_data(task: Task, n: usize, t: usize, seed: u64, out: &Path) -> Result<Dataset, CliError> {
    let (data, sidecar) = match task {
        Task::Bimodal => {
            let g = BimodalWalk::default();
            (g.generate(n, t, seed), g.sidecar(n, t, seed))
        }
        Task::Stroke => {
            let g = StrokeToy::default();
            (g.generate(n, t, seed), g.sidecar(n, t, seed))
        }
    };
    data.write_swn(out)?;
    sidecar.write(out)?;
    Ok(data)
}

fn read_dataset(path: Option<&Path>, field: &str) -> Result<Dataset, CliError> {
    let path = path.ok_or_else(|| CliError::Usage(format!("{field}: no path given")))?;
    if !path.exists() {
        return Err(CliError::Usage(format!("{field}: {} does not exist", path.display())));
    }
    Ok(Dataset::read_swn(path)?)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| {
        swavenet::Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

fn train_on(cfg: &RunConfig, train_set: &Dataset, val_set: Option<&Dataset>, best: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let model = SWaveNet::new(cfg.model_config(train_set.frame_dim()?)?)?;
    let tc = cfg.train_config()?;
    Ok(match val_set {
        Some(v) => train_with_validation(model, train_set, v, &tc, best)?,
        None => train(model, train_set, &tc, best)?,
    })
}

/// Trains as configured, writing the metrics CSV (with the resolved
/// configuration in `<metrics>.json`) and the final checkpoint.
pub fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    let data = read_dataset(cfg.dataset.as_deref(), "dataset")?;
    let val = cfg.val_dataset.as_deref().map(|p| read_dataset(Some(p), "val_dataset")).transpose()?;
    let outcome = train_on(cfg, &data, val.as_ref(), cfg.best_checkpoint.as_deref())?;
    write_file(&cfg.metrics, outcome.report.to_csv())?;
    write_file(&sidecar_path(&cfg.metrics), serde_json::to_string_pretty(cfg).expect("config serializes") + "\n")?;
    outcome.last.save(&cfg.checkpoint)?;
    let last = outcome.report.final_val().map_or("none".to_string(), |v| v.to_string());
    writeln!(out, "trained {} steps; final validation ELBO {last}", outcome.report.steps.len()).map_err(io_err)?;
    Ok(outcome)
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Usage(format!("writing output: {e}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    /// Single-sample ELBO (the log-likelihood itself without latents).
    Elbo,
    /// Exact log-likelihood; only defined without stochastic layers.
    ExactLl,
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub mode: EvalMode,
    pub metric: Metric,
    pub seed: u64,
}

pub fn eval_cmd(req: &EvalRequest<'_>, out: &mut dyn Write) -> Result<f64, CliError> {
    let ck = Checkpoint::load(req.checkpoint)?;
    let data = read_dataset(Some(req.dataset), "dataset")?;
    let s = ck.model.config().stochastic_layers;
    if req.metric == Metric::ExactLl && s > 0 {
        return Err(CliError::Usage(format!("metric: exact log-likelihood needs 0 stochastic layers, checkpoint has {s}")));
    }
    let value = evaluate(&ck.model, &ck.norm, &data, req.mode, req.seed)?;
    let name = match req.metric {
        Metric::Elbo => "elbo",
        Metric::ExactLl => "log_likelihood",
    };
    let mode = match req.mode {
        EvalMode::PerSequence => "per_sequence".to_string(),
        EvalMode::PerSegment(n) => format!("per_segment({n})"),
    };
    writeln!(out, "{name} {value}").map_err(io_err)?;
    writeln!(
        out,
        "# checkpoint={} dataset={} sequences={} mode={mode} seed={} stochastic_layers={s}",
        req.checkpoint.display(),
        req.dataset.display(),
        data.len(),
        req.seed
    )
    .map_err(io_err)?;
    Ok(value)
}

pub struct SampleRequest<'a> {
    pub checkpoint: &'a Path,
    pub n: usize,
    pub t_out: usize,
    pub temperature: f64,
    pub seed: u64,
    pub out: &'a Path,
    pub svg: Option<&'a Path>,
}

#[derive(Serialize)]
struct SampleProvenance<'a> {
    generator: &'static str,
    n: usize,
    t: usize,
    seed: u64,
    checkpoint: &'a Path,
    temperature: f64,
}

/// Draws sequences in data units; optionally renders them when frames are
/// `(dx, dy, pen)` strokes.
pub fn sample_cmd(req: &SampleRequest<'_>) -> Result<Dataset, CliError> {
    let ck = Checkpoint::load(req.checkpoint)?;
    let d = ck.model.config().frame_dim;
    if req.svg.is_some() && d != 3 {
        return Err(CliError::Usage(format!("svg: needs 3-channel stroke frames, checkpoint has frame_dim {d}")));
    }
    let batch = ck.model.generate(req.t_out, req.n, req.temperature, req.seed)?;
    let samples = ck.norm.denormalize(&batch.to_dataset())?;
    samples.write_swn(req.out)?;
    let prov = SampleProvenance {
        generator: "sample",
        n: req.n,
        t: req.t_out,
        seed: req.seed,
        checkpoint: req.checkpoint,
        temperature: req.temperature,
    };
    write_file(&sidecar_path(req.out), serde_json::to_string_pretty(&prov).expect("provenance serializes") + "\n")?;
    if let Some(path) = req.svg {
        write_file(path, svg::render(&samples))?;
    }
    Ok(samples)
}

/// Compares analytic and finite-difference gradients of the training
/// objective on a random batch. Prints one line per parameter tensor.
pub fn gradcheck_cmd(cfg: &RunConfig, corrupt: bool, out: &mut dyn Write) -> Result<Vec<(String, f64)>, CliError> {
    let model = SWaveNet::new(cfg.model_config(cfg.frame_dim.unwrap_or(1))?)?;
    let count = model.params().num_values();
    if count > GRADCHECK_MAX_PARAMS {
        return Err(CliError::Usage(format!(
            "model has {count} parameters; gradient checks are limited to {GRADCHECK_MAX_PARAMS}"
        )));
    }
    let d = model.config().frame_dim;
    let seqs: Vec<Sequence> = (0..GRADCHECK_BATCH)
        .map(|b| Sequence::new(rng::normals(cfg.seed, b as u64, 0, 0, GRADCHECK_LEN * d), d))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let batch = SequenceBatch::from_sequences(&refs, (0..GRADCHECK_BATCH as u64).collect())?;
    let noise = Noise::Keyed {
        seed: rng::mix(&[cfg.seed, 0x96c]),
    };
    let report = model_gradcheck(&model, &batch, &noise, 1.0, GRADCHECK_EPSILON, corrupt)?;
    for (name, err) in &report {
        writeln!(out, "{name} {err:.3e}").map_err(io_err)?;
    }
    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    writeln!(out, "max {worst:.3e} over {} groups ({count} parameters)", report.len()).map_err(io_err)?;
    if worst.is_nan() || worst >= GRADCHECK_TOLERANCE {
        return Err(CliError::Check(format!("max relative gradient error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    StochasticLayers(Vec<usize>),
    LatentTotal(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub setting: String,
    pub stochastic_layers: usize,
    /// Latent dimensions of each stochastic layer, bottom first.
    pub layer_dims: Vec<usize>,
    pub final_val_elbo: f64,
    pub wall_clock: f64,
    pub outcome: TrainOutcome,
}

fn sweep_configs(cfg: &RunConfig, sweep: &Sweep) -> Result<Vec<RunConfig>, CliError> {
    let (values, is_s) = match sweep {
        Sweep::StochasticLayers(v) => (v, true),
        Sweep::LatentTotal(v) => (v, false),
    };
    if values.is_empty() {
        return Err(CliError::Usage("sweep list is empty".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            if is_s {
                if v > cfg.layers {
                    return Err(CliError::Usage(format!("s_list: {v} stochastic layers exceed layers = {}", cfg.layers)));
                }
                c.stochastic_layers = v;
            } else {
                c.latent_total = v;
            }
            Ok(c)
        })
        .collect()
}

/// Latent split of a configuration without building it.
pub fn layer_dims(cfg: &RunConfig) -> Vec<usize> {
    let s = cfg.stochastic_layers;
    vec![cfg.latent_total.checked_div(s).unwrap_or(0); s]
}

/// Trains one model per setting, all with the configuration's seed.
pub fn ablate(cfg: &RunConfig, sweep: &Sweep, data: &Dataset, val: Option<&Dataset>) -> Result<Vec<AblationRow>, CliError> {
    let configs = sweep_configs(cfg, sweep)?;
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        let started = Instant::now();
        let outcome = train_on(&c, data, val, None)?;
        let dims = layer_dims(&c);
        rows.push(AblationRow {
            setting: format!("S={};d={}", c.stochastic_layers, dims.first().copied().unwrap_or(0)),
            stochastic_layers: c.stochastic_layers,
            layer_dims: dims,
            final_val_elbo: outcome.report.final_val().unwrap_or(f64::NAN),
            wall_clock: started.elapsed().as_secs_f64(),
            outcome,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,final_val_elbo,wall_clock\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.3}\n", r.setting, r.final_val_elbo, r.wall_clock));
    }
    s
}

pub fn ablate_cmd(cfg: &RunConfig, sweep: &Sweep, csv_out: &Path, out: &mut dyn Write) -> Result<Vec<AblationRow>, CliError> {
    sweep_configs(cfg, sweep)?;
    let data = read_dataset(cfg.dataset.as_deref(), "dataset")?;
    let val = cfg.val_dataset.as_deref().map(|p| read_dataset(Some(p), "val_dataset")).transpose()?;
    let rows = ablate(cfg, sweep, &data, val.as_ref())?;
    for r in &rows {
        writeln!(out, "{} layer_dims={:?} final_val_elbo={}", r.setting, r.layer_dims, r.final_val_elbo).map_err(io_err)?;
    }
    write_file(csv_out, ablation_csv(&rows))?;
    Ok(rows)
}
