#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use swavenet::model::{LatentSource, SWaveNet};
use swavenet::{Graph, ModelConfig, SequenceBatch, Tensor};

/// Model with every parameter (biases included) redrawn uniformly in `±scale`.
pub fn random_model(config: ModelConfig, seed: u64, scale: f64) -> SWaveNet {
    let mut m = SWaveNet::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params_mut().tensors_mut() {
        for v in t.values_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    m
}

pub fn normal_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn random_batch(b: usize, t: usize, d: usize, seed: u64) -> SequenceBatch {
    SequenceBatch::from_parts(normal_tensor(&[b, t, d], seed), vec![t; b], (0..b as u64).collect()).unwrap()
}

/// Latent tensors for every stochastic layer of `m`.
pub fn random_latents(m: &SWaveNet, b: usize, t: usize, seed: u64) -> Vec<Tensor> {
    (0..m.config().stochastic_layers)
        .map(|i| normal_tensor(&[b, t, m.latent_dim()], seed + i as u64))
        .collect()
}

/// Values of every quantity of interest from one fixed-latent pass.
pub struct Snapshot {
    pub emission: Vec<f64>,
    /// Per stochastic layer (bottom first): prior mean ++ prior log-variance.
    pub prior: Vec<Vec<f64>>,
    /// Per stochastic layer: posterior mean ++ posterior log-variance.
    pub posterior: Vec<Vec<f64>>,
    /// Per stochastic layer: backward features.
    pub backward: Vec<Vec<f64>>,
    pub hidden: usize,
    pub latent: usize,
}

pub fn snapshot(m: &SWaveNet, batch: &SequenceBatch, z: &[Tensor]) -> Snapshot {
    let mut g = Graph::new();
    let bind = m.params().bind(&mut g);
    let pass = m
        .forward(&mut g, &bind, batch, LatentSource::Fixed { values: z, posterior: true })
        .unwrap();
    let cat = |a: &[f64], b: &[f64]| a.iter().chain(b).copied().collect::<Vec<_>>();
    let mut emission = g.value(pass.hidden.emission_mean).to_vec();
    emission.extend_from_slice(g.value(pass.hidden.emission_log_var));
    let mut backward = Vec::new();
    for l in m.config().stochastic_layer_indices() {
        backward.push(g.value(pass.backward.as_ref().unwrap().layer(l).unwrap()).to_vec());
    }
    Snapshot {
        emission,
        prior: pass
            .latents
            .layers
            .iter()
            .map(|l| cat(g.value(l.prior_mean), g.value(l.prior_log_var)))
            .collect(),
        posterior: pass
            .latents
            .layers
            .iter()
            .map(|l| cat(g.value(l.post_mean.unwrap()), g.value(l.post_log_var.unwrap())))
            .collect(),
        backward,
        hidden: m.config().hidden_dim,
        latent: m.latent_dim(),
    }
}

/// Whether the rows at time `t` (0-based) of a `[1, T, width]` buffer laid
/// out as `parts` concatenated copies differ between `a` and `b`.
pub fn row_differs(a: &[f64], b: &[f64], t: usize, width: usize, parts: usize) -> bool {
    let per = a.len() / parts;
    (0..parts).any(|p| {
        let s = p * per + t * width;
        a[s..s + width].iter().zip(&b[s..s + width]).any(|(x, y)| (x - y).abs() > 0.0)
    })
}

pub fn max_row_diff(a: &[f64], b: &[f64], t: usize, width: usize, parts: usize) -> f64 {
    let per = a.len() / parts;
    (0..parts)
        .flat_map(|p| {
            let s = p * per + t * width;
            a[s..s + width].iter().zip(&b[s..s + width]).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Batch with frame `s` (0-based) of sequence 0 shifted by `delta`.
pub fn perturbed(batch: &SequenceBatch, s: usize, delta: f64) -> SequenceBatch {
    let mut p = batch.clone();
    let d = p.frame_dim();
    for j in 0..d {
        p.frames_mut().values_mut()[s * d + j] += delta;
    }
    p
}
