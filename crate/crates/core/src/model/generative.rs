use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::params::Binding;
use crate::par;
use crate::rng;
use crate::tape::{ConvDirection, Graph, Var};
use crate::tensor::Tensor;

use super::inference::BackwardFeatures;
use super::{GatedConv, GaussianHead, Linear, SWaveNet};

/// Standard-normal noise for the stochastic layers.
#[derive(Clone, Debug)]
pub enum Noise {
    /// Counter-based draws keyed by `(seed, sequence id, t, layer)`.
    Keyed { seed: u64 },
    /// One `[B, T, d']` tensor per stochastic layer, bottom first.
    Explicit(Vec<Tensor>),
}

impl Noise {
    /// Draws for layer `l` (the `slot`-th stochastic layer) as `[B * T * n]`.
    pub fn draws(&self, batch: &SequenceBatch, layer: usize, slot: usize, n: usize) -> Result<Vec<f64>> {
        let (b, t) = (batch.batch_size(), batch.time());
        match self {
            Noise::Keyed { seed } => {
                let ids = batch.ids();
                let rows = par::map_range(b * t, |r| rng::normals(*seed, ids[r / t], (r % t) as u64, layer as u64, n));
                Ok(rows.concat())
            }
            Noise::Explicit(tensors) => {
                let tensor = tensors
                    .get(slot)
                    .ok_or_else(|| Error::shape(format!("no explicit noise for stochastic layer {layer}")))?;
                if tensor.shape() != [b, t, n] {
                    return Err(Error::shape(format!("noise for layer {layer} has shape {:?}, expected [{b}, {t}, {n}]", tensor.shape())));
                }
                Ok(tensor.values().to_vec())
            }
        }
    }
}

/// Where the latent samples of a pass come from.
#[derive(Clone, Copy, Debug)]
pub enum LatentSource<'a> {
    /// Ancestral sampling from the priors with standard deviations scaled by `temperature`.
    Prior { noise: &'a Noise, temperature: f64 },
    /// Reparameterized samples from the posterior.
    Posterior { noise: &'a Noise },
    /// Supplied values, one `[B, T, d']` tensor per stochastic layer. With
    /// `posterior` set the posterior parameters are computed as well.
    Fixed { values: &'a [Tensor], posterior: bool },
}

/// Latent quantities of one stochastic layer, each `[B, T, d']`.
#[derive(Clone, Copy, Debug)]
pub struct LayerLatents {
    pub layer: usize,
    pub z: Var,
    pub prior_mean: Var,
    pub prior_log_var: Var,
    pub post_mean: Option<Var>,
    pub post_log_var: Option<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct LatentBundle {
    /// Stochastic layers, bottom first.
    pub layers: Vec<LayerLatents>,
}

/// `d[l]` for `l = 0..=L` (`d[0]` is the input embedding) and `h[l - 1]`
/// for `l = 1..=L`, each `[B, T, H]`.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub d: Vec<Var>,
    pub h: Vec<Var>,
    pub emission_mean: Var,
    pub emission_log_var: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub hidden: HiddenStates,
    pub latents: LatentBundle,
    pub backward: Option<BackwardFeatures>,
}

impl SWaveNet {
    pub(crate) fn linear(&self, g: &mut Graph, bind: &Binding, lin: Linear, x: Var) -> Result<Var> {
        g.affine(x, bind.var(lin.weight), bind.var(lin.bias))
    }

    pub(crate) fn gaussian_head(&self, g: &mut Graph, bind: &Binding, head: GaussianHead, x: Var) -> Result<(Var, Var)> {
        let mean = self.linear(g, bind, head.mean, x)?;
        let raw = self.linear(g, bind, head.log_var, x)?;
        let log_var = g.clamp_min(raw, self.config().min_log_var)?;
        Ok((mean, log_var))
    }

    /// `tanh(conv_f(x)) * sigmoid(conv_g(x)) + x`.
    pub(crate) fn gated_conv(&self, g: &mut Graph, bind: &Binding, conv: GatedConv, x: Var, dilation: usize, dir: ConvDirection) -> Result<Var> {
        let f = g.conv1d(x, bind.var(conv.filter), Some(bind.var(conv.filter_bias)), dilation, dir)?;
        let gate = g.conv1d(x, bind.var(conv.gate), Some(bind.var(conv.gate_bias)), dilation, dir)?;
        let f = g.tanh(f)?;
        let gate = g.sigmoid(gate)?;
        let prod = g.mul(f, gate)?;
        g.add(prod, x)
    }

    /// Layer-0 states from already shifted frames `[B, T, d]`.
    pub fn embed_shifted(&self, g: &mut Graph, bind: &Binding, shifted: &Tensor) -> Result<Var> {
        if shifted.shape().len() != 3 || shifted.shape()[2] != self.config().frame_dim {
            return Err(Error::shape(format!(
                "input frames {:?} for frame_dim {}",
                shifted.shape(),
                self.config().frame_dim
            )));
        }
        let x = g.leaf(shifted);
        self.linear(g, bind, self.embed, x)
    }

    /// `d_{t,0} = affine(x_{t-1})` with a zero frame before the first.
    pub fn embed_input(&self, g: &mut Graph, bind: &Binding, batch: &SequenceBatch) -> Result<Var> {
        self.embed_shifted(g, bind, &batch.shifted_frames())
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.config().layers {
            return Err(Error::config(format!("layer {l} outside 1..={}", self.config().layers)));
        }
        Ok(())
    }

    /// Gated causal conv at `dilation(l)` plus the residual from `d_prev`.
    pub fn layer_hidden(&self, g: &mut Graph, bind: &Binding, d_prev: Var, l: usize) -> Result<Var> {
        self.check_layer(l)?;
        let conv = self.layers[l - 1].conv;
        self.gated_conv(g, bind, conv, d_prev, self.config().dilation(l), ConvDirection::Causal)
    }

    /// `affine([h, z])` on stochastic layers, `affine(h)` on deterministic ones.
    pub fn layer_output(&self, g: &mut Graph, bind: &Binding, h: Var, z: Option<Var>, l: usize) -> Result<Var> {
        self.check_layer(l)?;
        let input = match (z, self.config().is_stochastic(l)) {
            (Some(z), true) => g.concat_last(h, z)?,
            (None, false) => h,
            (Some(_), false) => return Err(Error::shape(format!("layer {l} is deterministic but received latents"))),
            (None, true) => return Err(Error::shape(format!("layer {l} is stochastic and needs latents"))),
        };
        self.linear(g, bind, self.layers[l - 1].out, input)
    }

    pub fn layer_forward(&self, g: &mut Graph, bind: &Binding, d_prev: Var, z: Option<Var>, l: usize) -> Result<(Var, Var)> {
        let h = self.layer_hidden(g, bind, d_prev, l)?;
        let d = self.layer_output(g, bind, h, z, l)?;
        Ok((h, d))
    }

    pub fn prior_params(&self, g: &mut Graph, bind: &Binding, h: Var, l: usize) -> Result<(Var, Var)> {
        self.check_layer(l)?;
        let head = self.layers[l - 1]
            .prior
            .ok_or_else(|| Error::config(format!("layer {l} has no prior")))?;
        self.gaussian_head(g, bind, head, h)
    }

    /// Emission mean and clamped log-variance from the top layer state.
    pub fn emission_params(&self, g: &mut Graph, bind: &Binding, d_top: Var) -> Result<(Var, Var)> {
        let e = self.linear(g, bind, self.emission.hidden, d_top)?;
        let e = g.tanh(e)?;
        let features = g.concat_last(e, d_top)?;
        self.gaussian_head(g, bind, self.emission.head, features)
    }

    /// `z = mean + scale * exp(log_var / 2) * noise`.
    pub(crate) fn sample_gaussian(g: &mut Graph, mean: Var, log_var: Var, noise: Vec<f64>, scale: f64) -> Result<Var> {
        let half = g.scale(log_var, 0.5)?;
        let std = g.exp(half)?;
        let noise = if scale == 1.0 { noise } else { noise.into_iter().map(|e| e * scale).collect() };
        let eps = g.mul_const(std, noise)?;
        g.add(mean, eps)
    }

    /// Full bottom-up pass over a batch with teacher forcing.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, batch: &SequenceBatch, source: LatentSource<'_>) -> Result<ForwardPass> {
        let config = self.config();
        if batch.frame_dim() != config.frame_dim {
            return Err(Error::shape(format!("batch frame width {} vs model {}", batch.frame_dim(), config.frame_dim)));
        }
        if let LatentSource::Fixed { values, .. } = source {
            if values.len() != config.stochastic_layers {
                return Err(Error::shape(format!(
                    "{} latent tensors for {} stochastic layers",
                    values.len(),
                    config.stochastic_layers
                )));
            }
        }
        let want_posterior = matches!(source, LatentSource::Posterior { .. } | LatentSource::Fixed { posterior: true, .. });
        let backward = if want_posterior && config.stochastic_layers > 0 {
            Some(self.backward_features(g, bind, batch)?)
        } else {
            None
        };

        let dz = config.latent_per_layer();
        let (b, t) = (batch.batch_size(), batch.time());
        let mut d = vec![self.embed_input(g, bind, batch)?];
        let mut h = Vec::with_capacity(config.layers);
        let mut latents = LatentBundle::default();
        for l in 1..=config.layers {
            let hl = self.layer_hidden(g, bind, d[l - 1], l)?;
            let z = if config.is_stochastic(l) {
                let slot = latents.layers.len();
                let (pm, plv) = self.prior_params(g, bind, hl, l)?;
                let post = match &backward {
                    Some(bf) => Some(self.posterior_params(g, bind, hl, bf.layer(l)?, l)?),
                    None => None,
                };
                let z = match source {
                    LatentSource::Prior { noise, temperature } => {
                        Self::sample_gaussian(g, pm, plv, noise.draws(batch, l, slot, dz)?, temperature)?
                    }
                    LatentSource::Posterior { noise } => {
                        let (qm, qlv) = post.expect("posterior computed");
                        self.reparam_sample(g, qm, qlv, noise.draws(batch, l, slot, dz)?)?
                    }
                    LatentSource::Fixed { values, .. } => {
                        let v = &values[slot];
                        if v.shape() != [b, t, dz] {
                            return Err(Error::shape(format!("latents for layer {l}: {:?}, expected [{b}, {t}, {dz}]", v.shape())));
                        }
                        g.leaf(v)
                    }
                };
                latents.layers.push(LayerLatents {
                    layer: l,
                    z,
                    prior_mean: pm,
                    prior_log_var: plv,
                    post_mean: post.map(|p| p.0),
                    post_log_var: post.map(|p| p.1),
                });
                Some(z)
            } else {
                None
            };
            d.push(self.layer_output(g, bind, hl, z, l)?);
            h.push(hl);
        }
        let (emission_mean, emission_log_var) = self.emission_params(g, bind, d[config.layers])?;
        Ok(ForwardPass {
            hidden: HiddenStates {
                d,
                h,
                emission_mean,
                emission_log_var,
            },
            latents,
            backward,
        })
    }

    /// `sum_t log N(x_t; mean_t, var_t)` per sequence, `[B]`, masked past each length.
    pub fn emission_logprob(&self, g: &mut Graph, hidden: &HiddenStates, batch: &SequenceBatch) -> Result<Var> {
        let x = g.leaf(batch.frames());
        let lp = g.gaussian_logpdf(x, hidden.emission_mean, hidden.emission_log_var)?;
        let lp = g.mul_const(lp, batch.mask())?;
        g.sum_last(lp)
    }

    fn masked_logpdf(g: &mut Graph, batch: &SequenceBatch, x: Var, mean: Var, log_var: Var) -> Result<Var> {
        let lp = g.gaussian_logpdf(x, mean, log_var)?;
        let lp = g.mul_const(lp, batch.mask())?;
        g.sum_last(lp)
    }

    /// `log p(x, z)` per sequence: emission plus prior log densities of the pass's latents.
    pub fn log_joint(&self, g: &mut Graph, pass: &ForwardPass, batch: &SequenceBatch) -> Result<Var> {
        let mut total = self.emission_logprob(g, &pass.hidden, batch)?;
        for lat in &pass.latents.layers {
            let lp = Self::masked_logpdf(g, batch, lat.z, lat.prior_mean, lat.prior_log_var)?;
            total = g.add(total, lp)?;
        }
        Ok(total)
    }

    /// `log q(z | x)` per sequence for the pass's latents.
    pub fn log_posterior(&self, g: &mut Graph, pass: &ForwardPass, batch: &SequenceBatch) -> Result<Var> {
        let mut total = g.constant([batch.batch_size()], vec![0.0; batch.batch_size()])?;
        for lat in &pass.latents.layers {
            let (m, lv) = match (lat.post_mean, lat.post_log_var) {
                (Some(m), Some(lv)) => (m, lv),
                _ => return Err(Error::config("pass has no posterior parameters")),
            };
            let lp = Self::masked_logpdf(g, batch, lat.z, m, lv)?;
            total = g.add(total, lp)?;
        }
        Ok(total)
    }

    /// Ancestral sampling of `n` sequences of `t_out` frames.
    ///
    /// Each step re-runs the stack over the last `receptive_field` positions.
    /// Latents and emissions use standard deviations scaled by `temperature`.
    pub fn generate(&self, t_out: usize, n: usize, temperature: f64, seed: u64) -> Result<SequenceBatch> {
        if t_out == 0 || n == 0 {
            return Err(Error::config("generation needs t_out >= 1 and n >= 1"));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be finite and non-negative, got {temperature}")));
        }
        let config = self.config();
        let (dx, dz, r) = (config.frame_dim, config.latent_per_layer(), config.receptive_field());
        let emit_key = (config.layers + 1) as u64;
        let mut xs = vec![0.0; n * t_out * dx];
        let mut zs: Vec<Vec<f64>> = vec![vec![0.0; n * t_out * dz]; config.stochastic_layers];

        for t in 0..t_out {
            let start = (t + 1).saturating_sub(r);
            let w = t + 1 - start;
            let mut shifted = vec![0.0; n * w * dx];
            for b in 0..n {
                for (k, p) in (start..=t).enumerate() {
                    if p > 0 {
                        let src = (b * t_out + p - 1) * dx;
                        shifted[(b * w + k) * dx..(b * w + k + 1) * dx].copy_from_slice(&xs[src..src + dx]);
                    }
                }
            }
            let mut g = Graph::new();
            let bind = self.params().bind(&mut g);
            let mut d = self.embed_shifted(&mut g, &bind, &Tensor::new([n, w, dx], shifted)?)?;
            let mut slot = 0;
            for l in 1..=config.layers {
                let h = self.layer_hidden(&mut g, &bind, d, l)?;
                let z = if config.is_stochastic(l) {
                    let (pm, plv) = self.prior_params(&mut g, &bind, h, l)?;
                    let mut window = vec![0.0; n * w * dz];
                    let (pmv, plvv) = (g.value(pm), g.value(plv));
                    for b in 0..n {
                        for (k, p) in (start..=t).enumerate() {
                            let dst = (b * w + k) * dz;
                            let src = (b * t_out + p) * dz;
                            if p == t {
                                let eps = rng::normals(seed, b as u64, t as u64, l as u64, dz);
                                for j in 0..dz {
                                    let v = pmv[dst + j] + temperature * (0.5 * plvv[dst + j]).exp() * eps[j];
                                    zs[slot][src + j] = v;
                                }
                            }
                            window[dst..dst + dz].copy_from_slice(&zs[slot][src..src + dz]);
                        }
                    }
                    slot += 1;
                    Some(g.constant([n, w, dz], window)?)
                } else {
                    None
                };
                d = self.layer_output(&mut g, &bind, h, z, l)?;
            }
            let (m, lv) = self.emission_params(&mut g, &bind, d)?;
            let (mv, lvv) = (g.value(m), g.value(lv));
            for b in 0..n {
                let eps = rng::normals(seed, b as u64, t as u64, emit_key, dx);
                let row = (b * w + w - 1) * dx;
                for j in 0..dx {
                    let v = mv[row + j] + temperature * (0.5 * lvv[row + j]).exp() * eps[j];
                    if !v.is_finite() {
                        return Err(Error::NonFinite { op: "generate" });
                    }
                    xs[(b * t_out + t) * dx + j] = v;
                }
            }
        }
        SequenceBatch::from_parts(Tensor::new([n, t_out, dx], xs)?, vec![t_out; n], (0..n as u64).collect())
    }
}
