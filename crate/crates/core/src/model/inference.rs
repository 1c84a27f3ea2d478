use crate::config::ModelConfig;
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::params::Binding;
use crate::tape::{ConvDirection, Graph, Var};

use super::generative::{ForwardPass, LatentSource, Noise};
use super::SWaveNet;

/// Reversed-WaveNet features `b_{t,l}` for the stochastic layers, each `[B, T, H]`.
#[derive(Clone, Debug)]
pub struct BackwardFeatures {
    layers: Vec<Option<Var>>,
}

impl BackwardFeatures {
    pub fn layer(&self, l: usize) -> Result<Var> {
        l.checked_sub(1)
            .and_then(|i| self.layers.get(i).copied().flatten())
            .ok_or_else(|| Error::config(format!("no backward features for layer {l}")))
    }
}

/// Output times (1-based, sorted) whose emissions `z_{t,l}` can influence in
/// a length-`t_len` sequence: `s(L, t) = {t}` and
/// `s(l, t) = s(l+1, t) ∪ s(l+1, t + dilation(l+1))`, clipped to `[1, t_len]`.
pub fn dependency_set(config: &ModelConfig, l: usize, t: usize, t_len: usize) -> Result<Vec<usize>> {
    if l == 0 || l > config.layers {
        return Err(Error::config(format!("layer {l} outside 1..={}", config.layers)));
    }
    if t == 0 || t > t_len {
        return Err(Error::config(format!("time {t} outside 1..={t_len}")));
    }
    let mut set = vec![t];
    for upper in l + 1..=config.layers {
        let dil = config.dilation(upper);
        let shifted: Vec<usize> = set.iter().map(|&s| s + dil).filter(|&s| s <= t_len).collect();
        set.extend(shifted);
        set.sort_unstable();
        set.dedup();
    }
    Ok(set)
}

impl SWaveNet {
    /// `b_{t,L} = affine(x_t)`, then for `l = L-1` down to the lowest
    /// stochastic layer a gated anti-causal conv over `b_{.,l+1}` at
    /// `dilation(l+1)`. Positions past each sequence's end are zeroed, which
    /// is right zero-padding.
    pub fn backward_features(&self, g: &mut Graph, bind: &Binding, batch: &SequenceBatch) -> Result<BackwardFeatures> {
        let config = self.config();
        let big_l = config.layers;
        let mut layers = vec![None; big_l];
        let Some(first) = config.first_stochastic() else {
            return Ok(BackwardFeatures { layers });
        };
        let top = self.inference.top.ok_or_else(|| Error::config("model has no inference network"))?;
        let mask = batch.mask();
        let x = g.leaf(&batch.masked_frames());
        let b_top = self.linear(g, bind, top, x)?;
        let mut b = g.mask_rows(b_top, mask.clone())?;
        layers[big_l - 1] = Some(b);
        for l in (first..big_l).rev() {
            let conv = self.inference.convs[l - 1].expect("conv for every non-top stochastic layer");
            let raw = self.gated_conv(g, bind, conv, b, config.dilation(l + 1), ConvDirection::AntiCausal)?;
            b = g.mask_rows(raw, mask.clone())?;
            layers[l - 1] = Some(b);
        }
        Ok(BackwardFeatures { layers })
    }

    /// Posterior mean and clamped log-variance from `[h_{t,l}, b_{t,l}]`.
    pub fn posterior_params(&self, g: &mut Graph, bind: &Binding, h: Var, b: Var, l: usize) -> Result<(Var, Var)> {
        let head = l
            .checked_sub(1)
            .and_then(|i| self.inference.posterior.get(i).copied().flatten())
            .ok_or_else(|| Error::config(format!("layer {l} has no posterior")))?;
        let hb = g.concat_last(h, b)?;
        self.gaussian_head(g, bind, head, hb)
    }

    /// `z = mean + exp(log_var / 2) * noise`.
    pub fn reparam_sample(&self, g: &mut Graph, mean: Var, log_var: Var, noise: Vec<f64>) -> Result<Var> {
        Self::sample_gaussian(g, mean, log_var, noise, 1.0)
    }

    /// Forward pass with latents drawn from the posterior.
    pub fn posterior_pass(&self, g: &mut Graph, bind: &Binding, batch: &SequenceBatch, noise: &Noise) -> Result<ForwardPass> {
        self.forward(g, bind, batch, LatentSource::Posterior { noise })
    }
}
