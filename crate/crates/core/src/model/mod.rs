//! Stochastic WaveNet: parameter layout shared by the generative and
//! inference networks.
//!
//! Parameter names are prefix-separated: `gen.*` for the generative model,
//! `inf.*` for the inference network.

mod generative;
mod inference;

pub use generative::{ForwardPass, HiddenStates, LatentBundle, LatentSource, LayerLatents, Noise};
pub use inference::{dependency_set, BackwardFeatures};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Two width-2 dilated convolutions combined as `tanh(filter) * sigmoid(gate)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GatedConv {
    pub filter: ParamId,
    pub filter_bias: ParamId,
    pub gate: ParamId,
    pub gate_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GaussianHead {
    pub mean: Linear,
    pub log_var: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct GenLayer {
    pub conv: GatedConv,
    pub out: Linear,
    pub prior: Option<GaussianHead>,
}

#[derive(Clone, Debug)]
pub(crate) struct EmissionHead {
    pub hidden: Linear,
    pub head: GaussianHead,
}

#[derive(Clone, Debug)]
pub(crate) struct InfLayout {
    /// Head producing the top-layer backward feature from `x_t`.
    pub top: Option<Linear>,
    /// Anti-causal gated conv producing layer `l` from layer `l + 1`, indexed by `l - 1`.
    pub convs: Vec<Option<GatedConv>>,
    /// Posterior heads on `[h, b]`, indexed by `l - 1`.
    pub posterior: Vec<Option<GaussianHead>>,
}

/// Generative model, inference network and their parameters.
#[derive(Clone, Debug)]
pub struct SWaveNet {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) embed: Linear,
    pub(crate) layers: Vec<GenLayer>,
    pub(crate) emission: EmissionHead,
    pub(crate) inference: InfLayout,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.store.insert_uniform(format!("{name}.weight"), &[cin, cout], cin, self.rng)?,
            bias: self.store.insert_zeros(format!("{name}.bias"), &[cout])?,
        })
    }

    fn gated(&mut self, name: &str, width: usize) -> Result<GatedConv> {
        let mut kernel = |part: &str| self.store.insert_uniform(format!("{name}.{part}.kernel"), &[2, width, width], 2 * width, self.rng);
        let filter = kernel("filter")?;
        let gate = kernel("gate")?;
        Ok(GatedConv {
            filter,
            filter_bias: self.store.insert_zeros(format!("{name}.filter.bias"), &[width])?,
            gate,
            gate_bias: self.store.insert_zeros(format!("{name}.gate.bias"), &[width])?,
        })
    }

    fn gaussian(&mut self, name: &str, cin: usize, cout: usize) -> Result<GaussianHead> {
        Ok(GaussianHead {
            mean: self.linear(&format!("{name}.mean"), cin, cout)?,
            log_var: self.linear(&format!("{name}.log_var"), cin, cout)?,
        })
    }
}

impl SWaveNet {
    /// Fresh model with weights uniform in `±sqrt(1/fan_in)` and zero biases,
    /// drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let (h, dz, dx, big_l) = (config.hidden_dim, config.latent_per_layer(), config.frame_dim, config.layers);

        let embed = b.linear("gen.embed", dx, h)?;
        let mut layers = Vec::with_capacity(big_l);
        for l in 1..=big_l {
            let stochastic = config.is_stochastic(l);
            let conv = b.gated(&format!("gen.layer{l}"), h)?;
            let out = b.linear(&format!("gen.layer{l}.out"), h + if stochastic { dz } else { 0 }, h)?;
            let prior = if stochastic {
                Some(b.gaussian(&format!("gen.layer{l}.prior"), h, dz)?)
            } else {
                None
            };
            layers.push(GenLayer { conv, out, prior });
        }
        let emission = EmissionHead {
            hidden: b.linear("gen.emit.hidden", h, h)?,
            head: b.gaussian("gen.emit", 2 * h, dx)?,
        };

        let mut inference = InfLayout {
            top: None,
            convs: vec![None; big_l],
            posterior: vec![None; big_l],
        };
        if config.stochastic_layers > 0 {
            inference.top = Some(b.linear("inf.top", dx, h)?);
            for l in config.stochastic_layer_indices().rev() {
                if l < big_l {
                    inference.convs[l - 1] = Some(b.gated(&format!("inf.layer{l}"), h)?);
                }
                inference.posterior[l - 1] = Some(b.gaussian(&format!("inf.layer{l}.posterior"), 2 * h, dz)?);
            }
        }

        Ok(SWaveNet {
            config,
            params: store,
            embed,
            layers,
            emission,
            inference,
        })
    }

    /// Model with `config`'s layout and the values of `params`, which must
    /// hold exactly the expected names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = SWaveNet::new(config)?;
        if params.names() != model.params.names() {
            return Err(Error::config(format!(
                "checkpoint parameters do not match the configured architecture ({} vs {} tensors)",
                params.len(),
                model.params.len()
            )));
        }
        for (name, t) in params.iter() {
            let expected = model.params.by_name(name).expect("same names").shape();
            if t.shape() != expected {
                return Err(Error::shape(format!("{name}: checkpoint shape {:?}, expected {expected:?}", t.shape())));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets every value of the named parameter.
    pub fn fill_param(&mut self, name: &str, value: f64) -> Result<()> {
        let t = self.params.by_name_mut(name).ok_or_else(|| Error::config(format!("no parameter {name}")))?;
        t.values_mut().iter_mut().for_each(|v| *v = value);
        Ok(())
    }

    /// Dimension of each stochastic layer's latent vector.
    pub fn latent_dim(&self) -> usize {
        self.config.latent_per_layer()
    }
}
