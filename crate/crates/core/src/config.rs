use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// Layers are numbered `1..=layers`; layer `l` convolves with dilation
/// `2^(l-1)`. The top `stochastic_layers` layers carry latent variables of
/// `latent_total / stochastic_layers` dimensions each; the bottom
/// `layers - stochastic_layers` are deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub stochastic_layers: usize,
    pub hidden_dim: usize,
    pub latent_total: usize,
    pub frame_dim: usize,
    #[serde(default = "default_min_log_var")]
    pub min_log_var: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_log_var() -> f64 {
    -14.0
}

impl ModelConfig {
    pub fn new(layers: usize, stochastic_layers: usize, hidden_dim: usize, latent_total: usize, frame_dim: usize) -> Self {
        ModelConfig {
            layers,
            stochastic_layers,
            hidden_dim,
            latent_total,
            frame_dim,
            min_log_var: default_min_log_var(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("frame_dim", self.frame_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.layers > 30 {
            return Err(Error::config("layers must be at most 30"));
        }
        if self.stochastic_layers > self.layers {
            return Err(Error::config(format!(
                "stochastic_layers ({}) exceeds layers ({})",
                self.stochastic_layers, self.layers
            )));
        }
        if self.stochastic_layers > 0 && self.latent_per_layer() == 0 {
            return Err(Error::config(format!(
                "latent_total ({}) leaves no latent dimension for {} stochastic layers",
                self.latent_total, self.stochastic_layers
            )));
        }
        if !self.min_log_var.is_finite() {
            return Err(Error::config("min_log_var must be finite"));
        }
        Ok(())
    }

    /// `floor(D / S)`, or 0 without stochastic layers.
    pub fn latent_per_layer(&self) -> usize {
        self.latent_total.checked_div(self.stochastic_layers).unwrap_or(0)
    }

    pub fn dilation(&self, layer: usize) -> usize {
        1 << (layer - 1)
    }

    pub fn is_stochastic(&self, layer: usize) -> bool {
        layer > self.layers - self.stochastic_layers && layer <= self.layers
    }

    /// Lowest stochastic layer index, if any.
    pub fn first_stochastic(&self) -> Option<usize> {
        (self.stochastic_layers > 0).then(|| self.layers - self.stochastic_layers + 1)
    }

    pub fn stochastic_layer_indices(&self) -> std::ops::RangeInclusive<usize> {
        (self.layers - self.stochastic_layers + 1)..=self.layers
    }

    /// Frames that can influence one output: `1 + sum of dilations = 2^L`.
    pub fn receptive_field(&self) -> usize {
        1 + (1..=self.layers).map(|l| self.dilation(l)).sum::<usize>()
    }

    /// Same architecture with only the top `stochastic_layers` layers stochastic.
    pub fn ablate(&self, stochastic_layers: usize) -> Result<ModelConfig> {
        if stochastic_layers > self.layers {
            return Err(Error::config(format!(
                "cannot keep {stochastic_layers} stochastic layers in a {}-layer model",
                self.layers
            )));
        }
        Ok(ModelConfig {
            stochastic_layers,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilations_double() {
        let c = ModelConfig::new(5, 5, 8, 10, 1);
        for l in 1..5 {
            assert_eq!(c.dilation(l + 1), 2 * c.dilation(l));
        }
        assert_eq!(c.dilation(1), 1);
    }

    #[test]
    fn receptive_field_is_power_of_two() {
        for (l, rf) in [(1, 2), (4, 16), (5, 32)] {
            assert_eq!(ModelConfig::new(l, 0, 4, 0, 1).receptive_field(), rf);
        }
    }

    #[test]
    fn ablation_splits_latent_dims() {
        let base = ModelConfig::new(5, 5, 8, 500, 1);
        assert_eq!(base.ablate(5).unwrap().latent_per_layer(), 100);
        let four = base.ablate(4).unwrap();
        assert_eq!(four.latent_per_layer(), 125);
        assert!(!four.is_stochastic(1));
        assert!((2..=5).all(|l| four.is_stochastic(l)));
        let dims: Vec<_> = (1..=5).map(|s| base.ablate(s).unwrap().latent_per_layer()).collect();
        assert_eq!(dims, [500, 250, 166, 125, 100]);
        let vanilla = base.ablate(0).unwrap();
        assert_eq!(vanilla.latent_per_layer(), 0);
        assert!((1..=5).all(|l| !vanilla.is_stochastic(l)));
        assert_eq!(base.ablate(5).unwrap(), base);
        assert!(matches!(base.ablate(6), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_bad_configs() {
        assert!(ModelConfig::new(3, 4, 8, 8, 1).validate().is_err());
        assert!(ModelConfig::new(3, 3, 8, 2, 1).validate().is_err());
        assert!(ModelConfig::new(0, 0, 8, 2, 1).validate().is_err());
        assert!(ModelConfig::new(3, 0, 8, 0, 1).validate().is_ok());
    }
}
