//! Run configuration: a flat JSON document covering the model, the optimizer
//! and artifact paths. Command-line flags `--key value` override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use swavenet::objective::AnnealKind;
use swavenet::train::TrainConfig;
use swavenet::ModelConfig;

use crate::CliError;

fn default_layers() -> usize {
    3
}
fn default_stochastic() -> usize {
    2
}
fn default_hidden() -> usize {
    16
}
fn default_latent() -> usize {
    6
}
fn default_min_log_var() -> f64 {
    -14.0
}
fn default_epochs() -> usize {
    10
}
fn default_metrics() -> PathBuf {
    PathBuf::from("metrics.csv")
}
fn default_checkpoint() -> PathBuf {
    PathBuf::from("model.ckpt")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_stochastic")]
    pub stochastic_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_latent")]
    pub latent_total: usize,
    /// Frame width when no dataset fixes it (gradient checks).
    #[serde(default)]
    pub frame_dim: Option<usize>,
    #[serde(default = "default_min_log_var")]
    pub min_log_var: f64,
    /// Seeds parameter initialization, data splitting, shuffling and noise.
    #[serde(default)]
    pub seed: u64,

    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub lr_max: Option<f64>,
    #[serde(default)]
    pub lr_min: Option<f64>,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub anneal: Option<AnnealKind>,
    #[serde(default)]
    pub anneal_steps: Option<usize>,
    #[serde(default)]
    pub val_fraction: Option<f64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub normalize: Option<bool>,

    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Explicit validation set; otherwise `val_fraction` of `dataset` is held out.
    #[serde(default)]
    pub val_dataset: Option<PathBuf>,
    #[serde(default = "default_metrics")]
    pub metrics: PathBuf,
    /// Parameters after the final step.
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    /// Parameters with the best validation ELBO, refreshed after every improving epoch.
    #[serde(default)]
    pub best_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("every field has a default")
    }
}

impl RunConfig {
    /// Reads `path` (if any) and applies `overrides` on top, key by key.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
        let mut doc = match path {
            None => Map::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                match serde_json::from_str(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(CliError::Usage(format!("{}: expected a JSON object", p.display()))),
                    Err(e) => return Err(CliError::Usage(format!("{}: {e}", p.display()))),
                }
            }
        };
        for (key, raw) in overrides {
            doc.insert(key.replace('-', "_"), parse_flag_value(raw));
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(Value::Object(doc)).map_err(|e| {
            let field = e.path().to_string();
            if field == "." {
                CliError::Usage(e.into_inner().to_string())
            } else {
                CliError::Usage(format!("{field}: {}", e.into_inner()))
            }
        })?;
        Ok(cfg)
    }

    pub fn model_config(&self, frame_dim: usize) -> Result<ModelConfig, CliError> {
        if let Some(d) = self.frame_dim {
            if d != frame_dim {
                return Err(CliError::Usage(format!("frame_dim: configured {d} but the data has {frame_dim}")));
            }
        }
        let cfg = ModelConfig {
            layers: self.layers,
            stochastic_layers: self.stochastic_layers,
            hidden_dim: self.hidden_dim,
            latent_total: self.latent_total,
            frame_dim,
            min_log_var: self.min_log_var,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut t = TrainConfig::new(self.epochs);
        t.seed = self.seed;
        t.max_steps = self.max_steps;
        t.anneal_steps = self.anneal_steps;
        t.clip_norm = self.clip_norm;
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { t.$f = v; })*};
        }
        set!(batch_size, lr_max, lr_min, beta1, beta2, eps, anneal, val_fraction, normalize);
        t.validate()?;
        Ok(t)
    }
}

/// Flag values are read as JSON when they parse (numbers, booleans, `null`)
/// and as plain strings otherwise.
fn parse_flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Config file path and `(key, value)` overrides.
pub type Flags = (Option<PathBuf>, Vec<(String, String)>);

/// Splits `--key value` pairs, pulling out `--config path`.
pub fn parse_flags(args: &[String]) -> Result<Flags, CliError> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| CliError::Usage(format!("expected a --key flag, found `{flag}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    Ok((config, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"layers": 4, "lr_max": 0.01, "dataset": "a.swn"}"#).unwrap();
        let (cfg_path, pairs) = parse_flags(&strings(&["--config", path.to_str().unwrap(), "--lr-max", "0.002", "--anneal=linear"])).unwrap();
        let cfg = RunConfig::load(cfg_path.as_deref(), &pairs).unwrap();
        assert_eq!(cfg.layers, 4);
        assert_eq!(cfg.lr_max, Some(0.002));
        assert_eq!(cfg.anneal, Some(AnnealKind::Linear));
        assert_eq!(cfg.dataset, Some(PathBuf::from("a.swn")));
        assert_eq!(cfg.train_config().unwrap().lr_max, 0.002);
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_field() {
        let err = RunConfig::load(None, &[("hiden_dim".into(), "3".into())]).unwrap_err();
        assert!(err.to_string().contains("hiden_dim"), "{err}");
        let err = RunConfig::load(None, &[("epochs".into(), "many".into())]).unwrap_err();
        assert!(err.to_string().starts_with("epochs"), "{err}");
        let err = RunConfig::load(None, &[("lr_max".into(), "-1".into())]).unwrap().train_config().unwrap_err();
        assert!(err.to_string().contains("lr_max"), "{err}");
        assert!(parse_flags(&strings(&["--seed"])).is_err());
        assert!(parse_flags(&strings(&["seed", "1"])).is_err());
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::new(cfg.epochs));
    }

    #[test]
    fn frame_dim_must_match_the_data() {
        let cfg = RunConfig::load(None, &[("frame_dim".into(), "3".into())]).unwrap();
        assert!(cfg.model_config(1).is_err());
        assert_eq!(cfg.model_config(3).unwrap().frame_dim, 3);
    }
}
