//! Trained model on disk: parameters in a `SWNCKPT1` file, architecture and
//! normalization statistics in a JSON file next to it (`<path>.json`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::SWaveNet;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SWaveNet,
    pub norm: NormStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    norm: NormStats,
}

impl Checkpoint {
    pub fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        p.into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.model.params().save(path)?;
        let meta = Meta {
            model: self.model.config().clone(),
            norm: self.norm.clone(),
        };
        let meta_path = Self::meta_path(path);
        let text = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
        std::fs::write(&meta_path, text + "\n").map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let meta_path = Self::meta_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|source| Error::Json { path: meta_path, source })?;
        if meta.norm.mean.len() != meta.model.frame_dim {
            return Err(Error::shape(format!(
                "normalizer width {} vs frame_dim {}",
                meta.norm.mean.len(),
                meta.model.frame_dim
            )));
        }
        let params = ParamStore::load(path)?;
        Ok(Checkpoint {
            model: SWaveNet::from_params(meta.model, params)?,
            norm: meta.norm,
        })
    }
}
