//! JSON checkpoints holding weights and the configs that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_json, write_json_atomically};

use super::mlp::{FieldArch, FieldParams};
use super::render::RenderConfig;
use super::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: FieldArch,
    pub values: Vec<f64>,
    pub train: TrainConfig,
    pub render: RenderConfig,
    /// Fingerprint of the parameters, checked on load.
    pub fingerprint: String,
}

impl Checkpoint {
    pub fn new(params: &FieldParams, train: &TrainConfig, render: &RenderConfig) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            arch: params.arch().clone(),
            values: params.values().to_vec(),
            train: train.clone(),
            render: render.clone(),
            fingerprint: params.fingerprint(),
        }
    }

    pub fn params(&self) -> Result<FieldParams> {
        FieldParams::from_values(self.arch.clone(), self.values.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomically(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::BadField {
                path: path.to_path_buf(),
                field: "version".into(),
                reason: format!("unsupported checkpoint version {}", ck.version),
            });
        }
        let params = ck.params().map_err(|e| Error::BadField {
            path: path.to_path_buf(),
            field: "values".into(),
            reason: e.to_string(),
        })?;
        if params.fingerprint() != ck.fingerprint {
            return Err(Error::BadField {
                path: path.to_path_buf(),
                field: "fingerprint".into(),
                reason: "does not match stored values".into(),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = FieldParams::init(FieldArch::default(), 4).unwrap();
        let ck = Checkpoint::new(&p, &TrainConfig::default(), &RenderConfig::default());
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params().unwrap().values(), p.values());
        assert_eq!(back, ck);
    }

    #[test]
    fn tampered_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = FieldParams::init(FieldArch::default(), 4).unwrap();
        let mut ck = Checkpoint::new(&p, &TrainConfig::default(), &RenderConfig::default());
        ck.values[0] += 1.0;
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::BadField { .. })));
    }
}
