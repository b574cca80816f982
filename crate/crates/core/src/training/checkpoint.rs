//! Checkpoint directories: `checkpoint.json` plus one DSUF file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig};
use crate::datamodel::{read_features, write_features};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MANIFEST_FILE: &str = "checkpoint.json";
const PARAMS_DIR: &str = "params";
const ADAM_M_DIR: &str = "optimizer/m";
const ADAM_V_DIR: &str = "optimizer/v";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// Training loss of the last step, if any step ran.
    pub loss: Option<f64>,
    pub tensors: Vec<String>,
    pub train_config: Option<TrainConfig>,
    pub has_optimizer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams<f32>,
    pub optimizer: Option<Adam<f32>>,
}

fn tensor_file(name: &str) -> String {
    format!("{name}.feat")
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut dirs = vec![PARAMS_DIR];
        if self.optimizer.is_some() {
            dirs.extend([ADAM_M_DIR, ADAM_V_DIR]);
        }
        for sub in &dirs {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            write_features(t, dir.join(PARAMS_DIR).join(tensor_file(name)))?;
        }
        if let Some(adam) = &self.optimizer {
            for (i, name) in self.params.names().iter().enumerate() {
                write_features(&adam.m[i], dir.join(ADAM_M_DIR).join(tensor_file(name)))?;
                write_features(&adam.v[i], dir.join(ADAM_V_DIR).join(tensor_file(name)))?;
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.tensors = self.params.names().to_vec();
        manifest.has_optimizer = self.optimizer.is_some();
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let expected = ModelParams::<f32>::tensor_names(&manifest.config);
        if expected != manifest.tensors {
            return Err(Error::format(
                &path,
                "tensor list does not match the model config",
            ));
        }
        let read_all = |sub: &str| -> Result<Vec<_>> {
            manifest
                .tensors
                .iter()
                .map(|name| read_features(dir.join(sub).join(tensor_file(name))))
                .collect()
        };
        let params = ModelParams::from_tensors(&manifest.config, read_all(PARAMS_DIR)?)?;
        let optimizer = if manifest.has_optimizer {
            let tc = manifest.train_config.clone().unwrap_or_default();
            let mut adam = Adam::new(params.tensors(), tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
            adam.step = manifest.step;
            adam.m = read_all(ADAM_M_DIR)?;
            adam.v = read_all(ADAM_V_DIR)?;
            if adam
                .m
                .iter()
                .chain(&adam.v)
                .zip(params.tensors().iter().chain(params.tensors()))
                .any(|(a, p)| a.shape() != p.shape())
            {
                return Err(Error::format(
                    dir,
                    "optimizer state shapes do not match parameters",
                ));
            }
            Some(adam)
        } else {
            None
        };
        Ok(Self {
            manifest,
            params,
            optimizer,
        })
    }
}
