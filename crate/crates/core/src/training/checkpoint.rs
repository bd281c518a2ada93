use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::dataset::SchemaSet;
use crate::nn::ParamStore;
use crate::{Error, Result, LATENT_DIM};

pub const FORMAT_VERSION: u32 = 1;

/// `{dir}/{stage}-{tag}.safetensors` plus its `.json` sidecar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub weights: PathBuf,
    pub sidecar: PathBuf,
}

impl CheckpointPaths {
    pub fn new(dir: &Path, stage: Stage, tag: &str) -> Self {
        let stem = format!("{}-{tag}", stage.name());
        CheckpointPaths {
            weights: dir.join(format!("{stem}.safetensors")),
            sidecar: dir.join(format!("{stem}.json")),
        }
    }

    /// Accepts either file of the pair or the common stem.
    pub fn from_any(path: &Path) -> Self {
        let stem = path.with_extension("");
        CheckpointPaths {
            weights: stem.with_extension("safetensors"),
            sidecar: stem.with_extension("json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    pub schema_hash: String,
    pub schemas: SchemaSet,
    /// Model configuration needed to rebuild the parameter layout.
    pub dims: serde_json::Value,
    pub latent_dim: usize,
    /// Per-category paste order, keyed by category id.
    #[serde(default)]
    pub paste_orders: BTreeMap<usize, Vec<usize>>,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

impl CheckpointMeta {
    pub fn new(stage: Stage, schemas: &SchemaSet, dims: serde_json::Value) -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            stage,
            schema_hash: schemas.hash(),
            schemas: schemas.clone(),
            dims,
            latent_dim: LATENT_DIM,
            paste_orders: BTreeMap::new(),
            epoch: 0,
            baseline: stage.is_baseline().then(|| stage.name().to_string()),
        }
    }

    pub fn save(&self, store: &ParamStore, paths: &CheckpointPaths) -> Result<()> {
        if let Some(dir) = paths.weights.parent() {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        store.save(&paths.weights)?;
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(&paths.sidecar, json).map_err(Error::io(&paths.sidecar))?;
        Ok(())
    }

    pub fn read(paths: &CheckpointPaths) -> Result<Self> {
        let bytes = std::fs::read(&paths.sidecar).map_err(Error::io(&paths.sidecar))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{} has format version {}, expected {FORMAT_VERSION}",
                paths.sidecar.display(),
                meta.format_version
            )));
        }
        if meta.schemas.hash() != meta.schema_hash {
            return Err(Error::Checkpoint(format!(
                "{} schema does not match its recorded hash",
                paths.sidecar.display()
            )));
        }
        Ok(meta)
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Checkpoint(format!("checkpoint holds {}, expected {stage}", self.stage)));
        }
        Ok(())
    }

    pub fn dims_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.dims.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::tests::tiny_corpus;
    use candle_core::DType;

    #[test]
    fn sidecar_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(1, 2);
        let store = ParamStore::new(0, DType::F32);
        store.root().uniform("w", &[3], 1.0).unwrap();
        let meta = CheckpointMeta::new(Stage::BsLstm, &corpus.schemas, serde_json::json!({"hidden": 32}));
        let paths = CheckpointPaths::new(dir.path(), Stage::BsLstm, "last");
        meta.save(&store, &paths).unwrap();
        let back = CheckpointMeta::read(&CheckpointPaths::from_any(&paths.weights)).unwrap();
        assert_eq!(back, meta);
        assert_eq!(back.baseline.as_deref(), Some("bslstm"));
        assert!(back.expect_stage(Stage::BoxVae).is_err());

        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&paths.sidecar).unwrap()).unwrap();
        v["schema_hash"] = "00".into();
        std::fs::write(&paths.sidecar, v.to_string()).unwrap();
        assert!(CheckpointMeta::read(&paths).is_err());
    }
}
