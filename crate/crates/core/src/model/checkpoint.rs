//! Checkpoint files: a safetensors container whose metadata holds the model
//! config, epoch and metric snapshot as one JSON document.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "spectraleaf";

/// Named weights as `(shape, row-major f32 values)`.
pub type WeightMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: WeightMap,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
}

struct F32View<'a> {
    shape: &'a [usize],
    values: &'a [f32],
}

impl View for F32View<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(self.values.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn data_len(&self) -> usize {
        self.values.len() * 4
    }
}

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some((k, _)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("metric {k} is not finite")));
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
        };
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
        let views = self.weights.iter().map(|(name, (shape, values))| {
            (name.as_str(), F32View { shape, values })
        });
        safetensors::serialize(views, Some(meta)).map_err(format_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(format_err)?;
        let json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        let header: Header = serde_json::from_str(json)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        header.config.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(format_err)?;
        let mut weights = WeightMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected f32 data")));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            weights.insert(name, (view.shape().to_vec(), values));
        }
        Ok(Self {
            config: header.config,
            weights,
            epoch: header.epoch,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, Model};

    #[test]
    fn round_trip_is_byte_stable() {
        let cfg = ModelConfig::tiny(3, HeadKind::ConvBaseline, 64);
        let model = Model::new(&cfg, 4).unwrap();
        let ckpt = model
            .checkpoint(3, BTreeMap::from([("map50".to_string(), 0.25)]))
            .unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let reloaded = Model::from_checkpoint(&back).unwrap();
        assert_eq!(reloaded.store.export().unwrap(), ckpt.weights);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let views: Vec<(&str, F32View)> = vec![("w", F32View { shape: &[1], values: &[0.0] })];
        let bare = safetensors::serialize(views, None).unwrap();
        assert!(Checkpoint::from_bytes(&bare).is_err());
    }

    #[test]
    fn mismatched_weights_fail_to_load() {
        let cfg = ModelConfig::tiny(3, HeadKind::ConvBaseline, 64);
        let mut ckpt = Model::new(&cfg, 0).unwrap().checkpoint(0, BTreeMap::new()).unwrap();
        ckpt.config.in_channels = 9;
        assert!(Model::from_checkpoint(&ckpt).is_err());
    }
}
