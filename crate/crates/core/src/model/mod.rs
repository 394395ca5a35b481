//! The segmentation network and its weight plumbing.
//!
//! [`Model`] bundles a [`SegmentationModel`] with the [`ParamStore`] that
//! owns its weights. Build one from a [`ModelConfig`] and a seed, or load it
//! from a [`Checkpoint`].

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod focus;
pub mod layers;
pub mod network;
pub mod output;
pub mod params;
pub mod transformer;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

pub use adapt::{adapt_first_conv, adapt_focus_kernel, transfer_weights, AdaptMode};
pub use checkpoint::Checkpoint;
pub use config::{HeadKind, ModelConfig, STRIDES};
pub use focus::{focus_slice, unfocus_slice};
pub use network::{ModelOutput, SegmentationModel};
pub use output::{
    compose_instance_masks, decode_detections, instances_from_detections, nms,
    semantic_from_instances, semantic_prediction, Detection, Instance,
};
pub use params::ParamStore;

use crate::error::Result;

/// Name of the stem convolution kernel, `[out, 4 * in_channels, 3, 3]`.
pub const STEM_WEIGHT: &str = "backbone.stem.conv.weight";

#[derive(Clone)]
pub struct Model {
    pub store: ParamStore,
    pub net: SegmentationModel,
    dtype: DType,
    device: Device,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let store = ParamStore::new(seed);
        let net = SegmentationModel::new(cfg, store.var_builder(dtype, &device))?;
        Ok(Self {
            store,
            net,
            dtype,
            device,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Self::new(&ckpt.config, 0)?;
        model.store.import(&ckpt.weights)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        self.net.forward(&x.to_dtype(self.dtype)?)
    }

    pub fn checkpoint(&self, epoch: usize, metrics: BTreeMap<String, f64>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config().clone(),
            weights: self.store.export()?,
            epoch,
            metrics,
        })
    }
}
