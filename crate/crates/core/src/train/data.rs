//! Training samples, dataset loading and batching.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::annotation::{build_semantic_mask, instance_masks, parse_labelme};
use crate::error::{Error, Result};
use crate::raster_io::{load_image, read_mask};
use crate::spectral::{extract_rgb, ClassLabel, MultiSpectralImage, NormalizeMode, Raster, SemanticMask};
use crate::synth::{DatasetManifest, Plate};
use crate::train::loss::SampleTargets;

/// One image with its semantic mask and per-instance masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Raster,
    pub semantic: SemanticMask,
    pub instances: Vec<(ClassLabel, Vec<bool>)>,
}

impl Sample {
    /// Keeps all bands for `channels == 9`, projects to R, G, B for 3.
    pub fn from_image(
        img: &MultiSpectralImage,
        semantic: SemanticMask,
        instances: Vec<(ClassLabel, Vec<bool>)>,
        channels: usize,
    ) -> Result<Self> {
        let pixels = match channels {
            c if c == img.channels() => img.pixels.clone(),
            3 => extract_rgb(img)?.pixels,
            c => {
                return Err(Error::ChannelMismatch {
                    expected: c,
                    got: img.channels(),
                })
            }
        };
        if (semantic.height, semantic.width) != (pixels.height, pixels.width) {
            return Err(Error::Shape(format!(
                "{}: mask {}x{} does not match image {}x{}",
                img.sample_id, semantic.height, semantic.width, pixels.height, pixels.width
            )));
        }
        Ok(Self {
            id: img.sample_id.clone(),
            image: pixels,
            semantic,
            instances,
        })
    }

    pub fn from_plate(plate: &Plate, channels: usize) -> Result<Self> {
        let instances = instance_masks(&plate.annotations, &plate.mask);
        Self::from_image(&plate.image, plate.mask.clone(), instances, channels)
    }

    pub fn targets(&self) -> SampleTargets {
        SampleTargets::new(self.semantic.clone(), &self.instances)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }
}

/// Loads the listed samples of a generated or ingested dataset. The stored
/// mask is the semantic ground truth; instances come from the annotation
/// polygons restricted to it.
pub fn load_samples(dir: &Path, manifest: &DatasetManifest, ids: &[String], channels: usize) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            let entry = manifest
                .entries
                .iter()
                .find(|e| &e.sample_id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {id} not in manifest")))?;
            let img = load_image(&dir.join(&entry.image_path), NormalizeMode::default())?;
            let semantic = read_mask(&dir.join(&entry.mask_path))?;
            let ann_path = dir.join(&entry.annotation_path);
            let doc = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            let ann = parse_labelme(&doc, Some(id))?;
            if build_semantic_mask(&ann) != semantic {
                log::warn!("{id}: stored mask differs from its polygons; using the stored mask");
            }
            let instances = instance_masks(&ann, &semantic);
            Sample::from_image(&img, semantic, instances, channels)
        })
        .collect()
}

/// Stacks images into `[B, C, H, W]`.
pub fn batch_tensor(samples: &[&Sample], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, h, w) = (first.image.channels, first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if (s.image.channels, s.image.height, s.image.width) != (c, h, w) {
            return Err(Error::Shape(format!("{} differs in shape from {}", s.id, first.id)));
        }
        data.extend_from_slice(&s.image.data);
    }
    Ok(Tensor::from_vec(data, (samples.len(), c, h, w), device)?.to_dtype(dtype)?)
}
