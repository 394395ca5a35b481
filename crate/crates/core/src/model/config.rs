use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{ClassLabel, CANONICAL_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Plain 3x3 convolutions between the neck and the mask outputs.
    ConvBaseline,
    /// Patch tokens from the stride-8 neck map through a transformer encoder.
    Transformer,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::ConvBaseline => "conv",
            HeadKind::Transformer => "transformer",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" | "conv_baseline" => Ok(HeadKind::ConvBaseline),
            "transformer" => Ok(HeadKind::Transformer),
            _ => Err(Error::InvalidArgument(format!(
                "unknown head {s:?}, expected conv or transformer"
            ))),
        }
    }
}

/// Output strides of the three detection scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Anchor sizes in pixels at a 640 px input, three per scale. Sized for
/// the lesion and thallus scales the plate generator produces.
const ANCHORS_640: [[(f64, f64); 3]; 3] = [
    [(16.0, 16.0), (28.0, 20.0), (20.0, 28.0)],
    [(44.0, 44.0), (72.0, 56.0), (56.0, 72.0)],
    [(140.0, 140.0), (210.0, 170.0), (170.0, 210.0)],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub n_classes: usize,
    pub head: HeadKind,
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub tf_dim: usize,
    /// Side of the square patches tokenizing the stride-8 map.
    pub tf_patch: usize,
    pub n_anchors_per_scale: usize,
    pub mask_proto_channels: usize,
    /// Anchor `(w, h)` in input pixels, per scale.
    pub anchors: Vec<Vec<(f64, f64)>>,
}

impl ModelConfig {
    /// 9-band input, transformer head, full 640 px resolution.
    pub fn proposed() -> Self {
        Self {
            in_channels: 9,
            input_size: CANONICAL_SIZE,
            width_multiple: 0.25,
            depth_multiple: 0.33,
            n_classes: ClassLabel::COUNT,
            head: HeadKind::Transformer,
            tf_layers: 2,
            tf_heads: 4,
            tf_dim: 128,
            tf_patch: 8,
            n_anchors_per_scale: 3,
            mask_proto_channels: 32,
            anchors: scaled_anchors(CANONICAL_SIZE),
        }
    }

    /// RGB input, convolutional head, same backbone and neck.
    pub fn baseline() -> Self {
        Self {
            in_channels: 3,
            head: HeadKind::ConvBaseline,
            ..Self::proposed()
        }
    }

    /// Small network for desk-scale experiments and tests.
    pub fn tiny(in_channels: usize, head: HeadKind, input_size: usize) -> Self {
        Self {
            in_channels,
            input_size,
            width_multiple: 0.125,
            depth_multiple: 0.33,
            n_classes: ClassLabel::COUNT,
            head,
            tf_layers: 2,
            tf_heads: 4,
            tf_dim: 32,
            tf_patch: 1,
            n_anchors_per_scale: 3,
            mask_proto_channels: 8,
            anchors: scaled_anchors(input_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.in_channels != 3 && self.in_channels != 9 {
            return bad(format!("in_channels must be 3 or 9, got {}", self.in_channels));
        }
        if self.n_classes != ClassLabel::COUNT {
            return bad(format!("n_classes must be 4, got {}", self.n_classes));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            ));
        }
        if self.tf_heads == 0 || self.tf_dim % self.tf_heads != 0 {
            return bad(format!(
                "tf_dim {} not divisible by tf_heads {}",
                self.tf_dim, self.tf_heads
            ));
        }
        if self.tf_patch == 0 || (self.input_size / 8) % self.tf_patch != 0 {
            return bad(format!(
                "tf_patch {} must divide the stride-8 map side {}",
                self.tf_patch,
                self.input_size / 8
            ));
        }
        if self.anchors.len() != STRIDES.len()
            || self
                .anchors
                .iter()
                .any(|a| a.len() != self.n_anchors_per_scale)
        {
            return bad(format!(
                "need {} anchors for each of {} scales",
                self.n_anchors_per_scale,
                STRIDES.len()
            ));
        }
        if !(self.width_multiple > 0.0 && self.depth_multiple > 0.0) {
            return bad("width/depth multiples must be positive".into());
        }
        if self.mask_proto_channels == 0 {
            return bad("mask_proto_channels must be positive".into());
        }
        Ok(())
    }

    /// Channel count for a nominal YOLOv5-L width, rounded up to 8.
    pub fn width(&self, nominal: usize) -> usize {
        let scaled = (nominal as f64 * self.width_multiple).ceil() as usize;
        scaled.div_ceil(8).max(1) * 8
    }

    /// Repeat count for a nominal depth.
    pub fn depth(&self, nominal: usize) -> usize {
        ((nominal as f64 * self.depth_multiple).round() as usize).max(1)
    }

    /// Per-anchor prediction length: box(4) + objectness + classes + mask coefficients.
    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.n_classes + self.mask_proto_channels
    }

    /// Token count seen by the transformer head.
    pub fn n_tokens(&self) -> usize {
        let side = self.input_size / 8 / self.tf_patch;
        side * side
    }
}

/// Default anchors rescaled from 640 px to `input_size`.
pub fn scaled_anchors(input_size: usize) -> Vec<Vec<(f64, f64)>> {
    let f = input_size as f64 / CANONICAL_SIZE as f64;
    ANCHORS_640
        .iter()
        .map(|scale| scale.iter().map(|&(w, h)| (w * f, h * f)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::proposed().validate().unwrap();
        ModelConfig::baseline().validate().unwrap();
        ModelConfig::tiny(9, HeadKind::Transformer, 64).validate().unwrap();
        assert_eq!(ModelConfig::proposed().n_tokens(), 100);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::proposed();
        c.tf_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::proposed();
        c.in_channels = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::proposed();
        c.n_classes = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(9, HeadKind::Transformer, 64);
        c.tf_patch = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn width_rounds_to_eight() {
        let c = ModelConfig::tiny(9, HeadKind::ConvBaseline, 64);
        assert_eq!(c.width(64), 8);
        assert_eq!(c.width(256), 32);
        assert_eq!(c.depth(9), 3);
        assert_eq!(c.depth(1), 1);
    }

    #[test]
    fn head_names_parse() {
        assert_eq!("conv".parse::<HeadKind>().unwrap(), HeadKind::ConvBaseline);
        assert_eq!("Transformer".parse::<HeadKind>().unwrap(), HeadKind::Transformer);
        assert!("mlp".parse::<HeadKind>().is_err());
    }
}
