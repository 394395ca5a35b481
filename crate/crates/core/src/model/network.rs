use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder};

use super::config::{HeadKind, ModelConfig, STRIDES};
use super::focus::{focus, unfocus};
use super::layers::{resize_bilinear, upsample_nearest, ConvBlock, C3, Spp};
use super::transformer::{LayerNorm, TransformerEncoder};
use crate::error::{Error, Result};
use crate::spectral::ClassLabel;

/// Channels of the reduced semantic features fused with the stem output.
const SEM_REDUCED: usize = 8;
const SEM_HIDDEN: usize = 32;
/// Narrowest stem. Each stem cell encodes four input pixels, so a very thin
/// stem starves the full-resolution semantic map.
const STEM_MIN: usize = 32;

/// Raw network outputs for a batch.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Per scale (strides 8, 16, 32): `[B, A, gh, gw, 5 + classes + coeffs]`
    /// logits laid out as `x, y, w, h, objectness, class logits, mask
    /// coefficients`.
    pub detections: Vec<Tensor>,
    /// Mask prototypes `[B, nm, H/4, W/4]`.
    pub prototypes: Tensor,
    /// Per-class pixel logits `[B, 4, H, W]`.
    pub semantic: Tensor,
    /// Attention weights `[B, heads, N, N]` per encoder layer; empty for the
    /// convolutional head.
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct TransformerHead {
    embed: Conv2d,
    pos: Tensor,
    encoder: TransformerEncoder,
    norm: LayerNorm,
    proj: Conv2d,
    patch: usize,
}

#[derive(Debug, Clone)]
enum Head {
    Conv(ConvBlock, ConvBlock),
    Transformer(Box<TransformerHead>),
}

/// Focus stem, CSP backbone with SPP, PANet neck, detection and mask
/// outputs. The configured head sits between the stride-8 neck map and the
/// prototype/semantic branch.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    cfg: ModelConfig,
    stem: ConvBlock,
    down1: ConvBlock,
    stage1: C3,
    down2: ConvBlock,
    stage2: C3,
    down3: ConvBlock,
    stage3: C3,
    down4: ConvBlock,
    spp: Spp,
    stage4: C3,
    lat5: ConvBlock,
    top4: C3,
    lat4: ConvBlock,
    top3: C3,
    bottom_down3: ConvBlock,
    bottom4: C3,
    bottom_down4: ConvBlock,
    bottom5: C3,
    head: Head,
    proto1: ConvBlock,
    proto2: ConvBlock,
    proto_out: Conv2d,
    sem_reduce: Conv2d,
    sem_fuse: ConvBlock,
    sem_out: Conv2d,
    detect: Vec<Conv2d>,
    priors: Vec<Tensor>,
}

fn conv1x1(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(candle_nn::conv2d(c_in, c_out, 1, Conv2dConfig::default(), vb)?)
}

impl SegmentationModel {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let (c1, c2, c3, c4, c5) = (
            cfg.width(64).max(STEM_MIN),
            cfg.width(128),
            cfg.width(256),
            cfg.width(512),
            cfg.width(1024),
        );
        let (n3, n9) = (cfg.depth(3), cfg.depth(9));
        let npr = cfg.width(256);
        let nm = cfg.mask_proto_channels;
        let no = cfg.outputs_per_anchor();
        let na = cfg.n_anchors_per_scale;

        let b = vb.pp("backbone");
        let n = vb.pp("neck");
        let head = match cfg.head {
            HeadKind::ConvBaseline => {
                let h = vb.pp("head");
                Head::Conv(
                    ConvBlock::new(c3, c3, 3, 1, h.pp("cv1"))?,
                    ConvBlock::new(c3, c3, 3, 1, h.pp("cv2"))?,
                )
            }
            HeadKind::Transformer => {
                let h = vb.pp("head");
                let patch_cfg = Conv2dConfig {
                    stride: cfg.tf_patch,
                    ..Default::default()
                };
                Head::Transformer(Box::new(TransformerHead {
                    embed: candle_nn::conv2d(c3, cfg.tf_dim, cfg.tf_patch, patch_cfg, h.pp("embed"))?,
                    pos: h.get_with_hints(
                        (cfg.n_tokens(), cfg.tf_dim),
                        "pos",
                        Init::Randn {
                            mean: 0.0,
                            stdev: 0.02,
                        },
                    )?,
                    encoder: TransformerEncoder::new(
                        cfg.tf_layers,
                        cfg.tf_dim,
                        cfg.tf_heads,
                        h.pp("encoder"),
                    )?,
                    norm: LayerNorm::new(cfg.tf_dim, h.pp("norm"))?,
                    proj: conv1x1(cfg.tf_dim, c3, h.pp("proj"))?,
                    patch: cfg.tf_patch,
                }))
            }
        };

        let mut detect = Vec::new();
        let mut priors = Vec::new();
        let obj_cls_prior = (0.6 / (cfg.n_classes as f64 - 0.99)).ln();
        for (i, (&stride, c)) in STRIDES.iter().zip([c3, c4, c5]).enumerate() {
            detect.push(conv1x1(c, na * no, vb.pp(format!("detect.{i}")))?);
            let cells = (cfg.input_size / stride).pow(2) as f64;
            let mut p = vec![0f32; no];
            p[4] = (8.0 / cells).ln() as f32;
            for v in &mut p[5..5 + cfg.n_classes] {
                *v = obj_cls_prior as f32;
            }
            let prior = Tensor::from_vec(p, (1, 1, 1, 1, no), vb.device())?.to_dtype(vb.dtype())?;
            priors.push(prior);
        }

        let m = vb.pp("mask");
        Ok(Self {
            cfg: cfg.clone(),
            stem: ConvBlock::new(4 * cfg.in_channels, c1, 3, 1, b.pp("stem"))?,
            down1: ConvBlock::new(c1, c2, 3, 2, b.pp("down1"))?,
            stage1: C3::new(c2, c2, n3, true, b.pp("stage1"))?,
            down2: ConvBlock::new(c2, c3, 3, 2, b.pp("down2"))?,
            stage2: C3::new(c3, c3, n9, true, b.pp("stage2"))?,
            down3: ConvBlock::new(c3, c4, 3, 2, b.pp("down3"))?,
            stage3: C3::new(c4, c4, n9, true, b.pp("stage3"))?,
            down4: ConvBlock::new(c4, c5, 3, 2, b.pp("down4"))?,
            spp: Spp::new(c5, c5, b.pp("spp"))?,
            stage4: C3::new(c5, c5, n3, false, b.pp("stage4"))?,
            lat5: ConvBlock::new(c5, c4, 1, 1, n.pp("lat5"))?,
            top4: C3::new(2 * c4, c4, n3, false, n.pp("top4"))?,
            lat4: ConvBlock::new(c4, c3, 1, 1, n.pp("lat4"))?,
            top3: C3::new(2 * c3, c3, n3, false, n.pp("top3"))?,
            bottom_down3: ConvBlock::new(c3, c3, 3, 2, n.pp("bottom_down3"))?,
            bottom4: C3::new(2 * c3, c4, n3, false, n.pp("bottom4"))?,
            bottom_down4: ConvBlock::new(c4, c4, 3, 2, n.pp("bottom_down4"))?,
            bottom5: C3::new(2 * c4, c5, n3, false, n.pp("bottom5"))?,
            head,
            proto1: ConvBlock::new(c3, npr, 3, 1, m.pp("proto1"))?,
            proto2: ConvBlock::new(npr, npr, 3, 1, m.pp("proto2"))?,
            proto_out: conv1x1(npr, nm, m.pp("proto_out"))?,
            sem_reduce: conv1x1(npr, SEM_REDUCED, m.pp("sem_reduce"))?,
            sem_fuse: ConvBlock::new(SEM_REDUCED + c1, SEM_HIDDEN, 3, 1, m.pp("sem_fuse"))?,
            sem_out: conv1x1(SEM_HIDDEN, 4 * ClassLabel::COUNT, m.pp("sem_out"))?,
            detect,
            priors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Forward pass on `[B, C, H, W]` reflectance in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        let (bsz, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.in_channels,
                got: c,
            });
        }
        let s = self.cfg.input_size;
        if h != s || w != s {
            return Err(Error::Shape(format!(
                "model expects {s}x{s} input, got {h}x{w}"
            )));
        }

        let stem = self.stem.forward(&focus(x)?)?;
        let x = self.stage1.forward(&self.down1.forward(&stem)?)?;
        let p3 = self.stage2.forward(&self.down2.forward(&x)?)?;
        let p4 = self.stage3.forward(&self.down3.forward(&p3)?)?;
        let p5 = self.down4.forward(&p4)?;
        let p5 = self.stage4.forward(&self.spp.forward(&p5)?)?;

        let l5 = self.lat5.forward(&p5)?;
        let t4 = self
            .top4
            .forward(&Tensor::cat(&[upsample_nearest(&l5, 2)?, p4], 1)?)?;
        let l4 = self.lat4.forward(&t4)?;
        let n3 = self
            .top3
            .forward(&Tensor::cat(&[upsample_nearest(&l4, 2)?, p3], 1)?)?;
        let n4 = self
            .bottom4
            .forward(&Tensor::cat(&[self.bottom_down3.forward(&n3)?, l4], 1)?)?;
        let n5 = self
            .bottom5
            .forward(&Tensor::cat(&[self.bottom_down4.forward(&n4)?, l5], 1)?)?;

        let na = self.cfg.n_anchors_per_scale;
        let no = self.cfg.outputs_per_anchor();
        let mut detections = Vec::with_capacity(3);
        for ((feat, conv), prior) in [&n3, &n4, &n5].into_iter().zip(&self.detect).zip(&self.priors) {
            let (_, _, gh, gw) = feat.dims4()?;
            let d = conv
                .forward(feat)?
                .reshape((bsz, na, no, gh, gw))?
                .permute((0, 1, 3, 4, 2))?
                .contiguous()?
                .broadcast_add(prior)?;
            detections.push(d);
        }

        let (feat, attention) = match &self.head {
            Head::Conv(a, b) => (b.forward(&a.forward(&n3)?)?, Vec::new()),
            Head::Transformer(t) => {
                let e = t.embed.forward(&n3)?;
                let (_, d, th, tw) = e.dims4()?;
                let tokens = e.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
                let (enc, maps) = t.encoder.forward_with_attention(&tokens, Some(&t.pos))?;
                let enc = t
                    .norm
                    .forward(&enc)?
                    .transpose(1, 2)?
                    .contiguous()?
                    .reshape((bsz, d, th, tw))?;
                let up = upsample_nearest(&enc, t.patch)?;
                ((&n3 + t.proj.forward(&up)?)?, maps)
            }
        };

        let pf = self.proto1.forward(&feat)?;
        let pf = self.proto2.forward(&upsample_nearest(&pf, 2)?)?;
        let prototypes = self.proto_out.forward(&pf)?;

        let sem = self.sem_reduce.forward(&pf)?;
        let sem = resize_bilinear(&sem, h / 2, w / 2)?;
        let sem = self.sem_fuse.forward(&Tensor::cat(&[sem, stem], 1)?)?;
        let semantic = unfocus(&self.sem_out.forward(&sem)?)?;

        Ok(ModelOutput {
            detections,
            prototypes,
            semantic,
            attention,
        })
    }
}
