//! Convolutional building blocks.
//!
//! Pooling and upsampling are written in terms of elementwise tensor ops so
//! that their gradients are exact; candle's stride-1 max pool and nearest
//! upsample kernels have no usable backward pass.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, VarBuilder};

use crate::error::Result;

const NORM_EPS: f64 = 1e-5;

/// Group count for a normalization over `c` channels: up to 8 groups of at
/// least two channels each.
pub fn norm_groups(c: usize) -> usize {
    [8, 4, 2]
        .into_iter()
        .find(|g| c % g == 0 && c / g >= 2)
        .unwrap_or(1)
}

/// Convolution, group norm, SiLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: k / 2,
            stride,
            ..Default::default()
        };
        let conv = candle_nn::conv2d_no_bias(c_in, c_out, k, cfg, vb.pp("conv"))?;
        let norm = candle_nn::group_norm(norm_groups(c_out), c_out, NORM_EPS, vb.pp("norm"))?;
        Ok(Self { conv, norm })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    cv1: ConvBlock,
    cv2: ConvBlock,
    shortcut: bool,
}

impl Bottleneck {
    pub fn new(c: usize, shortcut: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            cv1: ConvBlock::new(c, c, 1, 1, vb.pp("cv1"))?,
            cv2: ConvBlock::new(c, c, 3, 1, vb.pp("cv2"))?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x)?)?;
        Ok(if self.shortcut { (x + y)? } else { y })
    }
}

/// Cross-stage partial block: one half of the channels goes through a
/// bottleneck stack, the other half skips it, and a 1x1 conv merges them.
#[derive(Debug, Clone)]
pub struct C3 {
    cv1: ConvBlock,
    cv2: ConvBlock,
    cv3: ConvBlock,
    m: Vec<Bottleneck>,
}

impl C3 {
    pub fn new(c_in: usize, c_out: usize, n: usize, shortcut: bool, vb: VarBuilder) -> Result<Self> {
        let hidden = (c_out / 2).max(1);
        let m = (0..n)
            .map(|i| Bottleneck::new(hidden, shortcut, vb.pp(format!("m.{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            cv1: ConvBlock::new(c_in, hidden, 1, 1, vb.pp("cv1"))?,
            cv2: ConvBlock::new(c_in, hidden, 1, 1, vb.pp("cv2"))?,
            cv3: ConvBlock::new(2 * hidden, c_out, 1, 1, vb.pp("cv3"))?,
            m,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut a = self.cv1.forward(x)?;
        for b in &self.m {
            a = b.forward(&a)?;
        }
        let b = self.cv2.forward(x)?;
        self.cv3.forward(&Tensor::cat(&[a, b], 1)?)
    }
}

/// Spatial pyramid pooling with 5, 9 and 13 px stride-1 max pools.
#[derive(Debug, Clone)]
pub struct Spp {
    cv1: ConvBlock,
    cv2: ConvBlock,
}

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

impl Spp {
    pub fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = c_in / 2;
        Ok(Self {
            cv1: ConvBlock::new(c_in, hidden, 1, 1, vb.pp("cv1"))?,
            cv2: ConvBlock::new(hidden * (SPP_KERNELS.len() + 1), c_out, 1, 1, vb.pp("cv2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.cv1.forward(x)?;
        // A 5x5 pool applied twice is exactly a 9x9 pool, three times a 13x13.
        let p5 = max_pool_same(&x, 5)?;
        let p9 = max_pool_same(&p5, 5)?;
        let p13 = max_pool_same(&p9, 5)?;
        self.cv2.forward(&Tensor::cat(&[x, p5, p9, p13], 1)?)
    }
}

fn max_pool_axis(x: &Tensor, k: usize, dim: usize) -> Result<Tensor> {
    let r = k / 2;
    let n = x.dim(dim)?;
    let padded = x.pad_with_same(dim, r, r)?;
    let mut acc = padded.narrow(dim, 0, n)?;
    for s in 1..k {
        acc = acc.maximum(&padded.narrow(dim, s, n)?)?;
    }
    Ok(acc)
}

/// Stride-1 `k x k` max pool over the last two dims with output size equal
/// to input size. Windows are clipped at the border.
pub fn max_pool_same(x: &Tensor, k: usize) -> Result<Tensor> {
    let rank = x.rank();
    let y = max_pool_axis(x, k, rank - 1)?;
    max_pool_axis(&y, k, rank - 2)
}

/// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?;
    Ok(y)
}

/// `[out, in]` matrix of half-pixel-centred linear interpolation weights.
fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let t = (src - i0 as f64) as f32;
        m[o * n_in + i0] += 1.0 - t;
        m[o * n_in + i1] += t;
    }
    m
}

/// Bilinear resize of `[B, C, H, W]` as two matrix products.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev: &Device = x.device();
    let dtype: DType = x.dtype();
    let mw = Tensor::from_vec(interp_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(dtype)?
        .t()?;
    let mh = Tensor::from_vec(interp_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dtype)?;
    let y = x.broadcast_matmul(&mw)?;
    let y = mh.broadcast_matmul(&y)?;
    Ok(y)
}

/// Softmax over the last dimension built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}
