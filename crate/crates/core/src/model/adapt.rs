//! Initializing a 9-band network from 3-band weights.
//!
//! The RGB kernel is copied into input channels 0..3 of the wider kernel;
//! channels 3..9 are filled according to [`AdaptMode`]. With the focus stem
//! the stem kernel has one 3-channel block per pixel parity, and each block
//! is adapted on its own.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Model, STEM_WEIGHT};
use crate::error::{Error, Result};
use crate::model::checkpoint::WeightMap;

const RGB: usize = 3;
const BANDS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    /// Extra channels drawn from a normal with the RGB kernel's standard deviation.
    Replicate,
    /// Every extra channel set to the mean over the three RGB channels.
    Average,
    /// Extra channels zero, so extra bands do not affect the output.
    Zero,
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptMode::Replicate => "replicate",
            AdaptMode::Average => "average",
            AdaptMode::Zero => "zero",
        })
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "replicate" => Ok(AdaptMode::Replicate),
            "average" => Ok(AdaptMode::Average),
            "zero" => Ok(AdaptMode::Zero),
            _ => Err(Error::InvalidArgument(format!(
                "unknown adaptation mode {s:?}, expected replicate, average or zero"
            ))),
        }
    }
}

/// Widens `blocks` groups of 3 input channels to groups of 9, values given
/// row-major as `[out, 3 * blocks, k, k]`.
fn widen(
    values: &[f64],
    out: usize,
    blocks: usize,
    kk: usize,
    mode: AdaptMode,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (cin, cout) = (RGB * blocks, BANDS * blocks);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite deviation");
    let mut w = vec![0f64; out * cout * kk];
    for o in 0..out {
        for b in 0..blocks {
            let src = |c: usize, i: usize| values[(o * cin + b * RGB + c) * kk + i];
            for c in 0..RGB {
                for i in 0..kk {
                    w[(o * cout + b * BANDS + c) * kk + i] = src(c, i);
                }
            }
            for c in RGB..BANDS {
                for i in 0..kk {
                    w[(o * cout + b * BANDS + c) * kk + i] = match mode {
                        AdaptMode::Zero => 0.0,
                        AdaptMode::Average => (0..RGB).map(|j| src(j, i)).sum::<f64>() / RGB as f64,
                        AdaptMode::Replicate => normal.sample(rng),
                    };
                }
            }
        }
    }
    w
}

fn adapt_blocks(w: &Tensor, blocks: usize, mode: AdaptMode, seed: u64) -> Result<Tensor> {
    let (out, cin, kh, kw) = w.dims4()?;
    if cin != RGB * blocks {
        return Err(Error::Shape(format!(
            "expected {} input channels to adapt, got {cin}",
            RGB * blocks
        )));
    }
    let values = w.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("kernel contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wide = widen(&values, out, blocks, kh * kw, mode, &mut rng);
    Ok(Tensor::from_vec(wide, (out, BANDS * blocks, kh, kw), w.device())?.to_dtype(w.dtype())?)
}

/// `[out, 3, k, k] -> [out, 9, k, k]`; `seed` drives the replicate mode.
pub fn adapt_first_conv(w3: &Tensor, mode: AdaptMode, seed: u64) -> Result<Tensor> {
    adapt_blocks(w3, 1, mode, seed)
}

/// Focus-stem kernel `[out, 12, k, k] -> [out, 36, k, k]`, adapting each
/// pixel-parity block separately.
pub fn adapt_focus_kernel(w: &Tensor, mode: AdaptMode, seed: u64) -> Result<Tensor> {
    adapt_blocks(w, 4, mode, seed)
}

/// What [`transfer_weights`] did with each destination tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub adapted: Vec<String>,
    pub kept_init: Vec<String>,
}

/// Loads `src` weights into `dst`: equal name and shape are copied, the
/// 3-band stem kernel is widened with `mode`, everything else keeps its
/// initialization.
pub fn transfer_weights(
    src: &WeightMap,
    dst: &Model,
    mode: AdaptMode,
    seed: u64,
) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    for (name, var) in dst.store.named_vars() {
        let Some((shape, values)) = src.get(&name) else {
            report.kept_init.push(name);
            continue;
        };
        let t = Tensor::from_vec(values.clone(), shape.as_slice(), var.device())?;
        if shape.as_slice() == var.dims() {
            var.set(&t.to_dtype(var.dtype())?)?;
            report.copied.push(name);
        } else if name == STEM_WEIGHT && shape.get(1) == Some(&(4 * RGB)) {
            let wide = adapt_focus_kernel(&t, mode, seed)?;
            if wide.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "adapted stem {:?} does not fit {:?}",
                    wide.dims(),
                    var.dims()
                )));
            }
            var.set(&wide.to_dtype(var.dtype())?)?;
            report.adapted.push(name);
        } else {
            report.kept_init.push(name);
        }
    }
    Ok(report)
}
