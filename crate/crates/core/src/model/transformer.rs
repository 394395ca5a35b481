//! Pre-norm transformer encoder over `[B, N, d]` token sequences.

use candle_core::{Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};

use super::layers::softmax_last;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(d, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(d, "bias", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Multi-head self-attention.
#[derive(Debug, Clone)]
pub struct Mhsa {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    d: usize,
}

impl Mhsa {
    pub fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: candle_nn::linear(d, d, vb.pp("q"))?,
            k: candle_nn::linear(d, d, vb.pp("k"))?,
            v: candle_nn::linear(d, d, vb.pp("v"))?,
            out: candle_nn::linear(d, d, vb.pp("out"))?,
            heads,
            d,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        let (b, n, _) = t.dims3()?;
        Ok(t.reshape((b, n, self.heads, self.d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Output `[B, N, d]` and attention weights `[B, heads, N, N]`.
    pub fn forward_with_attention(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = x.dims3()?;
        if d != self.d {
            return Err(Error::Shape(format!("attention expects width {}, got {d}", self.d)));
        }
        let dk = (self.d / self.heads) as f64;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(x)?)?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / dk.sqrt())?;
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, self.d))?;
        Ok((self.out.forward(&ctx)?, attn))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(x)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: Mhsa,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderLayer {
    pub fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(d, vb.pp("ln1"))?,
            attn: Mhsa::new(d, heads, vb.pp("attn"))?,
            ln2: LayerNorm::new(d, vb.pp("ln2"))?,
            fc1: candle_nn::linear(d, 4 * d, vb.pp("fc1"))?,
            fc2: candle_nn::linear(4 * d, d, vb.pp("fc2"))?,
        })
    }

    pub fn forward_with_attention(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, attn) = self.attn.forward_with_attention(&self.ln1.forward(x)?)?;
        let x = (x + a)?;
        let m = self
            .fc2
            .forward(&gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?)?;
        Ok(((x + m)?, attn))
    }
}

/// Exact GELU built from `erf`, whose backward pass is exact; the fused
/// `gelu_erf` op differentiates an approximation.
fn gelu(x: &Tensor) -> Result<Tensor> {
    let e = (x / std::f64::consts::SQRT_2)?.erf()?;
    Ok(((x * 0.5)? * (e + 1.0)?)?)
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(n_layers: usize, d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(d, heads, vb.pp(format!("layers.{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Adds `pos` (broadcast over the batch) then runs every layer. Returns
    /// the encoded tokens and one attention tensor per layer.
    pub fn forward_with_attention(
        &self,
        x: &Tensor,
        pos: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = match pos {
            Some(p) => x.broadcast_add(p)?,
            None => x.clone(),
        };
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, attn) = layer.forward_with_attention(&h)?;
            h = next;
            maps.push(attn);
        }
        Ok((h, maps))
    }

    pub fn forward(&self, x: &Tensor, pos: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_attention(x, pos)?.0)
    }
}
