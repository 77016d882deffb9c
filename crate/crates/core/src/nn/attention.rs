//! Self-, mutual-, and cross-attention.

use candle_core::{Tensor, D};

use super::layers::{gcd_groups, GroupNorm, Linear};
use super::params::Scope;
use crate::error::{Error, Result};

/// Query/key/value projections of one attention site, each `(d, d_in)`.
#[derive(Debug, Clone)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.reshape((b, n, h * d))?)
}

/// Scaled dot-product attention; returns the attended values `(b, n, c)`
/// and the row-stochastic weights `(b, heads, n, m)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let c = q.dim(D::Minus1)?;
    if c % heads != 0 {
        return Err(Error::ShapeMismatch(format!("{c} features not divisible by {heads} heads")));
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let q = split_heads(q, heads)?;
    let k = split_heads(k, heads)?;
    let v = split_heads(v, heads)?;
    let scores = q.matmul(&k.t()?)?.affine(scale, 0.0)?;
    let weights = candle_nn::ops::softmax(&scores, candle_core::D::Minus1)?;
    let out = merge_heads(&weights.matmul(&v)?)?;
    Ok((out, weights))
}

/// Mutual attention between generated tokens and an optional set of cached
/// subject tokens: queries come from `gen` only, keys and values from the
/// row-concatenation `[gen, cached]`. Without a cache this is ordinary
/// self-attention.
pub fn mutual_attention(
    gen: &Tensor,
    cached: Option<&Tensor>,
    proj: &Projections,
) -> Result<(Tensor, Tensor)> {
    let q = proj.q.forward(gen)?;
    let kv_in = match cached {
        None => gen.clone(),
        Some(c) => {
            let (gb, _, gd) = gen.dims3()?;
            let (cb, _, cd) = c.dims3()?;
            if gd != cd || gb != cb {
                return Err(Error::ShapeMismatch(format!(
                    "generated tokens {:?} vs cached tokens {:?}",
                    gen.dims(),
                    c.dims()
                )));
            }
            Tensor::cat(&[gen, c], 1)?
        }
    };
    let k = proj.k.forward(&kv_in)?;
    let v = proj.v.forward(&kv_in)?;
    attend(&q, &k, &v, proj.heads)
}

/// Output of one self-attention site.
#[derive(Debug, Clone)]
pub struct SiteOutput {
    pub out: Tensor,
    /// Pre-attention hidden states `(b, n, c)`: the inputs to the key/value
    /// projections and what the extraction pass caches.
    pub hidden: Tensor,
    pub weights: Tensor,
}

/// Group-normalized self-attention over a feature map with a residual
/// connection and a zero-initialized output projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: GroupNorm,
    proj: Projections,
    out: Linear,
}

impl SelfAttention {
    pub fn new(vb: &Scope<'_>, channels: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&vb.pp("norm"), channels, gcd_groups(channels, groups))?,
            proj: Projections {
                q: Linear::new(&vb.pp("q"), channels, channels, false, false)?,
                k: Linear::new(&vb.pp("k"), channels, channels, false, false)?,
                v: Linear::new(&vb.pp("v"), channels, channels, false, false)?,
                heads,
            },
            out: Linear::new(&vb.pp("out"), channels, channels, true, true)?,
        })
    }

    pub fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        Ok(self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn forward(&self, x: &Tensor, cached: Option<&Tensor>) -> Result<SiteOutput> {
        let (b, c, h, w) = x.dims4()?;
        let hidden = self.hidden(x)?;
        let (attn, weights) = mutual_attention(&hidden, cached, &self.proj)?;
        let y = self.out.forward(&attn)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok(SiteOutput {
            out: (x + y)?,
            hidden,
            weights,
        })
    }
}

/// Cross-attention from a feature map to a small set of conditioning tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    proj: Projections,
    out: Linear,
}

impl CrossAttention {
    pub fn new(
        vb: &Scope<'_>,
        channels: usize,
        context_dim: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&vb.pp("norm"), channels, gcd_groups(channels, groups))?,
            proj: Projections {
                q: Linear::new(&vb.pp("q"), channels, channels, false, false)?,
                k: Linear::new(&vb.pp("k"), context_dim, channels, false, false)?,
                v: Linear::new(&vb.pp("v"), context_dim, channels, false, false)?,
                heads,
            },
            out: Linear::new(&vb.pp("out"), channels, channels, true, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let hidden = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.proj.q.forward(&hidden)?;
        let k = self.proj.k.forward(context)?;
        let v = self.proj.v.forward(context)?;
        let (attn, _) = attend(&q, &k, &v, self.proj.heads)?;
        let y = self.out.forward(&attn)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + y)?)
    }
}
