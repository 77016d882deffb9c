use candle_core::{Tensor, D};

use super::params::{Init, Scope};
use crate::error::{Error, Result};

/// 3x3 convolution, stride 1, zero padding 1, lowered to a single matmul
/// over the nine shifted copies of the input.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    out_channels: usize,
}

impl Conv3x3 {
    pub fn new(vb: &Scope<'_>, in_channels: usize, out_channels: usize, zero: bool) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::fan_in(9 * in_channels) };
        let weight = vb.get("weight", &[out_channels, 9 * in_channels], init)?;
        let bias = vb.get("bias", &[out_channels], if zero { Init::Zeros } else { init })?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut shifted = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                shifted.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
            }
        }
        let cols = Tensor::cat(&shifted, 1)?.reshape((b, 9 * c, h * w))?;
        let out = self.weight.broadcast_matmul(&cols)?;
        let out = out.broadcast_add(&self.bias.reshape((1, self.out_channels, 1))?)?;
        Ok(out.reshape((b, self.out_channels, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1x1 {
    weight: Tensor,
    bias: Tensor,
    out_channels: usize,
}

impl Conv1x1 {
    pub fn new(vb: &Scope<'_>, in_channels: usize, out_channels: usize, zero: bool) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::fan_in(in_channels) };
        Ok(Self {
            weight: vb.get("weight", &[out_channels, in_channels], init)?,
            bias: vb.get("bias", &[out_channels], init)?,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let out = self.weight.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        let out = out.broadcast_add(&self.bias.reshape((1, self.out_channels, 1))?)?;
        Ok(out.reshape((b, self.out_channels, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &Scope<'_>, in_dim: usize, out_dim: usize, bias: bool, zero: bool) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::fan_in(in_dim) };
        let weight = vb.get("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(vb.get("bias", &[out_dim], init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_weight(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Group normalization over `(batch, channel, ...)` with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(vb: &Scope<'_>, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidRange(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: vb.get("gamma", &[channels], Init::Ones)?,
            beta: vb.get("beta", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (b, c) = (dims[0], dims[1]);
        let grouped = x.reshape((b, self.groups, ()))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let mut shape = vec![1, c];
        shape.extend(std::iter::repeat_n(1, dims.len() - 2));
        let normed = normed.reshape(dims.as_slice())?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape.as_slice())?)?
            .broadcast_add(&self.beta.reshape(shape.as_slice())?)?)
    }
}

/// Sinusoidal timestep features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freq_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(vb: &Scope<'_>, freq_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            freq_dim,
            fc1: Linear::new(&vb.pp("fc1"), freq_dim, out_dim, true, false)?,
            fc2: Linear::new(&vb.pp("fc2"), out_dim, out_dim, true, false)?,
        })
    }

    pub fn forward(&self, ts: &[usize], like: &Tensor) -> Result<Tensor> {
        let half = self.freq_dim / 2;
        let mut feats = Vec::with_capacity(ts.len() * self.freq_dim);
        for &t in ts {
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                feats.push((t as f64 * freq).sin());
            }
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                feats.push((t as f64 * freq).cos());
            }
            feats.extend(std::iter::repeat_n(0.0, self.freq_dim - 2 * half));
        }
        let x = Tensor::from_vec(feats, (ts.len(), self.freq_dim), like.device())?.to_dtype(like.dtype())?;
        let h = self.fc1.forward(&x)?.silu()?;
        self.fc2.forward(&h)
    }
}

/// Residual block with timestep conditioning.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Conv1x1>,
    out_channels: usize,
}

impl ResBlock {
    pub fn new(
        vb: &Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        time_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        let skip = if in_channels != out_channels {
            Some(Conv1x1::new(&vb.pp("skip"), in_channels, out_channels, false)?)
        } else {
            None
        };
        Ok(Self {
            norm1: GroupNorm::new(&vb.pp("norm1"), in_channels, gcd_groups(in_channels, groups))?,
            conv1: Conv3x3::new(&vb.pp("conv1"), in_channels, out_channels, false)?,
            time: Linear::new(&vb.pp("time"), time_dim, out_channels, true, false)?,
            norm2: GroupNorm::new(&vb.pp("norm2"), out_channels, gcd_groups(out_channels, groups))?,
            conv2: Conv3x3::new(&vb.pp("conv2"), out_channels, out_channels, false)?,
            skip,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let b = x.dim(0)?;
        let t = self.time.forward(&temb.silu()?)?.reshape((b, self.out_channels, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Largest group count `<= groups` that divides `channels`.
pub fn gcd_groups(channels: usize, groups: usize) -> usize {
    (1..=groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// 2x2 mean pooling.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}
