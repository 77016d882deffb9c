//! Image/latent grids and region masks.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Space {
    Pixel,
    Latent,
}

/// Rank-4 `(batch, channel, height, width)` array tagged with its space.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    data: Tensor,
    space: Space,
}

impl LatentGrid {
    pub fn new(data: Tensor, space: Space) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "grid must be rank 4, got {:?}",
                data.dims()
            )));
        }
        Ok(Self { data, space })
    }

    pub fn pixel(data: Tensor) -> Result<Self> {
        Self::new(data, Space::Pixel)
    }

    pub fn latent(data: Tensor) -> Result<Self> {
        Self::new(data, Space::Latent)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn with_tensor(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.space)
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.data.dims() != other.data.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.data.dims(),
                other.data.dims()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> Result<bool> {
        let v = self
            .data
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self
            .data
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }
}

/// Binary pixel-space mask `(batch, 1, height, width)`.
///
/// Value 1 marks preserved scene background, 0 marks the customized region.
#[derive(Debug, Clone)]
pub struct RegionMask {
    data: Tensor,
}

impl RegionMask {
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims[1] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "mask must be (b, 1, h, w), got {dims:?}"
            )));
        }
        let values = data.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidRange("mask entries must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Swaps preserved and customized regions.
    pub fn complement(&self) -> Result<Self> {
        Ok(Self {
            data: self.data.affine(-1.0, 1.0)?,
        })
    }

    /// Fraction of pixels marked as customized (value 0), per batch item.
    pub fn region_fraction(&self) -> Result<Vec<f64>> {
        let (b, _, h, w) = self.dims();
        let kept = self
            .data
            .to_dtype(DType::F64)?
            .reshape((b, h * w))?
            .sum(1)?
            .to_vec1::<f64>()?;
        Ok(kept.iter().map(|k| 1.0 - k / (h * w) as f64).collect())
    }
}

/// Mask resampled to latent resolution.
///
/// `channel` is the single-channel mask appended to the composed input;
/// `blend` matches the latent channel layout exactly and drives the
/// background-preserving blend.
#[derive(Debug, Clone)]
pub struct LatentMask {
    pub channel: Tensor,
    pub blend: Tensor,
}

impl LatentMask {
    pub fn complement(&self) -> Result<Self> {
        Ok(Self {
            channel: self.channel.affine(-1.0, 1.0)?,
            blend: self.blend.affine(-1.0, 1.0)?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            channel: self.channel.to_dtype(dtype)?,
            blend: self.blend.to_dtype(dtype)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn rejects_non_binary_masks() {
        let t = Tensor::new(&[0.0f32, 0.5, 1.0, 1.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 2, 2))
            .unwrap();
        assert!(RegionMask::new(t).is_err());
    }

    #[test]
    fn complement_flips_fraction() {
        let t = Tensor::new(&[0.0f32, 1.0, 1.0, 1.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 2, 2))
            .unwrap();
        let m = RegionMask::new(t).unwrap();
        assert_eq!(m.region_fraction().unwrap(), vec![0.25]);
        assert_eq!(m.complement().unwrap().region_fraction().unwrap(), vec![0.75]);
    }

    #[test]
    fn grid_requires_rank_four() {
        let t = Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(LatentGrid::pixel(t).is_err());
    }
}
