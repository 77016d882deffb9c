//! Image <-> latent codecs.
//!
//! The denoiser works on latents produced by a [`Codec`]. The shipped codec is
//! a lossless space-to-depth rearrangement: every `factor x factor` pixel block
//! becomes `factor²` channels. With `factor = 1` it is the identity.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, LatentMask, RegionMask, Space};

pub trait Codec {
    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid>;
    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid>;
    fn encode_mask(&self, mask: &RegionMask) -> Result<LatentMask>;
    fn latent_channels(&self, image_channels: usize) -> usize;
    fn latent_size(&self, image_size: usize) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpaceToDepth {
    pub factor: usize,
}

impl SpaceToDepth {
    pub const IDENTITY: SpaceToDepth = SpaceToDepth { factor: 1 };

    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidRange("codec factor must be >= 1".into()));
        }
        Ok(Self { factor })
    }

    fn unshuffle(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.factor;
        if r == 1 {
            return Ok(x.clone());
        }
        let (b, c, h, w) = x.dims4()?;
        if h % r != 0 || w % r != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} not divisible by codec factor {r}"
            )));
        }
        Ok(x.reshape((b, c, h / r, r, w / r, r))?
            .permute((0, 1, 3, 5, 2, 4))?
            .reshape((b, c * r * r, h / r, w / r))?)
    }

    fn shuffle(&self, z: &Tensor) -> Result<Tensor> {
        let r = self.factor;
        if r == 1 {
            return Ok(z.clone());
        }
        let (b, cr, h, w) = z.dims4()?;
        if cr % (r * r) != 0 {
            return Err(Error::ShapeMismatch(format!(
                "latent channels {cr} not divisible by {}",
                r * r
            )));
        }
        let c = cr / (r * r);
        Ok(z.reshape((b, c, r, r, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, c, h * r, w * r))?)
    }
}

impl Codec for SpaceToDepth {
    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid> {
        LatentGrid::new(self.unshuffle(image.tensor())?, Space::Latent)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        LatentGrid::new(self.shuffle(latent.tensor())?, Space::Pixel)
    }

    /// The blend mask is the exact per-pixel mask rearranged like the image.
    /// The input channel keeps a latent cell only when its whole pixel block
    /// is preserved; for block-aligned masks this equals nearest-neighbour
    /// resampling.
    fn encode_mask(&self, mask: &RegionMask) -> Result<LatentMask> {
        let m = mask.tensor();
        let r = self.factor;
        let per_pixel = self.unshuffle(m)?;
        let channel = if r == 1 {
            m.clone()
        } else {
            per_pixel.min_keepdim(1)?
        };
        Ok(LatentMask {
            channel,
            blend: per_pixel,
        })
    }

    fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels * self.factor * self.factor
    }

    fn latent_size(&self, image_size: usize) -> usize {
        image_size / self.factor
    }
}

impl LatentMask {
    /// Broadcasts the per-pixel blend mask over image channels.
    pub fn for_channels(&self, image_channels: usize) -> Result<Self> {
        let blend = if image_channels == 1 {
            self.blend.clone()
        } else {
            let parts = vec![self.blend.clone(); image_channels];
            Tensor::cat(&parts, 1)?
        };
        Ok(Self {
            channel: self.channel.clone(),
            blend,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn ramp(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let n = b * c * h * w;
        Tensor::arange(0f32, n as f32, &Device::Cpu)
            .unwrap()
            .reshape((b, c, h, w))
            .unwrap()
    }

    #[test]
    fn space_to_depth_is_lossless() {
        let codec = SpaceToDepth::new(4).unwrap();
        let x = LatentGrid::pixel(ramp(2, 3, 8, 8)).unwrap();
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.dims(), (2, 48, 2, 2));
        let back = codec.decode(&z).unwrap();
        let diff = (back.tensor() - x.tensor())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn blend_mask_follows_channel_layout() {
        // A mask that preserves only the top-left pixel of each 2x2 block.
        let codec = SpaceToDepth::new(2).unwrap();
        let m: Vec<f32> = (0..16)
            .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let mask = RegionMask::new(
            Tensor::from_vec(m, (1, 1, 4, 4), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let lm = codec.encode_mask(&mask).unwrap().for_channels(3).unwrap();
        assert_eq!(lm.blend.dims(), &[1, 12, 2, 2]);
        assert_eq!(lm.channel.dims(), &[1, 1, 2, 2]);
        // channel k*4 + 0 is the top-left sub-pixel for every colour k
        let v = lm.blend.flatten_from(2).unwrap().to_vec3::<f32>().unwrap();
        for (ch, row) in v[0].iter().enumerate() {
            let expect = if ch % 4 == 0 { 1.0 } else { 0.0 };
            assert!(row.iter().all(|&x| x == expect), "channel {ch}");
        }
        let ch = lm.channel.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(ch.iter().all(|&x| x == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn any_factor_round_trips_losslessly(factor in 1usize..5, blocks in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
            let codec = SpaceToDepth::new(factor).unwrap();
            let n = factor * blocks;
            let t = crate::rng::normal_tensor(&mut crate::rng::stream(seed, &[]), &[1, c, n, n], candle_core::DType::F32, &Device::Cpu).unwrap();
            let x = LatentGrid::pixel(t).unwrap();
            let z = codec.encode(&x).unwrap();
            proptest::prop_assert_eq!(z.dims(), (1, c * factor * factor, blocks, blocks));
            proptest::prop_assert_eq!(codec.decode(&z).unwrap().to_vec().unwrap(), x.to_vec().unwrap());
        }
    }
}
