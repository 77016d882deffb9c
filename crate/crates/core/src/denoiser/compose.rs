use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, LatentMask};

/// Network input: noisy latent, masked scene, and the single-channel mask,
/// concatenated along channels (`2·C + 1`).
#[derive(Debug, Clone)]
pub struct ComposedInput {
    pub noisy: LatentGrid,
    pub masked_scene: LatentGrid,
    pub mask: Tensor,
}

impl ComposedInput {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::cat(
            &[self.noisy.tensor(), self.masked_scene.tensor(), &self.mask],
            1,
        )?)
    }

    pub fn batch(&self) -> usize {
        self.noisy.batch()
    }

    pub fn latent_channels(&self) -> usize {
        self.noisy.dims().1
    }
}

/// Composes the generation-pass input. Mask value 1 keeps the scene, 0 marks
/// the region to customize, so `masked_scene = mask ⊙ scene`.
pub fn compose_input(z_t: &LatentGrid, scene: &LatentGrid, mask: &LatentMask) -> Result<ComposedInput> {
    z_t.ensure_same_shape(scene, "compose_input scene")?;
    let (b, c, h, w) = z_t.dims();
    if mask.blend.dims() != [b, c, h, w] || mask.channel.dims() != [b, 1, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?}/{:?} for latent {:?}",
            mask.blend.dims(),
            mask.channel.dims(),
            z_t.dims()
        )));
    }
    let mask = mask.to_dtype(z_t.dtype())?;
    let masked = (scene.tensor() * &mask.blend)?;
    Ok(ComposedInput {
        noisy: z_t.clone(),
        masked_scene: scene.with_tensor(masked)?,
        mask: mask.channel,
    })
}

/// Subject-branch input: the noisy subject at the shared timestep, the clean
/// subject in place of the masked scene, and an all-ones mask.
pub fn compose_subject(noisy_subject: &LatentGrid, subject: &LatentGrid) -> Result<ComposedInput> {
    noisy_subject.ensure_same_shape(subject, "compose_subject")?;
    let (b, _, h, w) = subject.dims();
    let ones = Tensor::ones((b, 1, h, w), subject.dtype(), subject.tensor().device())?;
    Ok(ComposedInput {
        noisy: noisy_subject.clone(),
        masked_scene: subject.clone(),
        mask: ones,
    })
}
