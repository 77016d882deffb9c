//! Sampling loops: region customization with latent blending, outpainting by
//! mask reversal, and signature-interpolation sweeps.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::baselines::Model;
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, LatentMask, RegionMask};
use crate::instrument::AttentionTrace;
use crate::recycling::{guided_step, Conditioning, GeminiInputs, GeminiOptions, SparsePolicy};
use crate::rng;
use crate::schedule::{clip_noise_estimate, forward_diffuse, sample_loop, sampler_invert, sampler_step, DiffusionSchedule};

/// Images are pixel grids in `[-1, 1]`; the mask is 1 on preserved
/// background and 0 on the region to customize.
#[derive(Debug, Clone)]
pub struct CustomizationRequest {
    pub scene: LatentGrid,
    pub mask: RegionMask,
    pub subject: LatentGrid,
    pub guidance: f64,
    pub lambda_inf: f64,
    pub seed: u64,
    /// Width/height of the subject before it was fitted to the model input,
    /// if known.
    pub subject_aspect: Option<f64>,
}

impl CustomizationRequest {
    pub fn new(scene: LatentGrid, mask: RegionMask, subject: LatentGrid, seed: u64) -> Self {
        Self { scene, mask, subject, guidance: 1.0, lambda_inf: 1.0, seed, subject_aspect: None }
    }

    pub fn validate(&self) -> Result<()> {
        let (b, _, h, w) = self.scene.dims();
        if self.mask.dims() != (b, 1, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} for scene {:?}",
                self.mask.dims(),
                self.scene.dims()
            )));
        }
        self.scene.ensure_same_shape(&self.subject, "subject")?;
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::InvalidRange(format!("guidance {} must be >= 0", self.guidance)));
        }
        SparsePolicy::new(self.lambda_inf, self.seed)?;
        Ok(())
    }

    fn with_mask(&self, mask: RegionMask) -> Self {
        Self { mask, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct Customization {
    pub image: LatentGrid,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
enum Stream {
    Init,
    Subject,
    Scene,
}

fn noise(seed: u64, which: Stream, step: u64, like: &LatentGrid) -> Result<LatentGrid> {
    let mut r = rng::stream(seed, &[rng::tag("sample"), which as u64, step]);
    let (b, c, h, w) = like.dims();
    like.with_tensor(rng::normal_tensor(&mut r, &[b, c, h, w], like.dtype(), like.tensor().device())?)
}

/// `keep ? scene : z`, elementwise and exact.
fn blend(mask: &LatentMask, scene: &LatentGrid, z: &LatentGrid) -> Result<LatentGrid> {
    let keep = mask.blend.ge(0.5)?;
    z.with_tensor(keep.where_cond(scene.tensor(), z.tensor())?)
}

fn region_aspect(mask: &RegionMask) -> Result<Option<f64>> {
    let m = mask.tensor().narrow(0, 0, 1)?.squeeze(0)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (y, row) in m.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            if v < 0.5 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    Ok((y0 != usize::MAX).then(|| (x1 - x0 + 1) as f64 / (y1 - y0 + 1) as f64))
}

fn looks_untrained(model: &Model) -> Result<bool> {
    for (name, var) in model.base_params.vars() {
        if name.starts_with("conv_out.") && var.as_tensor().abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? > 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The codec rearranges pixels losslessly, so latents share the pixel range.
const PIXEL_BOUND: f64 = 1.0;

/// Sampling never backpropagates; cutting the graph at every step keeps the
/// whole chain from being retained through the trainable parameters.
fn detached(eps: &LatentGrid) -> Result<LatentGrid> {
    eps.with_tensor(eps.tensor().detach())
}

/// Customizes the masked region of the scene with the subject. Every
/// sampler step is followed by a blend that restores the scene, noised to
/// the next level, outside the region; the last blend uses the clean scene.
/// Clean estimates are clamped to the pixel range at every step.
pub fn customize(req: &CustomizationRequest, model: &Model, sched: &DiffusionSchedule, trace: bool) -> Result<Customization> {
    req.validate()?;
    if looks_untrained(model)? {
        log::warn!("model output layer is all zeros; it looks untrained");
    }
    if let (Some(sa), Some(ra)) = (req.subject_aspect, region_aspect(&req.mask)?) {
        if (sa / ra).max(ra / sa) > 1.5 {
            log::warn!("subject aspect {sa:.2} differs from region aspect {ra:.2}; the subject may repeat or stretch");
        }
    }
    let dtype = model.dtype();
    let codec = model.cfg.codec();
    let image_channels = req.scene.dims().1;
    let scene = codec.encode(&req.scene.with_tensor(req.scene.tensor().to_dtype(dtype)?)?)?;
    let subject = codec.encode(&req.subject.with_tensor(req.subject.tensor().to_dtype(dtype)?)?)?;
    let mask = codec.encode_mask(&req.mask)?.for_channels(image_channels)?.to_dtype(dtype)?;
    let masked_scene = scene.with_tensor((scene.tensor() * &mask.blend)?)?;
    let tokens = model.base.encode_semantic(&subject, &masked_scene)?;
    let policy = SparsePolicy::new(req.lambda_inf, req.seed)?;

    let b = scene.batch();
    let steps = sched.timesteps();
    let mut z = noise(req.seed, Stream::Init, 0, &scene)?;
    let mut traces = AttentionTrace::default();
    for (i, &t) in steps.iter().enumerate() {
        let ts = vec![t; b];
        let noisy_subject = forward_diffuse(&subject, t, &noise(req.seed, Stream::Subject, i as u64, &subject)?, sched)?;
        let x = GeminiInputs {
            z_t: &z,
            scene: &scene,
            mask: &mask,
            subject: &subject,
            noisy_subject: &noisy_subject,
            tokens: Some(&tokens),
            ts: &ts,
        };
        let opts = GeminiOptions { policy, draw: i as u64, condition: Conditioning::Full, trace };
        let out = guided_step(model, &x, &opts, req.guidance)?;
        traces.extend(out.trace);
        let t_prev = steps.get(i + 1).copied();
        let eps = clip_noise_estimate(&z, t, &detached(&out.eps)?, sched, PIXEL_BOUND)?;
        z = sampler_step(&z, t, t_prev, &eps, sched)?;
        let target = match t_prev {
            Some(tp) => forward_diffuse(&scene, tp, &noise(req.seed, Stream::Scene, i as u64, &scene)?, sched)?,
            None => scene.clone(),
        };
        z = blend(&mask, &target, &z)?;
    }
    let image = codec.decode(&z)?;
    Ok(Customization { image, trace: traces })
}

/// Inverts the scene with the sampler's forward-Euler inversion and samples
/// it back, both without blending: `(z_T, reconstruction)`. The subject is
/// noised with a fixed draw per timestep so both directions see the same
/// conditioning.
pub fn inversion_round_trip(
    req: &CustomizationRequest,
    model: &Model,
    sched: &DiffusionSchedule,
) -> Result<(LatentGrid, LatentGrid)> {
    req.validate()?;
    let dtype = model.dtype();
    let codec = model.cfg.codec();
    let scene = codec.encode(&req.scene.with_tensor(req.scene.tensor().to_dtype(dtype)?)?)?;
    let subject = codec.encode(&req.subject.with_tensor(req.subject.tensor().to_dtype(dtype)?)?)?;
    let mask = codec.encode_mask(&req.mask)?.for_channels(req.scene.dims().1)?.to_dtype(dtype)?;
    let masked_scene = scene.with_tensor((scene.tensor() * &mask.blend)?)?;
    let tokens = model.base.encode_semantic(&subject, &masked_scene)?;
    let policy = SparsePolicy::new(req.lambda_inf, req.seed)?;
    let b = scene.batch();
    let denoise = |z: &LatentGrid, t: usize| -> Result<LatentGrid> {
        let ts = vec![t; b];
        let noisy_subject = forward_diffuse(&subject, t, &noise(req.seed, Stream::Subject, t as u64, &subject)?, sched)?;
        let x = GeminiInputs {
            z_t: z,
            scene: &scene,
            mask: &mask,
            subject: &subject,
            noisy_subject: &noisy_subject,
            tokens: Some(&tokens),
            ts: &ts,
        };
        let opts = GeminiOptions { policy, draw: t as u64, condition: Conditioning::Full, trace: false };
        detached(&guided_step(model, &x, &opts, req.guidance)?.eps)
    };
    let z_t = sampler_invert(&scene, denoise, sched)?;
    let z0 = sample_loop(&z_t, denoise, sched)?;
    Ok((z_t, codec.decode(&z0)?))
}

pub fn customize_region(req: &CustomizationRequest, model: &Model, sched: &DiffusionSchedule) -> Result<LatentGrid> {
    Ok(customize(req, model, sched, false)?.image)
}

/// Regenerates the background around a preserved subject region: the same
/// loop with the mask complemented.
pub fn outpaint(req: &CustomizationRequest, model: &Model, sched: &DiffusionSchedule) -> Result<LatentGrid> {
    customize_region(&req.with_mask(req.mask.complement()?), model, sched)
}

/// One customization per inference threshold, all with the request's seed.
pub fn signature_sweep(
    req: &CustomizationRequest,
    model: &Model,
    sched: &DiffusionSchedule,
    lambdas: &[f64],
) -> Result<Vec<LatentGrid>> {
    if lambdas.is_empty() {
        return Err(Error::Empty("signature sweep needs at least one lambda".into()));
    }
    if lambdas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidRange("sweep lambdas must be sorted ascending".into()));
    }
    lambdas
        .iter()
        .map(|&lambda_inf| customize_region(&CustomizationRequest { lambda_inf, ..req.clone() }, model, sched))
        .collect()
}

/// Side-by-side strip of images along the width: `(1, C, H, N·W)`.
pub fn image_strip(images: &[LatentGrid]) -> Result<LatentGrid> {
    let first = images.first().ok_or_else(|| Error::Empty("no images for strip".into()))?;
    let parts: Vec<Tensor> = images.iter().map(|g| g.tensor().narrow(0, 0, 1)).collect::<candle_core::Result<_>>()?;
    first.with_tensor(Tensor::cat(&parts, 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::SystemKind;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::make_schedule;
    use candle_core::Device;

    fn tiny_model() -> Model {
        let mut cfg = DenoiserConfig::tiny();
        cfg.image_size = 8;
        cfg.image_channels = 3;
        cfg.codec_factor = 2;
        let m = Model::new(SystemKind::Symbiotic, &cfg, 1, DType::F32, &Device::Cpu).unwrap();
        m.base_params.perturb(2, 0.3).unwrap();
        m
    }

    fn request(mask_fn: impl Fn(usize, usize) -> f32) -> CustomizationRequest {
        let img = |seed| {
            let t = rng::normal_tensor(&mut rng::stream(seed, &[]), &[1, 3, 8, 8], DType::F32, &Device::Cpu).unwrap();
            LatentGrid::pixel(t.tanh().unwrap()).unwrap()
        };
        let m: Vec<f32> = (0..64).map(|i| mask_fn(i / 8, i % 8)).collect();
        let mask = RegionMask::new(Tensor::from_vec(m, (1, 1, 8, 8), &Device::Cpu).unwrap()).unwrap();
        CustomizationRequest::new(img(1), mask, img(2), 7)
    }

    fn centre(y: usize, x: usize) -> f32 {
        if (2..6).contains(&y) && (2..6).contains(&x) { 0.0 } else { 1.0 }
    }

    fn flat(g: &LatentGrid) -> Vec<f32> {
        g.tensor().flatten_all().unwrap().to_vec1().unwrap()
    }

    fn sched() -> DiffusionSchedule {
        make_schedule(1000, 1e-4, 0.02, 5).unwrap()
    }

    #[test]
    fn full_mask_returns_the_scene() {
        let req = request(|_, _| 1.0);
        let out = customize_region(&req, &tiny_model(), &sched()).unwrap();
        assert_eq!(flat(&out), flat(&req.scene));
    }

    #[test]
    fn background_is_exact_and_runs_repeat() {
        let model = tiny_model();
        let req = request(centre);
        let a = customize_region(&req, &model, &sched()).unwrap();
        let b = customize_region(&req, &model, &sched()).unwrap();
        assert_eq!(flat(&a), flat(&b));
        let (out, scene, mask) = (flat(&a), flat(&req.scene), flat(&LatentGrid::pixel(req.mask.tensor().clone()).unwrap()));
        let mut changed = false;
        for (i, (o, s)) in out.iter().zip(&scene).enumerate() {
            if mask[i % 64] == 1.0 {
                assert_eq!(o, s);
            } else {
                changed |= o != s;
            }
        }
        assert!(changed);
    }

    #[test]
    fn outpaint_is_customization_of_the_complement() {
        let model = tiny_model();
        let req = request(centre);
        let a = outpaint(&req, &model, &sched()).unwrap();
        let flipped = req.with_mask(req.mask.complement().unwrap());
        let b = customize_region(&flipped, &model, &sched()).unwrap();
        assert_eq!(flat(&a), flat(&b));
        // All-ones reversed: nothing is preserved.
        let full = request(|_, _| 1.0);
        let gen = outpaint(&full, &model, &sched()).unwrap();
        assert!(flat(&gen).iter().zip(flat(&full.scene)).all(|(a, b)| *a != b));
    }

    #[test]
    fn sweep_endpoints() {
        let model = tiny_model();
        let req = request(centre);
        assert!(signature_sweep(&req, &model, &sched(), &[]).is_err());
        assert!(signature_sweep(&req, &model, &sched(), &[0.5, 0.2]).is_err());
        let s = signature_sweep(&req, &model, &sched(), &[0.0, 1.0]).unwrap();
        let default = customize_region(&req, &model, &sched()).unwrap();
        assert_eq!(flat(&s[1]), flat(&default));
        let blocked = customize_region(&CustomizationRequest { lambda_inf: 0.0, ..req.clone() }, &model, &sched()).unwrap();
        assert_eq!(flat(&s[0]), flat(&blocked));
        assert_eq!(image_strip(&s).unwrap().dims(), (1, 3, 8, 16));
    }

    #[test]
    fn model_that_knows_the_clean_image_round_trips_through_inversion() {
        // With nothing to customize, an untrained model's clean estimate is
        // exactly the scene at every level, so inversion is exact.
        let cfg = tiny_model().cfg.clone();
        let m = Model::new(SystemKind::Symbiotic, &cfg, 1, DType::F64, &Device::Cpu).unwrap();
        let req = request(|_, _| 1.0);
        let req = CustomizationRequest {
            scene: req.scene.with_tensor(req.scene.tensor().to_dtype(DType::F64).unwrap()).unwrap(),
            subject: req.subject.with_tensor(req.subject.tensor().to_dtype(DType::F64).unwrap()).unwrap(),
            mask: RegionMask::new(req.mask.tensor().to_dtype(DType::F64).unwrap()).unwrap(),
            ..req
        };
        let (_, back) = inversion_round_trip(&req, &m, &sched()).unwrap();
        let a: Vec<f64> = req.scene.tensor().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = back.tensor().flatten_all().unwrap().to_vec1().unwrap();
        let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }
}
