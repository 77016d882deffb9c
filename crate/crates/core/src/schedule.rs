//! Noise schedule, forward diffusion, and the deterministic (η = 0) sampler
//! together with its forward-Euler inversion.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// Training schedule shared by every model: the denoiser is preconditioned
/// on it, so sampling schedules must use the same ramp.
pub const TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiffusionSchedule {
    pub num_train_steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub inference_steps: usize,
}

impl DiffusionSchedule {
    /// Linear β ramp between `beta_start` and `beta_end`.
    pub fn linear(
        num_train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        inference_steps: usize,
    ) -> Result<Self> {
        if num_train_steps == 0 {
            return Err(Error::InvalidRange("num_train_steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        if inference_steps == 0 || inference_steps > num_train_steps {
            return Err(Error::InvalidRange(format!(
                "inference_steps {inference_steps} must be in 1..={num_train_steps}"
            )));
        }
        let betas: Vec<f64> = if num_train_steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (num_train_steps - 1) as f64;
            (0..num_train_steps)
                .map(|i| beta_start + span * i as f64)
                .collect()
        };
        let alpha_bars = betas
            .iter()
            .scan(1.0f64, |prod, b| {
                *prod *= 1.0 - b;
                Some(*prod)
            })
            .collect();
        Ok(Self {
            num_train_steps,
            betas,
            alpha_bars,
            inference_steps,
        })
    }

    /// Same schedule with a different number of sampler steps.
    pub fn with_inference_steps(&self, inference_steps: usize) -> Result<Self> {
        if inference_steps == 0 || inference_steps > self.num_train_steps {
            return Err(Error::InvalidRange(format!(
                "inference_steps {inference_steps} must be in 1..={}",
                self.num_train_steps
            )));
        }
        Ok(Self {
            inference_steps,
            ..self.clone()
        })
    }

    /// Evenly strided inference timesteps, descending (`[950, 900, ..., 0]`
    /// for 1000/20).
    pub fn timesteps(&self) -> Vec<usize> {
        let stride = self.num_train_steps / self.inference_steps;
        (0..self.inference_steps).rev().map(|i| i * stride).collect()
    }

    /// ᾱ at a level; `None` is the clean end of the chain (ᾱ = 1).
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_train_steps {
            return Err(Error::InvalidRange(format!(
                "timestep {t} outside 0..{}",
                self.num_train_steps
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(
    num_train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    inference_steps: usize,
) -> Result<DiffusionSchedule> {
    DiffusionSchedule::linear(num_train_steps, beta_start, beta_end, inference_steps)
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps`, one shared timestep.
pub fn forward_diffuse(
    z0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    sched: &DiffusionSchedule,
) -> Result<LatentGrid> {
    sched.check_t(t)?;
    z0.ensure_same_shape(eps, "forward_diffuse noise")?;
    let ab = sched.alpha_bars[t];
    let z = (z0.tensor().affine(ab.sqrt(), 0.0)? + eps.tensor().affine((1.0 - ab).sqrt(), 0.0)?)?;
    z0.with_tensor(z)
}

/// Per-sample timesteps, one per batch item.
pub fn forward_diffuse_batch(
    z0: &LatentGrid,
    ts: &[usize],
    eps: &LatentGrid,
    sched: &DiffusionSchedule,
) -> Result<LatentGrid> {
    z0.ensure_same_shape(eps, "forward_diffuse noise")?;
    if ts.len() != z0.batch() {
        return Err(Error::ShapeMismatch(format!(
            "{} timesteps for batch of {}",
            ts.len(),
            z0.batch()
        )));
    }
    for &t in ts {
        sched.check_t(t)?;
    }
    let signal: Vec<f64> = ts.iter().map(|&t| sched.alpha_bars[t].sqrt()).collect();
    let noise: Vec<f64> = ts
        .iter()
        .map(|&t| (1.0 - sched.alpha_bars[t]).sqrt())
        .collect();
    let z = (per_sample(z0.tensor(), &signal)? + per_sample(eps.tensor(), &noise)?)?;
    z0.with_tensor(z)
}

fn per_sample(x: &Tensor, coef: &[f64]) -> Result<Tensor> {
    let c = Tensor::from_vec(coef.to_vec(), (coef.len(), 1, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_mul(&c)?)
}

/// Moves `z` between two noise levels given a noise estimate:
/// predicts `ẑ0 = (z − sqrt(1−ᾱ_from)·eps)/sqrt(ᾱ_from)` and re-noises it to
/// `to`. Works in either direction.
fn transfer(z: &Tensor, ab_from: f64, ab_to: f64, eps: &Tensor) -> Result<Tensor> {
    let x0 = (z - eps.affine((1.0 - ab_from).sqrt(), 0.0)?)?.affine(1.0 / ab_from.sqrt(), 0.0)?;
    if ab_to == 1.0 {
        return Ok(x0);
    }
    Ok((x0.affine(ab_to.sqrt(), 0.0)? + eps.affine((1.0 - ab_to).sqrt(), 0.0)?)?)
}

/// Deterministic sampler update from level `t` to `t_prev` (`None` returns
/// the clean estimate ẑ0).
pub fn sampler_step(
    z_t: &LatentGrid,
    t: usize,
    t_prev: Option<usize>,
    eps_pred: &LatentGrid,
    sched: &DiffusionSchedule,
) -> Result<LatentGrid> {
    sched.check_t(t)?;
    z_t.ensure_same_shape(eps_pred, "sampler_step noise estimate")?;
    if let Some(tp) = t_prev {
        sched.check_t(tp)?;
        if tp > t {
            return Err(Error::NonMonotoneTimestep {
                from: t,
                to: tp as i64,
            });
        }
        if tp == t {
            return Ok(z_t.clone());
        }
    }
    let z = transfer(
        z_t.tensor(),
        sched.alpha_bars[t],
        sched.alpha_bar(t_prev),
        eps_pred.tensor(),
    )?;
    z_t.with_tensor(z)
}

/// Noise estimate whose clean estimate ẑ0 is clamped to `[-bound, bound]`.
/// Fed to [`sampler_step`] it keeps the chain inside the data range, which
/// an under-trained model otherwise overshoots.
pub fn clip_noise_estimate(
    z_t: &LatentGrid,
    t: usize,
    eps_pred: &LatentGrid,
    sched: &DiffusionSchedule,
    bound: f64,
) -> Result<LatentGrid> {
    sched.check_t(t)?;
    z_t.ensure_same_shape(eps_pred, "clip_noise_estimate")?;
    let ab = sched.alpha_bars[t];
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0 = (z_t.tensor() - eps_pred.tensor().affine(s, 0.0)?)?.affine(1.0 / a, 0.0)?;
    let x0 = x0.clamp(-bound, bound)?;
    let eps = (z_t.tensor() - x0.affine(a, 0.0)?)?.affine(1.0 / s, 0.0)?;
    eps_pred.with_tensor(eps)
}

/// Runs the full sampler chain from `z_T` over the schedule's inference grid.
/// `denoise(z, t)` returns the noise estimate at level `t`.
pub fn sample_loop<F>(z_t: &LatentGrid, mut denoise: F, sched: &DiffusionSchedule) -> Result<LatentGrid>
where
    F: FnMut(&LatentGrid, usize) -> Result<LatentGrid>,
{
    let steps = sched.timesteps();
    let mut z = z_t.clone();
    for (i, &t) in steps.iter().enumerate() {
        let eps = denoise(&z, t)?;
        let t_prev = steps.get(i + 1).copied();
        z = sampler_step(&z, t, t_prev, &eps, sched)?;
    }
    Ok(z)
}

/// Forward-Euler inversion of [`sample_loop`]: walks the inference grid from
/// clean to the noisiest level, using the noise estimate at the current state
/// evaluated at the target level.
pub fn sampler_invert<F>(z0: &LatentGrid, mut denoise: F, sched: &DiffusionSchedule) -> Result<LatentGrid>
where
    F: FnMut(&LatentGrid, usize) -> Result<LatentGrid>,
{
    let mut ascending = sched.timesteps();
    ascending.reverse();
    let mut z = z0.clone();
    let mut from: Option<usize> = None;
    for &t in &ascending {
        let eps = denoise(&z, t)?;
        z.ensure_same_shape(&eps, "inversion noise estimate")?;
        let next = transfer(z.tensor(), sched.alpha_bar(from), sched.alpha_bars[t], eps.tensor())?;
        z = z.with_tensor(next)?;
        from = Some(t);
    }
    Ok(z)
}
