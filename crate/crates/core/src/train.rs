//! Training on the symbiotic objective with sparse recycling: every step
//! runs the extraction and generation statuses at a shared timestep and
//! regresses the generation-status noise prediction only.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{Model, SystemKind};
use crate::codec::Codec;
use crate::data::{weighted_sampler, Batch, Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, LatentMask};
use crate::recycling::{gemini_step, Conditioning, GeminiInputs, GeminiOptions, SparsePolicy};
use crate::rng;
use crate::schedule::{forward_diffuse_batch, DiffusionSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Sparse recycling threshold Λ.
    pub lambda: f64,
    /// Guidance scale recorded for inference; training never combines.
    pub guidance: f64,
    pub condition_drop_prob: f64,
    pub system: SystemKind,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            lambda: 0.6,
            guidance: 1.0,
            condition_drop_prob: 0.1,
            system: SystemKind::Symbiotic,
            checkpoint_every: 0,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidRange("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidRange(format!("learning rate {}", self.learning_rate)));
        }
        SparsePolicy::new(self.lambda, self.seed)?;
        crate::recycling::GuidanceConfig::new(self.guidance, self.condition_drop_prob)?;
        Ok(())
    }

    pub fn policy(&self) -> SparsePolicy {
        SparsePolicy { lambda: self.lambda, rng_seed: self.seed }
    }
}

/// Everything one loss evaluation needs, already in latent space.
#[derive(Debug, Clone)]
pub struct PreparedStep {
    pub scene: LatentGrid,
    pub mask: LatentMask,
    pub subject: LatentGrid,
    pub ts: Vec<usize>,
    pub eps: LatentGrid,
    pub z_t: LatentGrid,
    pub noisy_subject: LatentGrid,
    pub condition: Conditioning,
}

fn noise_like(g: &LatentGrid, seed: u64, name: &str, step: u64) -> Result<LatentGrid> {
    let (b, c, h, w) = g.dims();
    let mut r = rng::stream(seed, &[rng::tag(name), step]);
    g.with_tensor(rng::normal_tensor(&mut r, &[b, c, h, w], g.dtype(), g.tensor().device())?)
}

impl PreparedStep {
    /// Draws timesteps, noise, and the condition drop for `step`. Every draw
    /// has its own stream, so systems that ignore some of them still see the
    /// same values for the rest.
    pub fn new(
        scene: LatentGrid,
        mask: LatentMask,
        subject: LatentGrid,
        sched: &DiffusionSchedule,
        cfg: &TrainConfig,
        step: u64,
    ) -> Result<Self> {
        let b = scene.batch();
        let mut tr = rng::stream(cfg.seed, &[rng::tag("timesteps"), step]);
        let ts: Vec<usize> = (0..b).map(|_| tr.random_range(0..sched.num_train_steps)).collect();
        let eps = noise_like(&scene, cfg.seed, "noise", step)?;
        let sub_eps = noise_like(&subject, cfg.seed, "subject-noise", step)?;
        let z_t = forward_diffuse_batch(&scene, &ts, &eps, sched)?;
        let noisy_subject = forward_diffuse_batch(&subject, &ts, &sub_eps, sched)?;
        let drop: f64 = rng::stream(cfg.seed, &[rng::tag("drop"), step]).random();
        let condition = if drop < cfg.condition_drop_prob { Conditioning::Null } else { Conditioning::Full };
        Ok(Self { scene, mask, subject, ts, eps, z_t, noisy_subject, condition })
    }

    pub fn from_batch(batch: &Batch, model: &Model, sched: &DiffusionSchedule, cfg: &TrainConfig, step: u64) -> Result<Self> {
        let codec = model.cfg.codec();
        let dtype = model.dtype();
        let scene = codec.encode(&cast(&batch.scene, dtype)?)?;
        let subject = codec.encode(&cast(&batch.subject, dtype)?)?;
        let mask = codec.encode_mask(&batch.mask)?.for_channels(batch.scene.dims().1)?.to_dtype(dtype)?;
        Self::new(scene, mask, subject, sched, cfg, step)
    }
}

fn cast(g: &LatentGrid, dtype: DType) -> Result<LatentGrid> {
    g.with_tensor(g.tensor().to_dtype(dtype)?)
}

/// Mean squared error of the generation-status prediction.
pub fn step_loss(model: &Model, p: &PreparedStep, cfg: &TrainConfig, step: u64) -> Result<Tensor> {
    let masked = p.scene.with_tensor((p.scene.tensor() * &p.mask.blend)?)?;
    let tokens = model.base.encode_semantic(&p.subject, &masked)?;
    let x = GeminiInputs {
        z_t: &p.z_t,
        scene: &p.scene,
        mask: &p.mask,
        subject: &p.subject,
        noisy_subject: &p.noisy_subject,
        tokens: Some(&tokens),
        ts: &p.ts,
    };
    let opts = GeminiOptions { policy: cfg.policy(), draw: step, condition: p.condition, trace: false };
    let out = gemini_step(model, &x, &opts)?;
    Ok((out.eps.tensor() - p.eps.tensor())?.sqr()?.mean_all()?)
}

pub fn new_optimizer(model: &Model, cfg: &TrainConfig) -> Result<AdamW> {
    let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() };
    Ok(AdamW::new(model.vars(), params)?)
}

/// One optimizer update; returns the loss before the update.
pub fn train_step(p: &PreparedStep, model: &Model, opt: &mut AdamW, cfg: &TrainConfig, step: u64) -> Result<f64> {
    let loss = step_loss(model, p, cfg, step)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: step as usize, dump: diagnostic_dump(model, p, value) });
    }
    opt.backward_step(&loss)?;
    Ok(value)
}

fn diagnostic_dump(model: &Model, p: &PreparedStep, loss: f64) -> String {
    let mut bad: Vec<String> = model
        .named_vars()
        .iter()
        .filter_map(|(k, v)| {
            let finite = v
                .as_tensor()
                .to_dtype(DType::F64)
                .and_then(|t| t.sum_all())
                .and_then(|t| t.to_scalar::<f64>())
                .map(f64::is_finite)
                .unwrap_or(false);
            (!finite).then(|| k.clone())
        })
        .collect();
    bad.truncate(20);
    format!(
        "loss={loss} system={} timesteps={:?} condition={:?} non_finite_params={bad:?}",
        model.kind, p.ts, p.condition
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl TrainReport {
    /// Mean of `losses[from..to]`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let s = &self.losses[from.min(self.losses.len())..to.min(self.losses.len())];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Runs `cfg.steps` updates, drawing batches with the category-weighted
/// sampler. `on_step(step, loss)` may stop early by returning `false`;
/// `on_checkpoint(step)` runs at the configured cadence.
pub fn train(
    model: &Model,
    data: &Dataset,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64) -> bool,
    mut on_checkpoint: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let spec = &data.manifest.spec;
    let weights: Vec<_> = spec.categories.iter().copied().zip(spec.category_weights.iter().copied()).collect();
    let present = data.categories();
    let weights: Vec<_> = weights.into_iter().filter(|(c, _)| present.contains(c)).collect();
    let mut sampler = weighted_sampler(&present, &weights, cfg.seed)?;
    let mut opt = new_optimizer(model, cfg)?;
    let started = std::time::Instant::now();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let pairs: Vec<&SamplePair> = (&mut sampler).take(cfg.batch_size).map(|i| &data.pairs[i]).collect();
        let augment = cfg.augment.then(|| rng::derive_seed(cfg.seed, &[rng::tag("augment"), step as u64]));
        let batch = Batch::from_pairs(&pairs, augment, model.dtype(), model.device())?;
        let prepared = PreparedStep::from_batch(&batch, model, sched, cfg, step as u64)?;
        let loss = train_step(&prepared, model, &mut opt, cfg, step as u64)?;
        report.losses.push(loss);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
        if !on_step(step, loss) {
            break;
        }
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// A fresh model for `cfg.system` with the configured seed.
pub fn init_model(cfg: &TrainConfig, denoiser: &crate::denoiser::DenoiserConfig, dtype: DType, device: &Device) -> Result<Model> {
    Model::new(cfg.system, denoiser, cfg.seed, dtype, device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::make_schedule;

    fn small() -> (DenoiserConfig, Dataset, DiffusionSchedule) {
        let mut cfg = DenoiserConfig::desk();
        cfg.base_channels = 8;
        cfg.groups = 4;
        cfg.encoder_channels = 8;
        cfg.embed_dim = 8;
        let spec = SynthSpec::desk(1);
        let data = Dataset::generate(&spec, 0..8, "train").unwrap();
        (cfg, data, make_schedule(1000, 1e-4, 0.02, 20).unwrap())
    }

    fn run(system: SystemKind, lambda: f64, steps: usize) -> Vec<f64> {
        let (dcfg, data, sched) = small();
        let cfg = TrainConfig { steps, batch_size: 2, system, lambda, seed: 3, ..Default::default() };
        let model = init_model(&cfg, &dcfg, DType::F32, &Device::Cpu).unwrap();
        train(&model, &data, &sched, &cfg, |_, _| true, |_, _| Ok(())).unwrap().losses
    }

    #[test]
    fn loss_sequences_repeat() {
        assert_eq!(run(SystemKind::Symbiotic, 0.6, 3), run(SystemKind::Symbiotic, 0.6, 3));
    }

    #[test]
    fn lambda_zero_trains_like_the_blocked_system() {
        assert_eq!(run(SystemKind::Symbiotic, 0.0, 3), run(SystemKind::Blocked, 0.6, 3));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = TrainConfig { lambda: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
