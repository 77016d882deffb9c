//! One denoising step in the two statuses of the network: signature
//! extraction on the subject, then content generation on the scene with the
//! (sparsely) delivered signatures. Also the guidance combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{control_forward, reference_forward, Model, SystemKind};
use crate::denoiser::{compose_input, compose_subject, ForwardOptions, Mode, SemanticTokens, SignatureCache};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, LatentMask};
use crate::instrument::AttentionTrace;
use crate::rng;

/// Per-site Bernoulli delivery: each site keeps its signature iff a uniform
/// draw `k` satisfies `k <= lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsePolicy {
    pub lambda: f64,
    pub rng_seed: u64,
}

impl SparsePolicy {
    pub fn new(lambda: f64, rng_seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidRange(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda, rng_seed })
    }

    /// Everything delivered.
    pub fn full() -> Self {
        Self { lambda: 1.0, rng_seed: 0 }
    }

    /// Keep decisions for `n_sites` sites at draw number `draw`. Each draw
    /// number has its own stream, so decisions never depend on call order.
    pub fn keeps(&self, draw: u64, n_sites: usize) -> Vec<bool> {
        if self.lambda >= 1.0 {
            return vec![true; n_sites];
        }
        if self.lambda <= 0.0 {
            return vec![false; n_sites];
        }
        let mut r = rng::stream(self.rng_seed, &[rng::tag("sparse"), draw]);
        (0..n_sites).map(|_| r.random::<f64>() <= self.lambda).collect()
    }
}

pub fn sparse_transform(cache: &SignatureCache, policy: &SparsePolicy, draw: u64) -> SignatureCache {
    let mut out = cache.clone();
    for (site, keep) in cache.sites().iter().zip(policy.keeps(draw, cache.sites().len())) {
        if !keep {
            out.remove(site);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub condition_drop_prob: f64,
}

impl GuidanceConfig {
    pub fn new(scale: f64, condition_drop_prob: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::InvalidRange(format!("guidance scale {scale} must be >= 0")));
        }
        if !(0.0..=1.0).contains(&condition_drop_prob) {
            return Err(Error::InvalidRange(format!("condition_drop_prob {condition_drop_prob} outside [0, 1]")));
        }
        Ok(Self { scale, condition_drop_prob })
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 1.0, condition_drop_prob: 0.1 }
    }
}

/// `eps_uncond + w·(eps_cond − eps_uncond)`.
pub fn cfg_combine(eps_uncond: &LatentGrid, eps_cond: &LatentGrid, w: f64) -> Result<LatentGrid> {
    eps_uncond.ensure_same_shape(eps_cond, "cfg_combine")?;
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    let u = eps_uncond.tensor();
    let delta = (eps_cond.tensor() - u)?;
    eps_uncond.with_tensor((u + (delta * w)?)?)
}

/// Inputs of one step. `noisy_subject` is the subject forward-diffused to
/// the same timesteps as `z_t`.
#[derive(Debug, Clone, Copy)]
pub struct GeminiInputs<'a> {
    pub z_t: &'a LatentGrid,
    pub scene: &'a LatentGrid,
    pub mask: &'a LatentMask,
    pub subject: &'a LatentGrid,
    pub noisy_subject: &'a LatentGrid,
    pub tokens: Option<&'a SemanticTokens>,
    pub ts: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Full,
    /// Tokens and signatures both nulled.
    Null,
}

#[derive(Debug, Clone, Copy)]
pub struct GeminiOptions {
    pub policy: SparsePolicy,
    pub draw: u64,
    pub condition: Conditioning,
    pub trace: bool,
}

impl GeminiOptions {
    pub fn full() -> Self {
        Self { policy: SparsePolicy::full(), draw: 0, condition: Conditioning::Full, trace: false }
    }
}

#[derive(Debug, Clone)]
pub struct GeminiOutput {
    pub eps: LatentGrid,
    pub trace: AttentionTrace,
    /// Sites that received a signature.
    pub delivered: usize,
}

pub fn gemini_step(model: &Model, x: &GeminiInputs<'_>, opts: &GeminiOptions) -> Result<GeminiOutput> {
    let gen = compose_input(x.z_t, x.scene, x.mask)?;
    let fwd = ForwardOptions { control: None, trace: opts.trace, region: Some(&x.mask.channel) };
    let net = &model.base;
    if opts.condition == Conditioning::Null {
        let out = net.forward(&gen, x.ts, None, Mode::Unconditional, fwd)?;
        return Ok(GeminiOutput { eps: out.eps, trace: out.trace, delivered: 0 });
    }
    let out = match model.kind {
        SystemKind::Blocked => net.forward(&gen, x.ts, x.tokens, Mode::Blocked, fwd)?,
        SystemKind::ControlNet => {
            let sub = compose_subject(x.noisy_subject, x.subject)?;
            let residuals = control_forward(model, &sub, x.ts, x.tokens)?;
            let fwd = ForwardOptions { control: Some(&residuals), ..fwd };
            net.forward(&gen, x.ts, x.tokens, Mode::Blocked, fwd)?
        }
        SystemKind::Symbiotic | SystemKind::ReferenceNet => {
            let keeps = opts.policy.keeps(opts.draw, net.delivery_sites().len());
            let cache = if keeps.iter().any(|&k| k) {
                let sub = compose_subject(x.noisy_subject, x.subject)?;
                let full = if model.kind == SystemKind::Symbiotic {
                    net.forward(&sub, x.ts, x.tokens, Mode::Extract, ForwardOptions::default())?
                        .cache
                        .expect("extract mode returns a cache")
                } else {
                    reference_forward(model, &sub, x.ts, x.tokens)?
                };
                sparse_transform(&full, &opts.policy, opts.draw)
            } else {
                // Nothing survives the transform, so the extraction pass
                // would be wasted work.
                SignatureCache::new(net.delivery_sites().to_vec(), x.ts.to_vec())
            };
            let out = net.forward(&gen, x.ts, x.tokens, Mode::Generate(&cache), fwd)?;
            return Ok(GeminiOutput { eps: out.eps, trace: out.trace, delivered: cache.num_delivered() });
        }
    };
    Ok(GeminiOutput { eps: out.eps, trace: out.trace, delivered: 0 })
}

/// Conditional step combined with the fully nulled branch at guidance `w`.
/// At `w = 1` the unconditional branch is skipped.
pub fn guided_step(model: &Model, x: &GeminiInputs<'_>, opts: &GeminiOptions, w: f64) -> Result<GeminiOutput> {
    let cond = gemini_step(model, x, opts)?;
    if w == 1.0 {
        return Ok(cond);
    }
    let uncond = gemini_step(model, x, &GeminiOptions { condition: Conditioning::Null, trace: false, ..*opts })?;
    Ok(GeminiOutput { eps: cfg_combine(&uncond.eps, &cond.eps, w)?, ..cond })
}
