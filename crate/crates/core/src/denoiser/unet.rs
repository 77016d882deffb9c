//! The U-shaped denoising network.

use candle_core::Tensor;

use super::cache::SignatureCache;
use super::compose::ComposedInput;
use super::config::{DenoiserConfig, SiteId, Stage};
use super::encoder::{SemanticEncoder, SemanticTokens};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::instrument::{AttentionTrace, SiteRecord};
use crate::nn::layers::{downsample2, gcd_groups, upsample2};
use crate::nn::{Conv3x3, CrossAttention, GroupNorm, Linear, ResBlock, Scope, SelfAttention, TimeEmbedding};
use crate::schedule::{DiffusionSchedule, BETA_END, BETA_START, TRAIN_STEPS};

/// Status of one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Signature extraction: plain self-attention, hidden states cached at
    /// every delivery site.
    Extract,
    /// Content generation with mutual attention over the cached signatures.
    Generate(&'a SignatureCache),
    /// Generation with nothing delivered.
    Blocked,
    /// Generation with neither semantic tokens nor signatures.
    Unconditional,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Residuals added to the skip connection of each scale (indexed by
    /// scale), as produced by a control assistant.
    pub control: Option<&'a [Tensor]>,
    /// Record attention statistics at the delivery sites.
    pub trace: bool,
    /// Latent mask channel `(b, 1, h, w)` (0 = customized region) used to
    /// split traced queries into region and background.
    pub region: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: LatentGrid,
    pub cache: Option<SignatureCache>,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone)]
struct Block {
    res: ResBlock,
    attn: SelfAttention,
    cross: CrossAttention,
    site: SiteId,
    group: usize,
}

impl Block {
    fn new(vb: &Scope<'_>, cfg: &DenoiserConfig, in_ch: usize, site: SiteId) -> Result<Self> {
        let ch = cfg.channels(site.scale);
        Ok(Self {
            res: ResBlock::new(&vb.pp("res"), in_ch, ch, cfg.time_dim(), cfg.groups)?,
            attn: SelfAttention::new(&vb.pp("attn"), ch, cfg.heads, cfg.groups)?,
            cross: CrossAttention::new(&vb.pp("cross"), ch, cfg.embed_dim, cfg.heads, cfg.groups)?,
            site,
            group: cfg.token_group_for(site.stage, site.scale),
        })
    }
}

/// Per-pass state threaded through every self-attention site.
struct Pass<'a> {
    mode: Mode<'a>,
    delivery: &'a [SiteId],
    tokens: Option<&'a SemanticTokens>,
    ts: &'a [usize],
    opts: ForwardOptions<'a>,
    cache: Option<SignatureCache>,
    trace: AttentionTrace,
}

impl Pass<'_> {
    fn run_block(&mut self, block: &Block, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = block.res.forward(x, temb)?;
        let h = self.run_attention(&block.attn, block.site, &h)?;
        match self.tokens {
            Some(tokens) => block.cross.forward(&h, &tokens.groups[block.group]),
            None => Ok(h),
        }
    }

    fn run_attention(&mut self, attn: &SelfAttention, site: SiteId, h: &Tensor) -> Result<Tensor> {
        let is_delivery = self.delivery.contains(&site);
        let cached = match (self.mode, is_delivery) {
            (Mode::Generate(cache), true) => cache.get(&site),
            _ => None,
        };
        let out = attn.forward(h, cached)?;
        if is_delivery {
            if let (Mode::Extract, Some(cache)) = (self.mode, self.cache.as_mut()) {
                cache.insert(site, out.hidden.clone())?;
            }
            if self.opts.trace && !matches!(self.mode, Mode::Extract) {
                let (b, _, hh, ww) = h.dims4()?;
                let region = region_flags(self.opts.region, b, hh, ww)?;
                let m = cached.map_or(0, |c| c.dims()[1]);
                let mut rec =
                    SiteRecord::from_weights(site, 0, &out.weights, m, &region, &out.hidden, cached)?;
                rec.t = self.ts.first().copied().unwrap_or(0);
                self.trace.records.push(rec);
            }
        }
        Ok(out.out)
    }
}

/// Region flags per query at a site resolution: a query is in the region
/// when most of its footprint in the mask channel is 0.
fn region_flags(mask: Option<&Tensor>, b: usize, h: usize, w: usize) -> Result<Vec<Vec<bool>>> {
    let Some(mask) = mask else {
        return Ok(vec![vec![false; h * w]; b]);
    };
    let mut m = mask.detach().to_dtype(candle_core::DType::F64)?;
    while m.dim(2)? > h {
        m = downsample2(&m)?;
    }
    let v = m.flatten_from(1)?.to_vec2::<f64>()?;
    Ok(v.into_iter()
        .map(|row| row.into_iter().map(|x| x < 0.5).collect())
        .collect())
}

/// Stem, encoder blocks, and downsamplers. Shared in layout by the denoiser
/// and the control assistant, so parameter names line up between the two.
#[derive(Debug, Clone)]
pub struct EncoderPath {
    time: TimeEmbedding,
    conv_in: Conv3x3,
    blocks: Vec<Block>,
    down: Vec<Conv3x3>,
}

impl EncoderPath {
    pub fn new(vb: &Scope<'_>, cfg: &DenoiserConfig) -> Result<Self> {
        let s = cfg.num_scales();
        let blocks = (0..s)
            .map(|scale| {
                let site = SiteId { stage: Stage::Encoder, ordinal: scale, scale };
                Block::new(&vb.pp(format!("enc{scale}")), cfg, cfg.channels(scale), site)
            })
            .collect::<Result<Vec<_>>>()?;
        let down = (0..s - 1)
            .map(|scale| Conv3x3::new(&vb.pp(format!("down{scale}")), cfg.channels(scale), cfg.channels(scale + 1), false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            time: TimeEmbedding::new(&vb.pp("time"), cfg.time_freq_dim, cfg.time_dim())?,
            conv_in: Conv3x3::new(&vb.pp("conv_in"), 2 * cfg.latent_channels() + 1, cfg.base_channels, false)?,
            blocks,
            down,
        })
    }

    /// Returns the skip features per scale and the bottleneck input.
    fn run(&self, pass: &mut Pass<'_>, x: &Tensor, temb: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.blocks.len());
        for (scale, block) in self.blocks.iter().enumerate() {
            h = pass.run_block(block, &h, temb)?;
            skips.push(h.clone());
            if let Some(down) = self.down.get(scale) {
                h = down.forward(&downsample2(&h)?)?;
            }
        }
        Ok((skips, h))
    }

    /// Skip features of every scale for a plain (blocked) pass.
    pub fn features(&self, x: &ComposedInput, ts: &[usize], tokens: Option<&SemanticTokens>) -> Result<Vec<Tensor>> {
        let input = x.to_tensor()?;
        let temb = self.time.forward(ts, &input)?;
        let mut pass = Pass {
            mode: Mode::Blocked,
            delivery: &[],
            tokens,
            ts,
            opts: ForwardOptions::default(),
            cache: None,
            trace: AttentionTrace::default(),
        };
        Ok(self.run(&mut pass, &input, &temb)?.0)
    }
}

/// The denoising network ε_θ with its semantic encoder.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    delivery: Vec<SiteId>,
    semantic: SemanticEncoder,
    encoder: EncoderPath,
    mid_res1: ResBlock,
    mid_attn: SelfAttention,
    mid_site: SiteId,
    mid_res2: ResBlock,
    /// Decoder blocks grouped by scale, deepest scale first.
    decoder: Vec<Vec<Block>>,
    up: Vec<Conv3x3>,
    norm_out: GroupNorm,
    conv_out: Conv3x3,
    /// `(sqrt(abar_t), sqrt(1 - abar_t))` of the training schedule.
    levels: Vec<(f64, f64)>,
    /// Channel mixing of the scene residual straight into the velocity, with
    /// a per-channel gain from the time embedding. The latent is wider than
    /// the base width, so the body alone cannot carry the noise through.
    residual_mix: Linear,
    residual_gain: Linear,
}

impl Denoiser {
    pub fn new(vb: &Scope<'_>, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.num_scales();
        let deep = cfg.channels(s - 1);
        let sites = cfg.self_attn_sites();
        let mut decoder = Vec::with_capacity(s);
        let mut dec_sites = sites.iter().filter(|x| x.stage == Stage::Decoder);
        for scale in (0..s).rev() {
            let ch = cfg.channels(scale);
            let mut blocks = Vec::new();
            for j in 0..cfg.decoder_layers[scale] {
                let site = *dec_sites.next().expect("decoder sites follow decoder_layers");
                let in_ch = if j == 0 { 2 * ch } else { ch };
                blocks.push(Block::new(&vb.pp(format!("dec{}", site.ordinal)), cfg, in_ch, site)?);
            }
            decoder.push(blocks);
        }
        let up = (1..s)
            .rev()
            .map(|scale| Conv3x3::new(&vb.pp(format!("up{scale}")), cfg.channels(scale), cfg.channels(scale - 1), false))
            .collect::<Result<Vec<_>>>()?;
        let base = cfg.base_channels;
        Ok(Self {
            delivery: cfg.delivery_sites(),
            semantic: SemanticEncoder::new(&vb.pp("semantic"), cfg)?,
            encoder: EncoderPath::new(vb, cfg)?,
            mid_res1: ResBlock::new(&vb.pp("mid.res1"), deep, deep, cfg.time_dim(), cfg.groups)?,
            mid_attn: SelfAttention::new(&vb.pp("mid.attn"), deep, cfg.heads, cfg.groups)?,
            mid_site: SiteId { stage: Stage::Middle, ordinal: 0, scale: s - 1 },
            mid_res2: ResBlock::new(&vb.pp("mid.res2"), deep, deep, cfg.time_dim(), cfg.groups)?,
            decoder,
            up,
            norm_out: GroupNorm::new(&vb.pp("norm_out"), base, gcd_groups(base, cfg.groups))?,
            conv_out: Conv3x3::new(&vb.pp("conv_out"), base, cfg.latent_channels(), true)?,
            levels: DiffusionSchedule::linear(TRAIN_STEPS, BETA_START, BETA_END, 1)?
                .alpha_bars
                .iter()
                .map(|ab| (ab.sqrt(), (1.0 - ab).sqrt()))
                .collect(),
            residual_mix: Linear::new(&vb.pp("residual_mix"), cfg.latent_channels(), cfg.latent_channels(), false, true)?,
            residual_gain: Linear::new(&vb.pp("residual_gain"), cfg.time_dim(), cfg.latent_channels(), true, true)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn delivery_sites(&self) -> &[SiteId] {
        &self.delivery
    }

    pub fn semantic(&self) -> &SemanticEncoder {
        &self.semantic
    }

    pub fn encoder_path(&self) -> &EncoderPath {
        &self.encoder
    }

    pub fn encode_semantic(&self, subject: &LatentGrid, scene_background: &LatentGrid) -> Result<SemanticTokens> {
        self.semantic.encode(subject, scene_background)
    }

    /// Per-sample `sqrt(abar_t)` and `sqrt(1 - abar_t)` as `(b, 1, 1, 1)`.
    fn level_tensors(&self, ts: &[usize], like: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut a = Vec::with_capacity(ts.len());
        let mut s = Vec::with_capacity(ts.len());
        for &t in ts {
            let (at, st) = *self
                .levels
                .get(t)
                .ok_or_else(|| Error::InvalidRange(format!("timestep {t} outside 0..{}", self.levels.len())))?;
            a.push(at);
            s.push(st);
        }
        let shape = (ts.len(), 1, 1, 1);
        Ok((
            Tensor::from_vec(a, shape, like.device())?.to_dtype(like.dtype())?,
            Tensor::from_vec(s, shape, like.device())?.to_dtype(like.dtype())?,
        ))
    }

    pub fn forward(
        &self,
        x: &ComposedInput,
        ts: &[usize],
        tokens: Option<&SemanticTokens>,
        mode: Mode<'_>,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let b = x.batch();
        if ts.len() != b {
            return Err(Error::ShapeMismatch(format!("{} timesteps for batch {b}", ts.len())));
        }
        let (_, c, h, w) = x.noisy.dims();
        let (lc, ls) = (self.cfg.latent_channels(), self.cfg.latent_size());
        if c != lc || h != ls || w != ls {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?}, model expects (_, {lc}, {ls}, {ls})",
                x.noisy.dims()
            )));
        }
        if let Some(t) = tokens {
            if t.batch() != b || t.groups.len() != self.cfg.num_token_groups() {
                return Err(Error::ShapeMismatch(format!(
                    "{} token groups of batch {}, expected {} of batch {b}",
                    t.groups.len(),
                    t.batch(),
                    self.cfg.num_token_groups()
                )));
            }
        }
        if let Mode::Generate(cache) = mode {
            cache.check(&self.delivery, ts)?;
        }
        if let Some(control) = opts.control {
            if control.len() != self.cfg.num_scales() {
                return Err(Error::ShapeMismatch(format!(
                    "{} control residuals for {} scales",
                    control.len(),
                    self.cfg.num_scales()
                )));
            }
        }
        let tokens = match mode {
            Mode::Unconditional => None,
            _ => tokens,
        };
        let mut pass = Pass {
            mode,
            delivery: &self.delivery,
            tokens,
            ts,
            opts,
            cache: matches!(mode, Mode::Extract).then(|| SignatureCache::new(self.delivery.clone(), ts.to_vec())),
            trace: AttentionTrace::default(),
        };

        let input = x.to_tensor()?;
        let temb = self.encoder.time.forward(ts, &input)?;
        let (mut skips, h) = self.encoder.run(&mut pass, &input, &temb)?;
        if let Some(control) = opts.control {
            for (skip, r) in skips.iter_mut().zip(control) {
                *skip = (&*skip + r)?;
            }
        }

        let h = self.mid_res1.forward(&h, &temb)?;
        let h = pass.run_attention(&self.mid_attn, self.mid_site, &h)?;
        let mut h = self.mid_res2.forward(&h, &temb)?;

        for (i, blocks) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per scale");
            for (j, block) in blocks.iter().enumerate() {
                let inp = if j == 0 { Tensor::cat(&[&h, &skip], 1)? } else { h };
                h = pass.run_block(block, &inp, &temb)?;
            }
            if let Some(up) = self.up.get(i) {
                h = up.forward(&upsample2(&h)?)?;
            }
        }

        // Relative to the visible scene, `y = z_t - a·masked_scene` is pure
        // noise `s·eps` on background blocks, so the estimate there is exact
        // and the network only answers for the region. There the body output
        // `v` is a velocity: `eps = s·y + a·v`, which stays well-conditioned
        // at every level, unlike dividing by `s`.
        let (a, s) = self.level_tensors(ts, x.noisy.tensor())?;
        let y = (x.noisy.tensor() - x.masked_scene.tensor().broadcast_mul(&a)?)?;
        let c = y.dim(1)?;
        let mixed = self.residual_mix.forward(&y.permute((0, 2, 3, 1))?.contiguous()?)?.permute((0, 3, 1, 2))?;
        let gain = (self.residual_gain.forward(&temb)? + 1.0)?.reshape((b, c, 1, 1))?;
        let v = (self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)? + mixed.broadcast_mul(&gain)?)?;
        let background = y.broadcast_div(&s)?.broadcast_mul(&x.mask)?;
        let region = (y.broadcast_mul(&s)? + v.broadcast_mul(&a)?)?.broadcast_mul(&(1.0 - &x.mask)?)?;
        let eps = (background + region)?;
        Ok(ForwardOutput {
            eps: x.noisy.with_tensor(eps)?,
            cache: pass.cache,
            trace: pass.trace,
        })
    }
}
