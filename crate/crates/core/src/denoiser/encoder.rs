//! Hierarchical semantic encoder.
//!
//! A small convolutional pyramid reads the clean subject latent and emits one
//! group of spatial tokens per injection point, shallow features first. The
//! same pyramid pooled globally over the masked scene yields one background
//! token that is appended to every group.

use candle_core::{Tensor, D};

use super::config::DenoiserConfig;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::nn::layers::downsample2;
use crate::nn::{Conv3x3, Linear, Scope};

#[derive(Debug, Clone)]
pub struct SemanticTokens {
    /// `(batch, subject_tokens + 1, embed_dim)` per group; the last row is the
    /// background token.
    pub groups: Vec<Tensor>,
    pub subject_tokens: usize,
}

impl SemanticTokens {
    pub fn batch(&self) -> usize {
        self.groups.first().map_or(0, |g| g.dims()[0])
    }
}

#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    stem: Conv3x3,
    stages: Vec<Conv3x3>,
    token_proj: Vec<Linear>,
    background_proj: Vec<Linear>,
    grid: usize,
}

impl SemanticEncoder {
    pub fn new(vb: &Scope<'_>, cfg: &DenoiserConfig) -> Result<Self> {
        let ec = cfg.encoder_channels;
        let n = cfg.num_token_groups();
        let stages = (0..n)
            .map(|g| Conv3x3::new(&vb.pp(format!("stage{g}")), ec, ec, false))
            .collect::<Result<Vec<_>>>()?;
        let token_proj = (0..n)
            .map(|g| Linear::new(&vb.pp(format!("tokens{g}")), ec, cfg.embed_dim, true, false))
            .collect::<Result<Vec<_>>>()?;
        let background_proj = (0..n)
            .map(|g| Linear::new(&vb.pp(format!("background{g}")), ec, cfg.embed_dim, true, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem: Conv3x3::new(&vb.pp("stem"), cfg.latent_channels(), ec, false)?,
            stages,
            token_proj,
            background_proj,
            grid: cfg.token_grid,
        })
    }

    /// Feature maps after every stage, halving resolution until it reaches
    /// the token grid.
    pub fn pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.stem.forward(x)?.silu()?;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            h = (stage.forward(&h)?.silu()? + &h)?;
            out.push(h.clone());
            let size = h.dim(2)?;
            if size > self.grid && (size / 2) % self.grid == 0 {
                h = downsample2(&h)?;
            }
        }
        Ok(out)
    }

    fn pool_grid(&self, f: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = f.dims4()?;
        let g = self.grid;
        Ok(f.reshape((b, c, g, h / g, g, w / g))?
            .mean(5)?
            .mean(3)?
            .reshape((b, c, g * g))?
            .transpose(1, 2)?)
    }

    pub fn encode(&self, subject: &LatentGrid, scene_background: &LatentGrid) -> Result<SemanticTokens> {
        if subject.dims() != scene_background.dims() {
            return Err(Error::ShapeMismatch(format!(
                "subject {:?} vs background {:?}",
                subject.dims(),
                scene_background.dims()
            )));
        }
        let subj = self.pyramid(subject.tensor())?;
        let bg = self.pyramid(scene_background.tensor())?;
        let mut groups = Vec::with_capacity(subj.len());
        for (g, (fs, fb)) in subj.iter().zip(&bg).enumerate() {
            let tokens = self.token_proj[g].forward(&self.pool_grid(fs)?)?;
            let pooled = fb.flatten_from(2)?.mean(D::Minus1)?.unsqueeze(1)?;
            let background = self.background_proj[g].forward(&pooled)?;
            groups.push(Tensor::cat(&[&tokens, &background], 1)?);
        }
        Ok(SemanticTokens {
            groups,
            subject_tokens: self.grid * self.grid,
        })
    }

    /// Globally pooled features of every stage, concatenated: `(batch, F)`.
    pub fn global_features(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self
            .pyramid(x)?
            .iter()
            .map(|f| f.flatten_from(2)?.mean(D::Minus1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&feats, 1)?)
    }
}
