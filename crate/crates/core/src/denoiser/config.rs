use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, SpaceToDepth};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Encoder,
    Middle,
    Decoder,
}

/// A self-attention site. Encoder sites are named `enc<scale>`, the middle
/// block `mid`, decoder sites `up<k>` in execution order starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub stage: Stage,
    pub ordinal: usize,
    pub scale: usize,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Stage::Encoder => write!(f, "enc{}", self.ordinal),
            Stage::Middle => write!(f, "mid"),
            Stage::Decoder => write!(f, "up{}", self.ordinal),
        }
    }
}

/// Which self-attention sites receive recycled signatures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Delivery {
    Encoder,
    /// Middle block plus every decoder site.
    Decoder,
    Both,
}

impl std::str::FromStr for Delivery {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Delivery::Encoder),
            "decoder" => Ok(Delivery::Decoder),
            "both" => Ok(Delivery::Both),
            other => Err(Error::Config(format!("unknown delivery position `{other}`"))),
        }
    }
}

impl fmt::Display for Delivery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Delivery::Encoder => "encoder",
            Delivery::Decoder => "decoder",
            Delivery::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub image_channels: usize,
    /// Space-to-depth factor of the codec (1 = identity).
    pub codec_factor: usize,
    pub base_channels: usize,
    /// Channel multiplier per scale; its length is the number of scales.
    pub channel_mult: Vec<usize>,
    /// Decoder blocks per scale, indexed like `channel_mult`.
    pub decoder_layers: Vec<usize>,
    pub heads: usize,
    pub groups: usize,
    /// Width of the semantic tokens.
    pub embed_dim: usize,
    /// Semantic tokens per group are `token_grid²` plus one background token.
    pub token_grid: usize,
    pub encoder_channels: usize,
    pub time_freq_dim: usize,
    pub delivery: Delivery,
}

impl DenoiserConfig {
    /// 64x64 RGB, 16x16x48 latents, two scales.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            image_channels: 3,
            codec_factor: 4,
            base_channels: 32,
            channel_mult: vec![1, 2],
            decoder_layers: vec![2, 1],
            heads: 2,
            groups: 8,
            embed_dim: 32,
            token_grid: 2,
            encoder_channels: 24,
            time_freq_dim: 32,
            delivery: Delivery::Decoder,
        }
    }

    /// Under a thousand parameters; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            image_channels: 1,
            codec_factor: 1,
            base_channels: 1,
            channel_mult: vec![1, 1],
            decoder_layers: vec![1, 1],
            heads: 1,
            groups: 1,
            embed_dim: 2,
            token_grid: 1,
            encoder_channels: 2,
            time_freq_dim: 2,
            delivery: Delivery::Decoder,
        }
    }

    pub fn codec(&self) -> SpaceToDepth {
        SpaceToDepth { factor: self.codec_factor }
    }

    pub fn num_scales(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn latent_channels(&self) -> usize {
        self.codec().latent_channels(self.image_channels)
    }

    pub fn latent_size(&self) -> usize {
        self.codec().latent_size(self.image_size)
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels * self.channel_mult[scale]
    }

    pub fn time_dim(&self) -> usize {
        self.base_channels * 2
    }

    pub fn tokens_per_group(&self) -> usize {
        self.token_grid * self.token_grid + 1
    }

    /// Two token groups per scale, one for each side of the U.
    pub fn num_token_groups(&self) -> usize {
        2 * self.num_scales()
    }

    pub fn token_group_for(&self, stage: Stage, scale: usize) -> usize {
        match stage {
            Stage::Encoder | Stage::Middle => scale,
            Stage::Decoder => 2 * self.num_scales() - 1 - scale,
        }
    }

    /// Every self-attention site in execution order.
    pub fn self_attn_sites(&self) -> Vec<SiteId> {
        let s = self.num_scales();
        let mut sites: Vec<SiteId> = (0..s)
            .map(|scale| SiteId { stage: Stage::Encoder, ordinal: scale, scale })
            .collect();
        sites.push(SiteId { stage: Stage::Middle, ordinal: 0, scale: s - 1 });
        let mut k = 1;
        for scale in (0..s).rev() {
            for _ in 0..self.decoder_layers[scale] {
                sites.push(SiteId { stage: Stage::Decoder, ordinal: k, scale });
                k += 1;
            }
        }
        sites
    }

    pub fn delivery_sites(&self) -> Vec<SiteId> {
        self.self_attn_sites()
            .into_iter()
            .filter(|site| match self.delivery {
                Delivery::Encoder => site.stage == Stage::Encoder,
                Delivery::Decoder => site.stage != Stage::Encoder,
                Delivery::Both => true,
            })
            .collect()
    }

    /// Middle block plus every decoder self-attention.
    pub fn probe_sites(&self) -> Vec<SiteId> {
        self.self_attn_sites()
            .into_iter()
            .filter(|s| s.stage != Stage::Encoder)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_scales() < 2 {
            return bad("at least two scales are required".into());
        }
        if self.decoder_layers.len() != self.num_scales() {
            return bad("decoder_layers must have one entry per scale".into());
        }
        if self.decoder_layers.iter().any(|&n| n == 0) {
            return bad("every decoder scale needs at least one self-attention block".into());
        }
        if self.channel_mult.iter().any(|&m| m == 0) || self.base_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.codec_factor == 0 || self.image_size % self.codec_factor != 0 {
            return bad(format!(
                "image size {} not divisible by codec factor {}",
                self.image_size, self.codec_factor
            ));
        }
        let latent = self.latent_size();
        let down = 1usize << (self.num_scales() - 1);
        if latent % down != 0 {
            return bad(format!("latent size {latent} not divisible by {down}"));
        }
        if self.token_grid == 0 || latent % self.token_grid != 0 {
            return bad(format!("token grid {} must divide latent size {latent}", self.token_grid));
        }
        for s in 0..self.num_scales() {
            if self.heads == 0 || self.channels(s) % self.heads != 0 {
                return bad(format!("{} channels at scale {s} not divisible by {} heads", self.channels(s), self.heads));
            }
        }
        if self.embed_dim == 0 || self.encoder_channels == 0 {
            return bad("token widths must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_layout() {
        let c = DenoiserConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.latent_channels(), 48);
        assert_eq!(c.latent_size(), 16);
        let names: Vec<String> = c.self_attn_sites().iter().map(|s| s.to_string()).collect();
        assert_eq!(names, ["enc0", "enc1", "mid", "up1", "up2", "up3"]);
        let delivered: Vec<String> = c.delivery_sites().iter().map(|s| s.to_string()).collect();
        assert_eq!(delivered, ["mid", "up1", "up2", "up3"]);
        assert_eq!(c.probe_sites().len(), 4);
        assert_eq!(c.num_token_groups(), 4);
    }

    #[test]
    fn delivery_positions() {
        let mut c = DenoiserConfig::desk();
        c.delivery = Delivery::Encoder;
        assert_eq!(c.delivery_sites().len(), 2);
        c.delivery = Delivery::Both;
        assert_eq!(c.delivery_sites().len(), 6);
    }

    #[test]
    fn every_decoder_scale_needs_a_site() {
        let mut c = DenoiserConfig::desk();
        c.decoder_layers = vec![2, 0];
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::desk();
        c.channel_mult = vec![1];
        c.decoder_layers = vec![1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn site_order_matches_execution() {
        let c = DenoiserConfig::desk();
        let sites = c.self_attn_sites();
        let mut sorted = sites.clone();
        sorted.sort();
        assert_eq!(sites, sorted);
    }
}
