//! Minimal neural-network layers on top of candle tensors.

pub mod attention;
pub mod layers;
pub mod params;

pub use attention::{attend, mutual_attention, CrossAttention, Projections, SelfAttention, SiteOutput};
pub use layers::{Conv1x1, Conv3x3, GroupNorm, Linear, ResBlock, TimeEmbedding};
pub use params::{Init, ParamStore, Scope};
