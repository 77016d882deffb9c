//! The single denoising network, its input composition, semantic encoder,
//! and signature cache.

mod cache;
mod compose;
mod config;
mod encoder;
mod unet;

pub use cache::SignatureCache;
pub use compose::{compose_input, compose_subject, ComposedInput};
pub use config::{Delivery, DenoiserConfig, SiteId, Stage};
pub use encoder::{SemanticEncoder, SemanticTokens};
pub use unet::{Denoiser, EncoderPath, ForwardOptions, ForwardOutput, Mode};
