pub mod ablation;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod compositor;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod grid;
pub mod instrument;
pub mod nn;
pub mod plot;
pub mod recycling;
pub mod rng;
pub mod schedule;
pub mod train;
