//! Releases recycled signatures progressively at inference, from the blocked
//! flow to full delivery, and writes the strip of results.
//!
//! cargo run --release --example signature_sweep -- [checkpoint] [out.png]

use std::path::PathBuf;

use candle_core::{DType, Device};
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::checkpoint::load_checkpoint;
use recycled_diffusion::compositor::{image_strip, signature_sweep, CustomizationRequest};
use recycled_diffusion::data::{tensor_to_rgb, Batch, Dataset, SynthSpec, BENCHMARK_START};
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::schedule::make_schedule;

fn main() -> recycled_diffusion::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(p) => load_checkpoint(p.as_ref(), &Device::Cpu)?.0,
        None => Model::new(SystemKind::Symbiotic, &DenoiserConfig::desk(), 0, DType::F32, &Device::Cpu)?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rdiff-sweep.png"));

    let bench = Dataset::generate(&SynthSpec::desk(1), BENCHMARK_START..BENCHMARK_START + 1, "benchmark")?;
    let batch = Batch::from_pairs(&[&bench.pairs[0]], None, model.dtype(), model.device())?;
    let req = CustomizationRequest::new(batch.scene, batch.mask, batch.subject, 11);
    let sched = make_schedule(1000, 1e-4, 0.02, 50)?;
    let lambdas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let images = signature_sweep(&req, &model, &sched, &lambdas)?;
    tensor_to_rgb(image_strip(&images)?.tensor())?.save(&out)?;
    println!("thresholds {lambdas:?} -> {}", out.display());
    Ok(())
}
