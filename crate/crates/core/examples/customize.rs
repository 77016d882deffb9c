//! Customizes a benchmark scene with its subject and writes the scene, the
//! subject, and the result side by side.
//!
//! cargo run --release --example customize -- [checkpoint] [out.png]

use std::path::PathBuf;

use candle_core::Device;
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::checkpoint::load_checkpoint;
use recycled_diffusion::compositor::{customize, image_strip, CustomizationRequest};
use recycled_diffusion::data::{tensor_to_rgb, Batch, Dataset, SynthSpec, BENCHMARK_START};
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::schedule::make_schedule;

fn main() -> recycled_diffusion::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(p) => load_checkpoint(p.as_ref(), &Device::Cpu)?.0,
        None => Model::new(SystemKind::Symbiotic, &DenoiserConfig::desk(), 0, candle_core::DType::F32, &Device::Cpu)?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rdiff-customize.png"));

    let bench = Dataset::generate(&SynthSpec::desk(1), BENCHMARK_START..BENCHMARK_START + 1, "benchmark")?;
    let batch = Batch::from_pairs(&[&bench.pairs[0]], None, model.dtype(), model.device())?;
    let req = CustomizationRequest::new(batch.scene.clone(), batch.mask.clone(), batch.subject.clone(), 7);
    let sched = make_schedule(1000, 1e-4, 0.02, 50)?;
    let result = customize(&req, &model, &sched, true)?;
    println!("{} attention records, {} with delivered signatures", result.trace.records.len(), result.trace.delivered_sites());
    let strip = image_strip(&[batch.scene, batch.subject, result.image])?;
    tensor_to_rgb(strip.tensor())?.save(&out)?;
    println!("scene | subject | result -> {}", out.display());
    Ok(())
}
