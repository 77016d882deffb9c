//! Keeps a benchmark subject region and regenerates the background around
//! it. The preserved region is checked to be bit-exact.
//!
//! cargo run --release --example outpaint -- [checkpoint] [out.png]

use std::path::PathBuf;

use candle_core::{DType, Device};
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::checkpoint::load_checkpoint;
use recycled_diffusion::compositor::{image_strip, outpaint, CustomizationRequest};
use recycled_diffusion::data::{tensor_to_rgb, Batch, Dataset, SynthSpec, BENCHMARK_START};
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::schedule::make_schedule;

fn main() -> recycled_diffusion::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(p) => load_checkpoint(p.as_ref(), &Device::Cpu)?.0,
        None => Model::new(SystemKind::Symbiotic, &DenoiserConfig::desk(), 0, DType::F32, &Device::Cpu)?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rdiff-outpaint.png"));

    let bench = Dataset::generate(&SynthSpec::desk(1), BENCHMARK_START + 3..BENCHMARK_START + 4, "benchmark")?;
    let batch = Batch::from_pairs(&[&bench.pairs[0]], None, model.dtype(), model.device())?;
    let req = CustomizationRequest::new(batch.scene.clone(), batch.mask.clone(), batch.subject.clone(), 3);
    let sched = make_schedule(1000, 1e-4, 0.02, 50)?;
    let image = outpaint(&req, &model, &sched)?;

    let (a, b) = (tensor_to_rgb(batch.scene.tensor())?, tensor_to_rgb(image.tensor())?);
    let kept = bench.pairs[0].mask.pixels().zip(a.pixels().zip(b.pixels())).filter(|(m, _)| m[0] == 0);
    let changed = kept.filter(|(_, (x, y))| x != y).count();
    println!("subject-region pixels changed: {changed}");
    tensor_to_rgb(image_strip(&[batch.scene, image])?.tensor())?.save(&out)?;
    println!("scene | outpainted -> {}", out.display());
    Ok(())
}
