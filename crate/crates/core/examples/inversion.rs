//! Inverts a scene to noise with the deterministic sampler and samples it
//! back; prints the reconstruction PSNR.
//!
//! cargo run --release --example inversion -- [checkpoint]

use candle_core::{DType, Device};
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::checkpoint::load_checkpoint;
use recycled_diffusion::compositor::{inversion_round_trip, CustomizationRequest};
use recycled_diffusion::data::{Batch, Dataset, SynthSpec, BENCHMARK_START};
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::eval::{planes, region_psnr};
use recycled_diffusion::schedule::make_schedule;

fn main() -> recycled_diffusion::error::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref(), &Device::Cpu)?.0,
        None => Model::new(SystemKind::Symbiotic, &DenoiserConfig::desk(), 0, DType::F32, &Device::Cpu)?,
    };
    let bench = Dataset::generate(&SynthSpec::desk(1), BENCHMARK_START..BENCHMARK_START + 2, "benchmark")?;
    let refs: Vec<_> = bench.pairs.iter().collect();
    let batch = Batch::from_pairs(&refs, None, model.dtype(), model.device())?;
    let req = CustomizationRequest::new(batch.scene.clone(), batch.mask, batch.subject, 0);
    for steps in [10, 50] {
        let sched = make_schedule(1000, 1e-4, 0.02, steps)?;
        let (_, back) = inversion_round_trip(&req, &model, &sched)?;
        let (a, b) = (planes(&batch.scene)?, planes(&back)?);
        let everywhere = vec![true; a[0].h * a[0].w];
        let psnr: Vec<String> = a.iter().zip(&b).map(|(x, y)| format!("{:.2}", region_psnr(x, y, &everywhere))).collect();
        println!("{steps} steps: PSNR {} dB", psnr.join(", "));
    }
    Ok(())
}
