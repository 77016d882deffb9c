//! Trains the symbiotic system for a few hundred steps on in-memory data and
//! saves a checkpoint.
//!
//! cargo run --release --example train_toy -- [steps] [checkpoint-path]

use std::path::PathBuf;

use candle_core::{DType, Device};
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::checkpoint::save_checkpoint;
use recycled_diffusion::data::{Dataset, SynthSpec};
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::schedule::make_schedule;
use recycled_diffusion::train::{train, TrainConfig};

fn main() -> recycled_diffusion::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let path = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rdiff-toy.safetensors"));

    let data = Dataset::generate(&SynthSpec::desk(1), 0..256, "train")?;
    let sched = make_schedule(1000, 1e-4, 0.02, 50)?;
    let cfg = TrainConfig { steps, batch_size: 8, system: SystemKind::Symbiotic, ..Default::default() };
    let model = Model::new(cfg.system, &DenoiserConfig::desk(), cfg.seed, DType::F32, &Device::Cpu)?;
    println!("{} parameters", model.num_params());
    let report = train(
        &model,
        &data,
        &sched,
        &cfg,
        |step, loss| {
            if step % 25 == 0 {
                println!("step {step:4} loss {loss:.4}");
            }
            true
        },
        |_, _| Ok(()),
    )?;
    let n = report.losses.len();
    println!("mean loss: first 10% {:.4}, last 10% {:.4}", report.mean_loss(0, n / 10), report.mean_loss(n - n / 10, n));
    save_checkpoint(&model, steps, &path)?;
    println!("saved {}", path.display());
    Ok(())
}
