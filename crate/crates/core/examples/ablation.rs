//! Runs one ablation suite at a very small budget and writes its table and
//! plots. Real runs use `rdiff ablate` with larger settings.
//!
//! cargo run --release --example ablation -- [systems|position|sparse_sweep|interpolation] [out-dir]

use std::path::PathBuf;

use candle_core::Device;
use recycled_diffusion::ablation::{run_ablation, to_tsv, write_report, AblationConfig, Suite};
use recycled_diffusion::data::{Dataset, SynthSpec, BENCHMARK_START};
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::eval::EvalConfig;
use recycled_diffusion::schedule::make_schedule;
use recycled_diffusion::train::TrainConfig;

fn main() -> recycled_diffusion::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let suite: Suite = args.next().as_deref().unwrap_or("position").parse()?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rdiff-ablation"));

    let spec = SynthSpec::desk(1);
    let data = Dataset::generate(&spec, 0..64, "train")?;
    let bench = Dataset::generate(&spec, BENCHMARK_START..BENCHMARK_START + 8, "benchmark")?;
    let train = TrainConfig { steps: 20, batch_size: 4, ..Default::default() };
    let eval = EvalConfig { diversity_pairs: 2, diversity_samples: 4, ..Default::default() };
    let sched = make_schedule(1000, 1e-4, 0.02, 10)?;
    let mut cfg = AblationConfig::new(suite, DenoiserConfig { base_channels: 16, ..DenoiserConfig::desk() }, train, eval, sched);
    cfg.lambdas = vec![0.0, 0.6, 1.0];
    let report = run_ablation(&cfg, &data, &bench, &Device::Cpu)?;
    print!("{}", to_tsv(&report));
    for p in write_report(&report, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
