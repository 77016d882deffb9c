//! Scores a checkpoint on the benchmark split and prints the report.
//!
//! cargo run --release --example evaluate -- <checkpoint> [pairs]

use candle_core::Device;
use recycled_diffusion::checkpoint::load_checkpoint;
use recycled_diffusion::data::{Dataset, SynthSpec, BENCHMARK_START};
use recycled_diffusion::eval::{evaluate, EvalConfig};
use recycled_diffusion::schedule::make_schedule;

fn main() -> recycled_diffusion::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(path) = args.next() else {
        eprintln!("usage: evaluate <checkpoint> [pairs]");
        std::process::exit(2);
    };
    let pairs: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);
    let (model, info) = load_checkpoint(path.as_ref(), &Device::Cpu)?;
    println!("{} after {} steps", info.system, info.step);
    let bench = Dataset::generate(&SynthSpec::desk(1), BENCHMARK_START..BENCHMARK_START + pairs, "benchmark")?;
    let sched = make_schedule(1000, 1e-4, 0.02, 50)?;
    let report = evaluate(&model, &bench, &sched, &EvalConfig::default(), None)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
