//! Records attention traces while customizing benchmark pairs and prints
//! accumulated subject attention and statistic latent difference per site.
//!
//! cargo run --release --example instrument -- [checkpoint]

use candle_core::{DType, Device};
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::checkpoint::load_checkpoint;
use recycled_diffusion::data::{Dataset, SynthSpec, BENCHMARK_START};
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::eval::{generate_outputs, EvalConfig};
use recycled_diffusion::instrument::{asa_accumulate, sld_compute, AttentionTrace, GroupBy};
use recycled_diffusion::schedule::make_schedule;

fn main() -> recycled_diffusion::error::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref(), &Device::Cpu)?.0,
        None => {
            let m = Model::new(SystemKind::Symbiotic, &DenoiserConfig::desk(), 0, DType::F32, &Device::Cpu)?;
            m.base_params.perturb(1, 0.05)?;
            m
        }
    };
    let bench = Dataset::generate(&SynthSpec::desk(1), BENCHMARK_START..BENCHMARK_START + 4, "benchmark")?;
    let sched = make_schedule(1000, 1e-4, 0.02, 10)?;
    let cfg = EvalConfig { batch_size: 4, ..Default::default() };
    let traces: Vec<AttentionTrace> = generate_outputs(&model, &bench, &sched, &cfg)?.into_iter().map(|(_, _, t)| t).collect();

    print!("{}", asa_accumulate(&traces, GroupBy::Layer)?.to_tsv(&model.kind.to_string()));
    for (site, sld) in sld_compute(&traces) {
        println!("SLD {site}: {}", sld.map_or("absent".into(), |v| format!("{v:.5}")));
    }
    Ok(())
}
