//! Generates a small training split and a benchmark split on disk and
//! prints their checksums.
//!
//! cargo run --example gen_data -- [out-dir]

use std::path::PathBuf;

use recycled_diffusion::data::{dataset_checksum, Dataset, SynthSpec, BENCHMARK_START};

fn main() -> recycled_diffusion::error::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rdiff-data"));
    let spec = SynthSpec::desk(1);
    let train = Dataset::generate(&spec, 0..48, "train")?;
    let bench = Dataset::generate(&spec, BENCHMARK_START..BENCHMARK_START + 16, "benchmark")?;
    for (ds, name) in [(&train, "train"), (&bench, "benchmark")] {
        let dir = out.join(name);
        ds.save(&dir)?;
        let mut per_cat = std::collections::BTreeMap::new();
        for p in &ds.pairs {
            *per_cat.entry(p.category.to_string()).or_insert(0) += 1;
        }
        println!("{name}: {} pairs {per_cat:?} sha256={}", ds.len(), dataset_checksum(&dir)?);
    }
    println!("written under {}", out.display());
    Ok(())
}
