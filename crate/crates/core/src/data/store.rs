//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/0000017_scene.png     8-bit RGB
//! <dir>/0000017_mask.png      8-bit gray, 255 = keep, 0 = region
//! <dir>/0000017_subject.png   8-bit RGB
//! ```
//!
//! The manifest holds the generator spec and one record per sample.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::{gen_pair, Category, QualityFlags, SamplePair, SynthSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "recycled-diffusion-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub index: u64,
    pub category: Category,
    pub seed: u64,
    pub scene: String,
    pub mask: String,
    pub subject: String,
    pub quality: QualityFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub spec: SynthSpec,
    pub records: Vec<Record>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    /// Generates the pairs in memory without touching the disk.
    pub fn generate(spec: &SynthSpec, indices: Range<u64>, split: &str) -> Result<Self> {
        let pairs = indices.map(|i| gen_pair(spec, i)).collect::<Result<Vec<_>>>()?;
        let records = pairs.iter().map(|p| record_for(p, spec)).collect();
        Ok(Self {
            manifest: Manifest {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                split: split.into(),
                spec: spec.clone(),
                records,
            },
            pairs,
        })
    }

    pub fn categories(&self) -> Vec<Category> {
        self.pairs.iter().map(|p| p.category).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (p, r) in self.pairs.iter().zip(&self.manifest.records) {
            p.scene.save(dir.join(&r.scene))?;
            p.mask.save(dir.join(&r.mask))?;
            p.subject.save(dir.join(&r.subject))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported dataset format {} v{}",
                path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let mut pairs = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let open = |name: &str| -> Result<image::DynamicImage> {
                let p: PathBuf = dir.join(name);
                Ok(image::open(&p)?)
            };
            pairs.push(SamplePair {
                index: r.index,
                category: r.category,
                scene: open(&r.scene)?.to_rgb8(),
                mask: open(&r.mask)?.to_luma8(),
                subject: open(&r.subject)?.to_rgb8(),
                quality: r.quality.clone(),
            });
        }
        Ok(Self { manifest, pairs })
    }
}

fn record_for(p: &SamplePair, spec: &SynthSpec) -> Record {
    Record {
        index: p.index,
        category: p.category,
        seed: spec.rng_seed,
        scene: format!("{:07}_scene.png", p.index),
        mask: format!("{:07}_mask.png", p.index),
        subject: format!("{:07}_subject.png", p.index),
        quality: p.quality.clone(),
    }
}

/// SHA-256 over the manifest and every image it lists, in record order.
/// Other files in the directory do not count.
pub fn dataset_checksum(dir: &Path) -> Result<String> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for r in &manifest.records {
        for name in [&r.scene, &r.mask, &r.subject] {
            let p = dir.join(name);
            h.update(name.as_bytes());
            h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
