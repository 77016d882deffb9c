//! Run configuration: a plain-text `key = value` file overridden by
//! command-line flags of the same names.
//!
//! ```text
//! # comments start with '#'
//! steps = 400
//! system = symbiotic
//! lambdas = 0, 0.5, 1
//! ```
//!
//! Every key is listed in [`SCHEMA`] with its type and default. Unknown keys
//! and unparsable values are rejected with one diagnostic per problem. The
//! output root defaults to `runs/<command>`; the `RDIFF_OUT` environment
//! variable replaces the `runs` part.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::ablation::Suite;
use crate::baselines::SystemKind;
use crate::data::{Category, SynthSpec};
use crate::denoiser::{Delivery, DenoiserConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::instrument::GroupBy;
use crate::schedule::{make_schedule, DiffusionSchedule, BETA_END, BETA_START, TRAIN_STEPS};
use crate::train::TrainConfig;

pub const OUT_ENV: &str = "RDIFF_OUT";
pub const RESOLVED_NAME: &str = "resolved.cfg";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    Path,
    Choice(&'static [&'static str]),
    FloatList,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, kind, default, help }
}

const SYSTEMS: &[&str] = &["symbiotic", "controlnet", "referencenet", "blocked"];

pub const SCHEMA: &[KeySpec] = &[
    key("out", Kind::Path, "", "output directory (default: runs/<command>)"),
    key("seed", Kind::Int, "0", "seed of the command: data generation, training, or sampling"),
    key("dtype", Kind::Choice(&["f32", "f64"]), "f32", "parameter precision"),
    // data
    key("count", Kind::Int, "1000", "number of pairs to generate"),
    key("split", Kind::Choice(&["train", "benchmark"]), "train", "split written by gen-data"),
    key("data", Kind::Path, "", "training dataset directory (empty: generate in memory)"),
    key("data-seed", Kind::Int, "1", "generator seed for in-memory datasets"),
    key("benchmark", Kind::Path, "", "benchmark dataset directory (empty: generate in memory)"),
    key("bench-count", Kind::Int, "64", "in-memory benchmark size"),
    key("weights", Kind::Text, "glyph_text:0.4,shape_logo:0.4,tryon_patch:0.2", "category sampling weights"),
    key("area-min", Kind::Float, "0.08", "smallest region area fraction"),
    key("area-max", Kind::Float, "0.3", "largest region area fraction"),
    // model
    key("system", Kind::Choice(SYSTEMS), "symbiotic", "system to train"),
    key("base-channels", Kind::Int, "32", "channels of the first denoiser scale"),
    key("delivery", Kind::Choice(&["encoder", "decoder", "both"]), "decoder", "sites receiving recycled signatures"),
    // training
    key("steps", Kind::Int, "2000", "optimizer steps"),
    key("batch-size", Kind::Int, "16", "pairs per step"),
    key("lr", Kind::Float, "0.001", "AdamW learning rate"),
    key("lambda", Kind::Float, "0.6", "training-time sparse recycling threshold"),
    key("condition-drop", Kind::Float, "0.1", "probability of training a step unconditionally"),
    key("checkpoint-every", Kind::Int, "0", "save a checkpoint every n steps (0: only at the end)"),
    key("augment", Kind::Bool, "true", "augment subjects during training"),
    // sampling
    key("checkpoint", Kind::Path, "", "model checkpoint (empty: untrained model)"),
    key("scene", Kind::Path, "", "scene image"),
    key("mask", Kind::Path, "", "mask image, white = keep, black = region"),
    key("subject", Kind::Path, "", "subject image"),
    key("output", Kind::Text, "output.png", "output image file name inside the output directory"),
    key("sample-steps", Kind::Int, "50", "sampler steps"),
    key("guidance", Kind::Float, "1.0", "guidance scale w"),
    key("lambda-inf", Kind::Float, "1.0", "inference-time signature threshold"),
    key("lambdas", Kind::FloatList, "0,0.25,0.5,0.75,1", "thresholds of a signature sweep or interpolation suite"),
    // evaluation
    key("eval-pairs", Kind::Int, "0", "benchmark pairs to evaluate (0: all)"),
    key("eval-batch", Kind::Int, "8", "evaluation batch size"),
    key("diversity-pairs", Kind::Int, "8", "pairs used for the diversity score"),
    key("diversity-samples", Kind::Int, "8", "samples per pair for the diversity score"),
    key("evaluator", Kind::Path, "", "blocked-system checkpoint scoring the quality proxy"),
    key("group-by", Kind::Choice(&["layer", "layer_and_step"]), "layer", "ASA grouping"),
    // ablation
    key("suite", Kind::Choice(&["systems", "position", "sparse_sweep", "interpolation"]), "systems", "ablation suite"),
    key("train-lambdas", Kind::FloatList, "0,0.2,0.4,0.6,0.8,1", "training thresholds of the sparse sweep"),
    key("budget-seconds", Kind::Float, "0", "wall-clock budget of an ablation (0: unlimited)"),
];

pub fn spec_of(name: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|k| k.name == name)
}

fn check_value(spec: &KeySpec, value: &str) -> std::result::Result<(), String> {
    let bad = |what: &str| Err(format!("`{}` expects {what}, got `{value}`", spec.name));
    match spec.kind {
        Kind::Int => value.parse::<u64>().map(|_| ()).or_else(|_| bad("a non-negative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => bad("a finite number"),
        },
        Kind::Bool => value.parse::<bool>().map(|_| ()).or_else(|_| bad("true or false")),
        Kind::Text | Kind::Path => Ok(()),
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                bad(&format!("one of {}", options.join(", ")))
            }
        }
        Kind::FloatList => {
            if parse_list(value).is_some_and(|l| !l.is_empty()) {
                Ok(())
            } else {
                bad("a comma-separated list of numbers")
            }
        }
    }
}

fn parse_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse::<f64>().ok().filter(|v| v.is_finite())).collect()
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => problems.push(format!("{origin}:{}: expected `key = value`", i + 1)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(problems.join("\n")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: SCHEMA.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect() }
    }
}

impl RunConfig {
    /// Applies `pairs` in order; every unknown key or bad value is reported.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in pairs {
            match spec_of(k) {
                None => problems.push(format!("unknown key `{k}`")),
                Some(spec) => match check_value(spec, v) {
                    Ok(()) => {
                        self.values.insert(k.clone(), v.clone());
                    }
                    Err(e) => problems.push(e),
                },
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// Defaults, then the config file, then the flags. An empty `out` becomes
    /// `<root>/<command>` with `root` from `RDIFF_OUT` or `runs`.
    pub fn resolve(command: &str, file: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply(&parse_text(&text, &path.display().to_string())?)?;
        }
        cfg.apply(flags)?;
        if cfg.text("out").is_empty() {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let out = root.join(command);
            cfg.values.insert("out".into(), out.display().to_string());
        }
        Ok(cfg)
    }

    pub fn text(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not in the schema"))
    }

    pub fn int(&self, key: &str) -> u64 {
        self.text(key).parse().expect("validated on apply")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        self.text(key).parse().expect("validated on apply")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.text(key).parse().expect("validated on apply")
    }

    pub fn floats(&self, key: &str) -> Vec<f64> {
        parse_list(self.text(key)).expect("validated on apply")
    }

    /// `None` for an empty path.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let s = self.text(key);
        (!s.is_empty()).then(|| PathBuf::from(s))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.text("out"))
    }

    /// Sorted `key = value` lines that [`parse_text`] reads back.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of every setting except the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.as_str() != "out") {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(h.finalize())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn dtype(&self) -> DType {
        if self.text("dtype") == "f64" {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn system(&self) -> Result<SystemKind> {
        self.text("system").parse()
    }

    pub fn suite(&self) -> Result<Suite> {
        self.text("suite").parse()
    }

    pub fn group_by(&self) -> GroupBy {
        if self.text("group-by") == "layer" {
            GroupBy::Layer
        } else {
            GroupBy::LayerAndStep
        }
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let base = self.usize("base-channels");
        let d = DenoiserConfig::desk();
        if base == 0 || base % d.groups != 0 {
            return Err(Error::Config(format!("base-channels {base} must be a positive multiple of {}", d.groups)));
        }
        Ok(DenoiserConfig { base_channels: base, delivery: self.text("delivery").parse::<Delivery>()?, ..d })
    }

    /// Generator spec with `seed` as the generator seed.
    pub fn synth_spec(&self, seed: u64) -> Result<SynthSpec> {
        let mut spec = SynthSpec::desk(seed);
        let mut categories = Vec::new();
        let mut weights = Vec::new();
        for item in self.text("weights").split(',').filter(|s| !s.trim().is_empty()) {
            let (c, w) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("weights entry `{item}` is not category:weight")))?;
            categories.push(c.trim().parse::<Category>()?);
            weights.push(
                w.trim().parse::<f64>().map_err(|_| Error::Config(format!("weight `{w}` is not a number")))?,
            );
        }
        spec.categories = categories;
        spec.category_weights = weights;
        spec.mask_area_range = (self.float("area-min"), self.float("area-max"));
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            steps: self.usize("steps"),
            batch_size: self.usize("batch-size"),
            learning_rate: self.float("lr"),
            lambda: self.float("lambda"),
            guidance: self.float("guidance"),
            condition_drop_prob: self.float("condition-drop"),
            system: self.system()?,
            checkpoint_every: self.usize("checkpoint-every"),
            seed: self.int("seed"),
            augment: self.flag("augment"),
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let lambda_inf = self.float("lambda-inf");
        if !(0.0..=1.0).contains(&lambda_inf) {
            return Err(Error::Config(format!("lambda-inf {lambda_inf} outside [0, 1]")));
        }
        let pairs = self.usize("eval-pairs");
        Ok(EvalConfig {
            guidance: self.float("guidance"),
            lambda_inf,
            seed: self.int("seed"),
            batch_size: self.usize("eval-batch").max(1),
            diversity_samples: self.usize("diversity-samples"),
            diversity_pairs: self.usize("diversity-pairs"),
            trace: true,
            limit: (pairs > 0).then_some(pairs),
        })
    }

    /// Linear β schedule over 1000 training levels with `sample-steps`
    /// sampler steps.
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(TRAIN_STEPS, BETA_START, BETA_END, self.usize("sample-steps")).map_err(|e| Error::Config(e.to_string()))
    }
}
