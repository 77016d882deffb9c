//! Ablation suites: system comparison, delivery position, training-time
//! sparse threshold, and inference-time signature interpolation. Each suite
//! trains its variants under one shared budget and seed set, evaluates them
//! on the same benchmark, and writes a TSV table, a JSON report, and plots.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::baselines::{Model, SystemKind};
use crate::checkpoint::{load_checkpoint, read_info, save_checkpoint};
use crate::compositor::{image_strip, signature_sweep, CustomizationRequest};
use crate::data::{tensor_to_rgb, Batch, Dataset};
use crate::denoiser::{Delivery, DenoiserConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::plot::{bar_chart, line_chart, Series};
use crate::schedule::DiffusionSchedule;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Systems,
    Position,
    SparseSweep,
    Interpolation,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Systems, Suite::Position, Suite::SparseSweep, Suite::Interpolation];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Systems => "systems",
            Suite::Position => "position",
            Suite::SparseSweep => "sparse_sweep",
            Suite::Interpolation => "interpolation",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`; expected systems, position, sparse_sweep or interpolation")))
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub suite: Suite,
    pub denoiser: DenoiserConfig,
    /// Shared by every variant; `system`, `lambda` are overridden per row.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sched: DiffusionSchedule,
    /// Training thresholds of the sparse sweep.
    pub lambdas: Vec<f64>,
    /// Inference thresholds of the interpolation suite.
    pub lambda_inf: Vec<f64>,
    /// Wall-clock limit for the whole suite.
    pub budget_seconds: Option<f64>,
    pub dtype: DType,
    /// Trained variants are saved here and reused when present.
    pub checkpoint_dir: Option<PathBuf>,
}

impl AblationConfig {
    pub fn new(suite: Suite, denoiser: DenoiserConfig, train: TrainConfig, eval: EvalConfig, sched: DiffusionSchedule) -> Self {
        Self {
            suite,
            denoiser,
            train,
            eval,
            sched,
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            lambda_inf: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            budget_seconds: None,
            dtype: DType::F32,
            checkpoint_dir: None,
        }
    }
}

/// A model to train: system, threshold, and delivery position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub system: SystemKind,
    pub lambda: f64,
    pub delivery: Delivery,
}

impl Variant {
    fn new(label: impl Into<String>, system: SystemKind, lambda: f64, delivery: Delivery) -> Self {
        Self { label: label.into(), system, lambda, delivery }
    }
}

/// The variants a suite trains, in table order.
pub fn variants(cfg: &AblationConfig) -> Vec<Variant> {
    let lambda = cfg.train.lambda;
    let d = cfg.denoiser.delivery;
    match cfg.suite {
        Suite::Systems => vec![
            Variant::new("symbiotic", SystemKind::Symbiotic, lambda, d),
            Variant::new("controlnet", SystemKind::ControlNet, 1.0, d),
            Variant::new("referencenet", SystemKind::ReferenceNet, 1.0, d),
            Variant::new("blocked", SystemKind::Blocked, lambda, d),
        ],
        Suite::Position => vec![
            Variant::new("encoder", SystemKind::Symbiotic, lambda, Delivery::Encoder),
            Variant::new("decoder", SystemKind::Symbiotic, lambda, Delivery::Decoder),
            Variant::new("enc+dec", SystemKind::Symbiotic, lambda, Delivery::Both),
        ],
        Suite::SparseSweep => cfg
            .lambdas
            .iter()
            .map(|&l| Variant::new(format!("lambda={l}"), SystemKind::Symbiotic, l, d))
            .collect(),
        Suite::Interpolation => vec![
            Variant::new("symbiotic", SystemKind::Symbiotic, lambda, d),
            Variant::new("referencenet", SystemKind::ReferenceNet, 1.0, d),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub lambda_inf: f64,
    pub report: EvalReport,
    /// Mean loss over the last tenth of training; absent for reused
    /// checkpoints.
    pub final_loss: Option<f64>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
    /// Set when the budget ran out before every row was produced.
    pub partial: bool,
    pub skipped: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.label == label)
    }
}

/// Trains one variant, or loads it from the checkpoint directory when a
/// checkpoint with the same system, configuration, and step count exists.
pub fn train_variant(
    v: &Variant,
    cfg: &AblationConfig,
    data: &Dataset,
    device: &Device,
) -> Result<(Model, Option<f64>, f64)> {
    let denoiser = DenoiserConfig { delivery: v.delivery, ..cfg.denoiser.clone() };
    let tcfg = TrainConfig { system: v.system, lambda: v.lambda, ..cfg.train.clone() };
    let path = cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("{}-{}.safetensors", cfg.suite, sanitize(&v.label))));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let info = read_info(p)?;
        if info.system == v.system && info.config == denoiser && info.step == tcfg.steps && info.dtype == cfg.dtype {
            log::info!("reusing {}", p.display());
            return Ok((load_checkpoint(p, device)?.0, None, 0.0));
        }
    }
    let model = Model::new(v.system, &denoiser, tcfg.seed, cfg.dtype, device)?;
    let label = v.label.clone();
    let report = train(
        &model,
        data,
        &cfg.sched,
        &tcfg,
        |step, loss| {
            if step % 50 == 0 {
                log::info!("{label}: step {step} loss {loss:.4}");
            }
            true
        },
        |_, _| Ok(()),
    )?;
    if let Some(p) = &path {
        save_checkpoint(&model, tcfg.steps, p)?;
    }
    let n = report.losses.len();
    Ok((model, Some(report.mean_loss(n - n.div_ceil(10), n)), report.seconds))
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

/// Runs a suite end to end. Running out of budget stops before the next
/// training or evaluation and flags the report as partial.
pub fn run_ablation(cfg: &AblationConfig, data: &Dataset, bench: &Dataset, device: &Device) -> Result<AblationReport> {
    if bench.is_empty() {
        return Err(Error::Empty("benchmark split".into()));
    }
    let started = Instant::now();
    let over = || cfg.budget_seconds.is_some_and(|b| started.elapsed().as_secs_f64() > b);
    let vs = variants(cfg);
    let mut report = AblationReport { suite: cfg.suite, rows: Vec::new(), partial: false, skipped: Vec::new() };
    let mut trained: Vec<(Variant, Model, Option<f64>, f64)> = Vec::new();
    for v in &vs {
        if over() {
            report.partial = true;
            report.skipped.push(v.label.clone());
            continue;
        }
        let (m, loss, secs) = train_variant(v, cfg, data, device)?;
        trained.push((v.clone(), m, loss, secs));
    }
    let evaluator = quality_evaluator(cfg, &trained, device)?;
    let inference: Vec<f64> = match cfg.suite {
        Suite::Interpolation => cfg.lambda_inf.clone(),
        _ => vec![cfg.eval.lambda_inf],
    };
    for (v, m, loss, secs) in &trained {
        for &lambda_inf in &inference {
            if over() {
                report.partial = true;
                report.skipped.push(format!("{} lambda_inf={lambda_inf}", v.label));
                continue;
            }
            let ecfg = EvalConfig { lambda_inf, ..cfg.eval.clone() };
            let r = evaluate(m, bench, &cfg.sched, &ecfg, evaluator.as_ref())?;
            report.rows.push(AblationRow {
                variant: v.clone(),
                lambda_inf,
                report: r,
                final_loss: *loss,
                train_seconds: *secs,
            });
        }
    }
    if report.partial {
        log::warn!("{} suite exceeded its budget; skipped {:?}", cfg.suite, report.skipped);
    }
    Ok(report)
}

/// The blocked model that scores image quality. The systems suite trains
/// one; the sparse sweep reuses its `lambda = 0` row, whose trajectory is
/// the blocked one. Other suites report no quality.
fn quality_evaluator(cfg: &AblationConfig, trained: &[(Variant, Model, Option<f64>, f64)], device: &Device) -> Result<Option<Model>> {
    let source = trained.iter().find(|(v, ..)| match cfg.suite {
        Suite::Systems => v.system == SystemKind::Blocked,
        Suite::SparseSweep => v.lambda == 0.0,
        _ => false,
    });
    let Some((v, m, ..)) = source else { return Ok(None) };
    let denoiser = DenoiserConfig { delivery: v.delivery, ..cfg.denoiser.clone() };
    let ev = Model::new(SystemKind::Blocked, &denoiser, 0, cfg.dtype, device)?;
    ev.load_base_from(m)?;
    Ok(Some(ev))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

/// The suite's comparison table as TSV.
pub fn to_tsv(report: &AblationReport) -> String {
    let key = match report.suite {
        Suite::Systems => "system",
        Suite::Position => "position",
        Suite::SparseSweep => "lambda",
        Suite::Interpolation => "system\tlambda_inf",
    };
    let mut out = format!("{key}\tpixel_l1\tpsnr\tpatch_similarity\tsemantic_similarity\tdiversity\tasa\tquality\tfinal_loss\n");
    for r in &report.rows {
        let k = match report.suite {
            Suite::SparseSweep => format!("{}", r.variant.lambda),
            Suite::Interpolation => format!("{}\t{}", r.variant.label, r.lambda_inf),
            _ => r.variant.label.clone(),
        };
        let m = &r.report.overall;
        out += &format!(
            "{k}\t{:.6}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
            m.pixel_l1,
            m.psnr,
            m.patch_similarity,
            m.semantic_similarity,
            r.report.diversity,
            fmt_opt(r.report.transmission.as_ref().map(|t| t.asa)),
            fmt_opt(r.report.quality),
            fmt_opt(r.final_loss),
        );
    }
    if report.partial {
        out += &format!("# partial: budget exceeded, skipped {}\n", report.skipped.join(", "));
    }
    out
}

/// Writes `<suite>.tsv`, `<suite>.json`, and the suite's plots into `dir`;
/// returns the written paths.
pub fn write_report(report: &AblationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put(format!("{}.tsv", report.suite), to_tsv(report).into_bytes())?;
    put(format!("{}.json", report.suite), serde_json::to_vec_pretty(report)?)?;
    let psnr: Vec<f64> = report.rows.iter().map(|r| r.report.overall.psnr).collect();
    let plots: Vec<(String, image::RgbImage)> = match report.suite {
        Suite::Systems | Suite::Position => vec![(format!("{}_psnr.png", report.suite), bar_chart(&psnr))],
        Suite::SparseSweep => {
            let curve = |f: &dyn Fn(&AblationRow) -> Option<f64>| Series {
                name: String::new(),
                points: report.rows.iter().filter_map(|r| f(r).map(|y| (r.variant.lambda, y))).collect(),
            };
            vec![
                ("sparse_sweep_fidelity.png".into(), line_chart(&[curve(&|r| Some(r.report.overall.psnr))])),
                ("sparse_sweep_quality.png".into(), line_chart(&[curve(&|r| r.report.quality)])),
            ]
        }
        Suite::Interpolation => {
            let mut series: Vec<Series> = Vec::new();
            for r in &report.rows {
                let point = (r.lambda_inf, r.report.overall.psnr);
                match series.iter_mut().find(|s| s.name == r.variant.label) {
                    Some(s) => s.points.push(point),
                    None => series.push(Series { name: r.variant.label.clone(), points: vec![point] }),
                }
            }
            vec![("interpolation_psnr.png".into(), line_chart(&series))]
        }
    };
    for (name, img) in plots {
        let p = dir.join(&name);
        img.save(&p)?;
        written.push(p);
    }
    Ok(written)
}

/// Image strip of a signature sweep over `lambdas` for the first benchmark
/// pair, decoded to 8 bits.
pub fn interpolation_strip(
    model: &Model,
    bench: &Dataset,
    sched: &DiffusionSchedule,
    lambdas: &[f64],
    seed: u64,
) -> Result<image::RgbImage> {
    let first = bench.pairs.first().ok_or_else(|| Error::Empty("benchmark split".into()))?;
    let b = Batch::from_pairs(&[first], None, model.dtype(), model.device())?;
    let req = CustomizationRequest::new(b.scene, b.mask, b.subject, seed);
    let images = signature_sweep(&req, model, sched, lambdas)?;
    tensor_to_rgb(image_strip(&images)?.tensor())
}
