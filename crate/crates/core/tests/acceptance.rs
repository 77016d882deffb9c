//! Acceptance suite: runs the seven criteria and prints one PASS/FAIL line
//! for each. Trained models are cached under the cargo target tmpdir, so a
//! second run only pays for evaluation.
//!
//! `ACCEPTANCE_STEPS` overrides the training budget per model. A failing
//! criterion is reported on its line; with `ACCEPTANCE_STRICT=1` it also
//! fails the process.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use candle_core::{DType, Device, D};
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::checkpoint::{load_checkpoint, save_checkpoint};
use recycled_diffusion::codec::Codec;
use recycled_diffusion::compositor::{customize_region, inversion_round_trip, CustomizationRequest};
use recycled_diffusion::data::{Batch, Dataset, SynthSpec, BENCHMARK_START};
use recycled_diffusion::denoiser::{DenoiserConfig, ForwardOptions, Mode, SignatureCache};
use recycled_diffusion::eval::{evaluate, planes, region_psnr, EvalConfig, EvalReport};
use recycled_diffusion::grid::LatentGrid;
use recycled_diffusion::nn::{ParamStore, SelfAttention};
use recycled_diffusion::recycling::{
    cfg_combine, gemini_step, guided_step, Conditioning, GeminiInputs, GeminiOptions, SparsePolicy,
};
use recycled_diffusion::rng;
use recycled_diffusion::schedule::{forward_diffuse, make_schedule, sampler_step, DiffusionSchedule};
use recycled_diffusion::train::{init_model, train, TrainConfig};

const DEFAULT_STEPS: usize = 1500;
const BATCH: usize = 8;
const TRAIN_PAIRS: u64 = 2000;
const BENCH_PAIRS: u64 = 32;
const EVAL_STEPS: usize = 25;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn bits(g: &LatentGrid) -> Vec<u64> {
    g.to_vec().unwrap().iter().map(|v| v.to_bits()).collect()
}

/// Perturbed desk-scale model so every output layer is live.
fn live_model(kind: SystemKind) -> Model {
    let m = Model::new(kind, &DenoiserConfig::desk(), 3, DType::F32, &Device::Cpu).unwrap();
    m.base_params.perturb(1, 0.05).unwrap();
    m
}

fn bench(n: u64) -> Dataset {
    Dataset::generate(&SynthSpec::desk(1), BENCHMARK_START..BENCHMARK_START + n, "benchmark").unwrap()
}

fn batch_of(ds: &Dataset, dtype: DType) -> Batch {
    let refs: Vec<_> = ds.pairs.iter().collect();
    Batch::from_pairs(&refs, None, dtype, &Device::Cpu).unwrap()
}

struct Step {
    scene: LatentGrid,
    subject: LatentGrid,
    noisy: LatentGrid,
    z_t: LatentGrid,
    mask: recycled_diffusion::grid::LatentMask,
    tokens: recycled_diffusion::denoiser::SemanticTokens,
    ts: Vec<usize>,
}

impl Step {
    fn new(model: &Model, batch: &Batch) -> Self {
        let codec = model.cfg.codec();
        let scene = codec.encode(&batch.scene).unwrap();
        let subject = codec.encode(&batch.subject).unwrap();
        let mask = codec.encode_mask(&batch.mask).unwrap().for_channels(3).unwrap();
        let masked = scene.with_tensor((scene.tensor() * &mask.blend).unwrap()).unwrap();
        let tokens = model.base.encode_semantic(&subject, &masked).unwrap();
        let sched = make_schedule(1000, 1e-4, 0.02, 10).unwrap();
        let (b, c, h, w) = scene.dims();
        let mut r = rng::stream(8, &[]);
        let mut noise = || scene.with_tensor(rng::normal_tensor(&mut r, &[b, c, h, w], DType::F32, &Device::Cpu).unwrap()).unwrap();
        let t = 400;
        let z_t = forward_diffuse(&scene, t, &noise(), &sched).unwrap();
        let noisy = forward_diffuse(&subject, t, &noise(), &sched).unwrap();
        Self { scene, subject, noisy, z_t, mask, tokens, ts: vec![t; b] }
    }

    fn inputs(&self) -> GeminiInputs<'_> {
        GeminiInputs {
            z_t: &self.z_t,
            scene: &self.scene,
            mask: &self.mask,
            subject: &self.subject,
            noisy_subject: &self.noisy,
            tokens: Some(&self.tokens),
            ts: &self.ts,
        }
    }
}

fn criterion_1() -> Check {
    let model = live_model(SystemKind::Symbiotic);
    let ds = bench(4);
    let batch = batch_of(&ds, DType::F32);

    // Background blend: preserved pixels come back exactly.
    let sched = make_schedule(1000, 1e-4, 0.02, 5).unwrap();
    let req = CustomizationRequest::new(batch.scene.clone(), batch.mask.clone(), batch.subject.clone(), 1);
    let out = customize_region(&req, &model, &sched).unwrap();
    let codec = model.cfg.codec();
    let keep = codec.decode(&LatentGrid::latent(codec.encode_mask(&batch.mask).unwrap().for_channels(3).unwrap().blend).unwrap()).unwrap();
    let (o, s, k) = (out.to_vec().unwrap(), batch.scene.to_vec().unwrap(), keep.to_vec().unwrap());
    let (mut bg_err, mut region_change) = (0.0f64, 0.0f64);
    for i in 0..o.len() {
        if k[i] >= 0.5 {
            bg_err = bg_err.max((o[i] - s[i]).abs());
        } else {
            region_change = region_change.max((o[i] - s[i]).abs());
        }
    }
    ensure(bg_err <= 1e-6, format!("background error {bg_err:e}"))?;
    ensure(region_change > 0.0, "region unchanged".into())?;

    // Mutual attention rows sum to one.
    let store = ParamStore::new(5, DType::F32, &Device::Cpu);
    let site = SelfAttention::new(&store.root(), 16, 2, 8).unwrap();
    let mut r = rng::stream(2, &[]);
    let x = rng::normal_tensor(&mut r, &[2, 16, 8, 8], DType::F32, &Device::Cpu).unwrap();
    let cached = rng::normal_tensor(&mut r, &[2, 64, 16], DType::F32, &Device::Cpu).unwrap();
    let w = site.forward(&x, Some(&cached)).unwrap().weights;
    let sums: Vec<f32> = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let row_err = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0f32, f32::max);
    ensure(row_err <= 1e-5, format!("row sum error {row_err:e}"))?;

    // Empty cache reduces to the blocked flow, bitwise, both at the network
    // and at the step level.
    let step = Step::new(&model, &batch);
    let gen = recycled_diffusion::denoiser::compose_input(&step.z_t, &step.scene, &step.mask).unwrap();
    let empty = SignatureCache::new(model.base.delivery_sites().to_vec(), step.ts.clone());
    let a = model.base.forward(&gen, &step.ts, Some(&step.tokens), Mode::Generate(&empty), ForwardOptions::default()).unwrap();
    let b = model.base.forward(&gen, &step.ts, Some(&step.tokens), Mode::Blocked, ForwardOptions::default()).unwrap();
    ensure(bits(&a.eps) == bits(&b.eps), "empty cache differs from blocked flow".into())?;
    let blocked = Model::new(SystemKind::Blocked, &model.cfg, 3, DType::F32, &Device::Cpu).unwrap();
    blocked.load_base_from(&model).unwrap();
    let none = GeminiOptions { policy: SparsePolicy::new(0.0, 4).unwrap(), ..GeminiOptions::full() };
    let e0 = gemini_step(&model, &step.inputs(), &none).unwrap().eps;
    let eb = gemini_step(&blocked, &step.inputs(), &GeminiOptions::full()).unwrap().eps;
    ensure(bits(&e0) == bits(&eb), "threshold 0 differs from the blocked system".into())?;

    // Threshold bounds and keep rate.
    let all = SparsePolicy::new(1.0, 4).unwrap();
    let none = SparsePolicy::new(0.0, 4).unwrap();
    ensure(
        (0..10_000).all(|d| all.keeps(d, 4).iter().all(|&k| k) && none.keeps(d, 4).iter().all(|&k| !k)),
        "threshold bounds".into(),
    )?;
    let full = gemini_step(&model, &step.inputs(), &GeminiOptions { policy: all, ..GeminiOptions::full() }).unwrap();
    ensure(full.delivered == model.base.delivery_sites().len(), format!("{} sites delivered at 1", full.delivered))?;
    let p = SparsePolicy::new(0.6, 21).unwrap();
    let kept = (0..10_000).filter(|&d| p.keeps(d, 1)[0]).count();
    let rate = kept as f64 / 10_000.0;
    ensure((rate - 0.6).abs() <= 0.02, format!("keep rate {rate}"))?;

    // Guidance degenerate cases.
    let opts = GeminiOptions::full();
    let cond = gemini_step(&model, &step.inputs(), &opts).unwrap().eps;
    let uncond = gemini_step(&model, &step.inputs(), &GeminiOptions { condition: Conditioning::Null, ..opts }).unwrap().eps;
    ensure(bits(&cfg_combine(&uncond, &cond, 0.0).unwrap()) == bits(&uncond), "w=0".into())?;
    ensure(bits(&cfg_combine(&uncond, &cond, 1.0).unwrap()) == bits(&cond), "w=1".into())?;
    ensure(bits(&guided_step(&model, &step.inputs(), &opts, 1.0).unwrap().eps) == bits(&cond), "guided w=1".into())?;
    ensure(bits(&guided_step(&model, &step.inputs(), &opts, 0.0).unwrap().eps) == bits(&uncond), "guided w=0".into())?;

    Ok(format!("background {bg_err:.1e}, row sums {row_err:.1e}, keep rate {rate:.4}"))
}

fn criterion_2() -> Check {
    let (model, p, cfg) = common::gradcheck_setup(1.0);
    let n = model.num_params();
    ensure(n <= 1000, format!("{n} parameters"))?;
    let (analytic, numeric) = common::gradients(&model, &p, &cfg);
    let err = common::rel_err(&analytic, &numeric);
    let worst = common::worst_err(&analytic, &numeric);
    ensure(err < 1e-3, format!("relative error {err:e}"))?;
    ensure(worst < 1e-3, format!("worst element error {worst:e}"))?;
    // The extraction status must be in the graph: dropping it changes the
    // gradient.
    let (_, p0, cfg0) = common::gradcheck_setup(0.0);
    let (gen_only, _) = common::gradients(&model, &p0, &cfg0);
    let shared = common::rel_err(&analytic, &gen_only);
    ensure(shared > 1e-6, "extraction status does not reach the gradient".into())?;
    Ok(format!("{n} parameters, relative error {err:.2e}, worst element {worst:.2e}"))
}

fn sampler_oracle() -> Result<f64, String> {
    let sched = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
    let mut r = rng::stream(12, &[]);
    let z0 = LatentGrid::latent(rng::normal_tensor(&mut r, &[2, 3, 8, 8], DType::F64, &Device::Cpu).unwrap()).unwrap();
    let mut worst = 0.0f64;
    for t in (0..1000).step_by(7).chain([999]) {
        let eps = z0.with_tensor(rng::normal_tensor(&mut r, &[2, 3, 8, 8], DType::F64, &Device::Cpu).unwrap()).unwrap();
        let z_t = forward_diffuse(&z0, t, &eps, &sched).unwrap();
        let back = sampler_step(&z_t, t, None, &eps, &sched).unwrap();
        let err = (back.tensor() - z0.tensor()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        worst = worst.max(err);
    }
    ensure(worst <= 1e-6, format!("perfect-noise chain error {worst:e}"))?;
    Ok(worst)
}

fn criterion_3(zoo: &Zoo) -> Check {
    let worst = sampler_oracle()?;
    let model = zoo.get("symbiotic-0.6")?;
    let ds = bench(8);
    let batch = batch_of(&ds, DType::F32);
    let req = CustomizationRequest::new(batch.scene.clone(), batch.mask, batch.subject, 0);
    let sched = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
    let (_, back) = inversion_round_trip(&req, model, &sched).unwrap();
    let (a, b) = (planes(&batch.scene).unwrap(), planes(&back).unwrap());
    let everywhere = vec![true; a[0].h * a[0].w];
    let psnr: Vec<f64> = a.iter().zip(&b).map(|(x, y)| region_psnr(x, y, &everywhere)).collect();
    let mean = psnr.iter().sum::<f64>() / psnr.len() as f64;
    let min = psnr.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(mean > 30.0, format!("inversion PSNR mean {mean:.2} dB (min {min:.2})"))?;
    Ok(format!("oracle error {worst:.1e}, inversion PSNR mean {mean:.2} dB, min {min:.2} dB"))
}

fn criterion_4(zoo: &Zoo) -> Check {
    let s = zoo.report("symbiotic-0.6")?;
    let b = zoo.report("blocked")?;
    let r = zoo.report("referencenet")?;
    let (fs, fb, fr) = (s.overall.psnr, b.overall.psnr, r.overall.psnr);
    let soft_fid = if fs >= fr { "holds" } else { "does not hold" };
    let soft_div = if s.diversity > r.diversity { "holds" } else { "does not hold" };
    let detail = format!(
        "region PSNR symbiotic {fs:.3} / blocked {fb:.3} / referencenet {fr:.3}; \
         soft: fidelity vs referencenet {soft_fid}, diversity {:.4} vs {:.4} {soft_div}",
        s.diversity, r.diversity
    );
    ensure(fs > fb, detail.clone())?;
    Ok(detail)
}

fn criterion_5(zoo: &Zoo) -> Check {
    let trans = |name: &str| zoo.report(name).and_then(|r| r.transmission.clone().ok_or(format!("{name} has no trace")));
    let (s, b, r) = (trans("symbiotic-0.6")?, trans("blocked")?, trans("referencenet")?);
    ensure(b.asa == 0.0, format!("blocked ASA {}", b.asa))?;
    let probes: Vec<String> = DenoiserConfig::desk().probe_sites().iter().map(|s| s.to_string()).collect();
    let mut wins = 0;
    let mut sld = Vec::new();
    for p in &probes {
        let (a, c) = (s.sld_per_site.get(p).copied().flatten(), r.sld_per_site.get(p).copied().flatten());
        if let (Some(a), Some(c)) = (a, c) {
            wins += usize::from(a <= c);
            sld.push(format!("{p} {a:.4}/{c:.4}"));
        }
    }
    let detail = format!("ASA symbiotic {:.4} / referencenet {:.4} / blocked 0; SLD {}", s.asa, r.asa, sld.join(", "));
    ensure(s.asa > r.asa, detail.clone())?;
    ensure(wins >= 3, format!("SLD lower at {wins} of {} probes; {detail}", probes.len()))?;
    Ok(detail)
}

fn criterion_6(zoo: &Zoo) -> Check {
    let (s6, s1, s0) = (zoo.report("symbiotic-0.6")?, zoo.report("symbiotic-1.0")?, zoo.report("symbiotic-0.0")?);
    let q = |r: &EvalReport| r.quality.unwrap_or(f64::NAN);
    let detail = format!(
        "quality 0.6 {:.5} / 1.0 {:.5}; region PSNR 0.6 {:.3} / 0 {:.3}",
        q(s6),
        q(s1),
        s6.overall.psnr,
        s0.overall.psnr
    );
    ensure(q(s6) >= q(s1), detail.clone())?;
    ensure(s6.overall.psnr > s0.overall.psnr, detail.clone())?;
    Ok(detail)
}

fn rdiff(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rdiff")).args(args).env("RUST_LOG", "error").output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("rdiff {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let (x, y) = (std::fs::read(a.join(n)).map_err(|e| e.to_string())?, std::fs::read(b.join(n)).map_err(|e| e.to_string())?);
        ensure(x == y, format!("{n} differs on re-run"))?;
    }
    Ok(())
}

fn criterion_7(zoo: &Zoo) -> Check {
    // Training twice from the same config gives identical weights.
    let data = Dataset::generate(&SynthSpec::desk(2), 0..8, "train").unwrap();
    let sched = make_schedule(1000, 1e-4, 0.02, 5).unwrap();
    let small = DenoiserConfig { base_channels: 8, ..DenoiserConfig::desk() };
    let weights = |system| {
        let cfg = TrainConfig { steps: 3, batch_size: 2, system, ..Default::default() };
        let m = init_model(&cfg, &small, DType::F32, &Device::Cpu).unwrap();
        train(&m, &data, &sched, &cfg, |_, _| true, |_, _| Ok(())).unwrap();
        m.vars().iter().flat_map(|v| v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()).map(f32::to_bits).collect::<Vec<_>>()
    };
    for system in SystemKind::ALL {
        ensure(weights(system) == weights(system), format!("{system} training not repeatable"))?;
    }

    // Checkpoint round trip reproduces the evaluation report.
    let model = zoo.get("symbiotic-0.6")?;
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.safetensors");
    save_checkpoint(model, 1, &path).unwrap();
    let (back, _) = load_checkpoint(&path, &Device::Cpu).unwrap();
    let ds = bench(4);
    let cfg = EvalConfig { batch_size: 4, diversity_pairs: 1, ..Default::default() };
    let sched = make_schedule(1000, 1e-4, 0.02, 10).unwrap();
    let before = evaluate(model, &ds, &sched, &cfg, Some(model)).unwrap();
    let after = evaluate(&back, &ds, &sched, &cfg, Some(&back)).unwrap();
    ensure(before == after, "evaluation report changed after reload".into())?;

    // Commands re-run from their recorded config.
    let d = tmp.path();
    let ck = path.to_str().unwrap();
    let (g1, g2) = (d.join("g1"), d.join("g2"));
    rdiff(&["gen-data", "--count", "6", "--out", g1.to_str().unwrap()])?;
    rdiff(&["gen-data", "--config", g1.join("resolved.cfg").to_str().unwrap(), "--out", g2.to_str().unwrap()])?;
    let sums = |p: &Path| recycled_diffusion::data::dataset_checksum(p).unwrap();
    ensure(sums(&g1) == sums(&g2), "gen-data re-run differs".into())?;
    let p = &ds.pairs[0];
    let (scene, mask, subject) = (d.join("s.png"), d.join("m.png"), d.join("l.png"));
    p.scene.save(&scene).unwrap();
    p.mask.save(&mask).unwrap();
    p.subject.save(&subject).unwrap();
    let (c1, c2) = (d.join("c1"), d.join("c2"));
    rdiff(&[
        "customize", "--checkpoint", ck, "--scene", scene.to_str().unwrap(), "--mask", mask.to_str().unwrap(),
        "--subject", subject.to_str().unwrap(), "--sample-steps", "10", "--seed", "5", "--out", c1.to_str().unwrap(),
    ])?;
    rdiff(&["customize", "--config", c1.join("resolved.cfg").to_str().unwrap(), "--out", c2.to_str().unwrap()])?;
    same_files(&c1, &c2, &["output.png", "output.png.json"])?;
    let (e1, e2) = (d.join("e1"), d.join("e2"));
    let eval = ["--checkpoint", ck, "--bench-count", "2", "--diversity-pairs", "1", "--sample-steps", "5"];
    rdiff(&[&["evaluate", "--out", e1.to_str().unwrap()][..], &eval].concat())?;
    rdiff(&["evaluate", "--config", e1.join("resolved.cfg").to_str().unwrap(), "--out", e2.to_str().unwrap()])?;
    same_files(&e1, &e2, &["report.json", "report.tsv"])?;
    Ok("training, checkpoint reload, gen-data, customize and evaluate re-runs are bitwise identical".into())
}

/// Trained systems shared by criteria 3 to 7, with their evaluations.
struct Zoo {
    models: BTreeMap<String, Result<Model, String>>,
    reports: BTreeMap<String, Result<EvalReport, String>>,
}

impl Zoo {
    fn get(&self, name: &str) -> Result<&Model, String> {
        match self.models.get(name) {
            Some(Ok(m)) => Ok(m),
            Some(Err(e)) => Err(format!("{name}: {e}")),
            None => Err(format!("{name} not trained")),
        }
    }

    fn report(&self, name: &str) -> Result<&EvalReport, String> {
        match self.reports.get(name) {
            Some(Ok(r)) => Ok(r),
            Some(Err(e)) => Err(format!("{name}: {e}")),
            None => Err(format!("{name} not evaluated")),
        }
    }
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn train_cached(system: SystemKind, lambda: f64, steps: usize, data: &Dataset, sched: &DiffusionSchedule) -> Result<Model, String> {
    let path = cache_dir().join(format!("{system}-{lambda}-{steps}x{BATCH}.safetensors"));
    if let Ok((m, info)) = load_checkpoint(&path, &Device::Cpu) {
        if info.step == steps && m.kind == system {
            eprintln!("  reusing {}", path.display());
            return Ok(m);
        }
    }
    let cfg = TrainConfig { steps, batch_size: BATCH, system, lambda, ..Default::default() };
    let model = init_model(&cfg, &DenoiserConfig::desk(), DType::F32, &Device::Cpu).map_err(|e| e.to_string())?;
    let report = train(
        &model,
        data,
        sched,
        &cfg,
        |i, l| {
            if i % 100 == 0 {
                eprintln!("  {system} lambda {lambda} step {i} loss {l:.4}");
            }
            true
        },
        |_, _| Ok(()),
    )
    .map_err(|e| e.to_string())?;
    let tail = steps / 10;
    eprintln!("  {system} lambda {lambda}: {:.0}s, final loss {:.4}", report.seconds, report.mean_loss(steps - tail, steps));
    std::fs::create_dir_all(cache_dir()).map_err(|e| e.to_string())?;
    save_checkpoint(&model, steps, &path).map_err(|e| e.to_string())?;
    Ok(model)
}

fn build_zoo() -> Zoo {
    let steps = std::env::var("ACCEPTANCE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(DEFAULT_STEPS);
    let t = Instant::now();
    let spec = SynthSpec::desk(1);
    let data = Dataset::generate(&spec, 0..TRAIN_PAIRS, "train").unwrap();
    let sched = make_schedule(1000, 1e-4, 0.02, EVAL_STEPS).unwrap();
    let mut models = BTreeMap::new();
    for (name, system, lambda) in [
        ("symbiotic-0.6", SystemKind::Symbiotic, 0.6),
        ("blocked", SystemKind::Blocked, 0.6),
        ("referencenet", SystemKind::ReferenceNet, 1.0),
        ("symbiotic-1.0", SystemKind::Symbiotic, 1.0),
    ] {
        let m = catch_unwind(AssertUnwindSafe(|| train_cached(system, lambda, steps, &data, &sched)))
            .unwrap_or_else(|_| Err("training panicked".into()));
        models.insert(name.to_string(), m);
    }
    // Training the symbiotic system at threshold 0 never delivers a
    // signature, so its trajectory is the blocked one; reuse those weights.
    let s0 = models["blocked"].as_ref().map_err(Clone::clone).and_then(|b| {
        let m = Model::new(SystemKind::Symbiotic, &b.cfg, 0, DType::F32, &Device::Cpu).map_err(|e| e.to_string())?;
        m.load_base_from(b).map_err(|e| e.to_string())?;
        Ok(m)
    });
    models.insert("symbiotic-0.0".into(), s0);
    eprintln!("  models ready after {:.0}s", t.elapsed().as_secs_f64());

    let bench = bench(BENCH_PAIRS);
    let cfg = EvalConfig { diversity_pairs: 4, ..Default::default() };
    let mut reports = BTreeMap::new();
    let evaluator = models["blocked"].as_ref().ok();
    for (name, m) in &models {
        let t = Instant::now();
        let r = match (m, evaluator) {
            (Ok(m), Some(ev)) => catch_unwind(AssertUnwindSafe(|| evaluate(m, &bench, &sched, &cfg, Some(ev)).map_err(|e| e.to_string())))
                .unwrap_or_else(|_| Err("evaluation panicked".into())),
            (Err(e), _) => Err(e.clone()),
            (_, None) => Err("no quality evaluator".into()),
        };
        if let Ok(r) = &r {
            eprintln!(
                "  {name}: PSNR {:.3} L1 {:.4} SSIM {:.4} sem {:.4} div {:.4} quality {:.5} ({:.0}s)",
                r.overall.psnr,
                r.overall.pixel_l1,
                r.overall.patch_similarity,
                r.overall.semantic_similarity,
                r.diversity,
                r.quality.unwrap_or(f64::NAN),
                t.elapsed().as_secs_f64()
            );
        }
        reports.insert(name.clone(), r);
    }
    Zoo { models, reports }
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    let pass = result.is_ok();
    let (tag, detail) = match result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} [{name}]: {tag} ({secs:.1}s) {detail}");
    pass
}

fn main() {
    // Quiet the panic hook; failures are reported on the criterion line.
    std::panic::set_hook(Box::new(|_| {}));
    let mut pass = vec![run(1, "unit properties", criterion_1), run(2, "gradient check", criterion_2)];
    eprintln!("training and evaluating the shared systems");
    let zoo = build_zoo();
    pass.push(run(3, "sampler oracle and inversion", || criterion_3(&zoo)));
    pass.push(run(4, "system ablation", || criterion_4(&zoo)));
    pass.push(run(5, "transmission", || criterion_5(&zoo)));
    pass.push(run(6, "sparse threshold", || criterion_6(&zoo)));
    pass.push(run(7, "determinism and persistence", || criterion_7(&zoo)));
    let failed = pass.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria pass", pass.len() - failed, pass.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
