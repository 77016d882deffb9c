//! The `rdiff` command line. Every subcommand takes `--config FILE` plus one
//! flag per configuration key, writes its resolved configuration next to
//! its outputs, and exits 0 on success, 2 on usage or configuration errors,
//! and 1 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use clap::{Arg, ArgAction, Command};
use serde_json::json;

use crate::ablation::{interpolation_strip, run_ablation, train_variant, variants, write_report, AblationConfig, Suite};
use crate::baselines::Model;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::compositor::{customize_region, image_strip, outpaint, signature_sweep, CustomizationRequest};
use crate::config::{RunConfig, SCHEMA};
use crate::data::{
    dataset_checksum, fit_mask, fit_scene, fit_subject, load_mask, load_rgb, mask_to_tensor, rgb_to_tensor,
    tensor_to_rgb, Dataset, BENCHMARK_START,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, generate_outputs};
use crate::grid::{LatentGrid, RegionMask};
use crate::instrument::{asa_accumulate, sld_compute, AttentionTrace};
use crate::train::train;

pub const COMMANDS: [(&str, &str); 8] = [
    ("gen-data", "generate a synthetic dataset split"),
    ("train", "train a system on a dataset"),
    ("customize", "customize the masked region of a scene with a subject"),
    ("outpaint", "keep the subject region and regenerate the background"),
    ("instrument", "record ASA and SLD on benchmark pairs"),
    ("evaluate", "score a checkpoint on the benchmark"),
    ("ablate", "run an ablation suite"),
    ("sweep", "customize once per inference threshold and write a strip"),
];

pub fn command() -> Command {
    let mut root = Command::new("rdiff")
        .about("Subject-driven region customization with a self-recycled denoiser")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override it"),
        );
        for k in SCHEMA {
            let help = if k.default.is_empty() { k.help.to_string() } else { format!("{} [default: {}]", k.help, k.default) };
            sub = sub.arg(Arg::new(k.name).long(k.name).value_name("VALUE").action(ArgAction::Set).help(help));
        }
        root = root.subcommand(sub);
    }
    root
}

/// A failed command and its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: Error) -> Failure {
    Failure { code: 1, error }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the command, and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let Some((name, sub)) = matches.subcommand() else { return 2 };
    let flags: Vec<(String, String)> = SCHEMA
        .iter()
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let result = RunConfig::resolve(name, file.as_deref(), &flags).map_err(usage).and_then(|cfg| dispatch(name, &cfg));
    match result {
        Ok(()) => 0,
        Err(f) => {
            let kind = if f.code == 2 { "config" } else { "runtime" };
            eprintln!("error[{kind}]: {}", f.error);
            f.code
        }
    }
}

pub fn dispatch(name: &str, cfg: &RunConfig) -> Outcome {
    match name {
        "gen-data" => gen_data(cfg),
        "train" => train_cmd(cfg),
        "customize" => customize_cmd(cfg, false),
        "outpaint" => customize_cmd(cfg, true),
        "instrument" => instrument_cmd(cfg),
        "evaluate" => evaluate_cmd(cfg),
        "ablate" => ablate_cmd(cfg),
        "sweep" => sweep_cmd(cfg),
        other => Err(usage(Error::Config(format!("unknown command `{other}`")))),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    cfg.write_resolved(&out)?;
    Ok(out)
}

fn gen_data(cfg: &RunConfig) -> Outcome {
    let spec = cfg.synth_spec(cfg.int("seed")).map_err(usage)?;
    let count = cfg.int("count");
    if count == 0 {
        return Err(usage(Error::Config("count must be positive".into())));
    }
    let split = cfg.text("split");
    let start = if split == "benchmark" { BENCHMARK_START } else { 0 };
    let out = cfg.out_dir();
    let ds = Dataset::generate(&spec, start..start + count, split).map_err(runtime)?;
    ds.save(&out).map_err(runtime)?;
    cfg.write_resolved(&out).map_err(runtime)?;
    let sum = dataset_checksum(&out).map_err(runtime)?;
    println!("{count} {split} pairs in {} sha256={sum}", out.display());
    Ok(())
}

fn train_data(cfg: &RunConfig) -> std::result::Result<Dataset, Failure> {
    match cfg.path("data") {
        Some(p) => Dataset::load(&p).map_err(runtime),
        None => {
            let spec = cfg.synth_spec(cfg.int("data-seed")).map_err(usage)?;
            Dataset::generate(&spec, 0..cfg.int("count"), "train").map_err(runtime)
        }
    }
}

fn bench_data(cfg: &RunConfig) -> std::result::Result<Dataset, Failure> {
    match cfg.path("benchmark") {
        Some(p) => Dataset::load(&p).map_err(runtime),
        None => {
            let spec = cfg.synth_spec(cfg.int("data-seed")).map_err(usage)?;
            let n = cfg.int("bench-count");
            Dataset::generate(&spec, BENCHMARK_START..BENCHMARK_START + n, "benchmark").map_err(runtime)
        }
    }
}

/// The checkpoint's model, or a fresh one of the configured system.
fn load_model(cfg: &RunConfig) -> std::result::Result<Model, Failure> {
    match cfg.path("checkpoint") {
        Some(p) => load_checkpoint(&p, &Device::Cpu).map(|(m, _)| m).map_err(runtime),
        None => {
            log::warn!("no checkpoint given; using an untrained {} model", cfg.text("system"));
            let system = cfg.system().map_err(usage)?;
            let denoiser = cfg.denoiser().map_err(usage)?;
            Model::new(system, &denoiser, cfg.int("seed"), cfg.dtype(), &Device::Cpu).map_err(runtime)
        }
    }
}

fn train_cmd(cfg: &RunConfig) -> Outcome {
    let tcfg = cfg.train_config().map_err(usage)?;
    let denoiser = cfg.denoiser().map_err(usage)?;
    let sched = cfg.schedule().map_err(usage)?;
    let data = train_data(cfg)?;
    let out = prepare_out(cfg).map_err(runtime)?;
    let model = Model::new(tcfg.system, &denoiser, tcfg.seed, cfg.dtype(), &Device::Cpu).map_err(runtime)?;
    log::info!("training {} ({} parameters) on {} pairs", tcfg.system, model.num_params(), data.len());
    let report = train(
        &model,
        &data,
        &sched,
        &tcfg,
        |step, loss| {
            if step % 50 == 0 {
                log::info!("step {step} loss {loss:.5}");
            }
            true
        },
        |step, m| save_checkpoint(m, step, &out.join(format!("step-{step:06}.safetensors"))),
    )
    .map_err(runtime)?;
    save_checkpoint(&model, tcfg.steps, &out.join("checkpoint.safetensors")).map_err(runtime)?;
    let losses: String = std::iter::once("step\tloss\n".to_string())
        .chain(report.losses.iter().enumerate().map(|(i, l)| format!("{i}\t{l}\n")))
        .collect();
    write(&out.join("losses.tsv"), losses).map_err(runtime)?;
    println!(
        "trained {} steps in {:.1}s, final loss {:.5}, checkpoint {}",
        report.losses.len(),
        report.seconds,
        report.losses.last().copied().unwrap_or(f64::NAN),
        out.join("checkpoint.safetensors").display()
    );
    Ok(())
}

struct Inputs {
    request: CustomizationRequest,
    aspect: f64,
}

fn read_inputs(cfg: &RunConfig, model: &Model) -> std::result::Result<Inputs, Failure> {
    let need = |k: &str| cfg.path(k).ok_or_else(|| usage(Error::Config(format!("--{k} is required"))));
    let (scene_p, mask_p, subject_p) = (need("scene")?, need("mask")?, need("subject")?);
    let size = model.cfg.image_size as u32;
    let (dtype, dev) = (model.dtype(), model.device());
    let scene = fit_scene(&load_rgb(&scene_p).map_err(runtime)?, size);
    let mask = fit_mask(&load_mask(&mask_p).map_err(runtime)?, size);
    let (subject, aspect) = fit_subject(&load_rgb(&subject_p).map_err(runtime)?, size);
    let build = || -> Result<CustomizationRequest> {
        let px = |t: Tensor| -> Result<LatentGrid> { LatentGrid::pixel(t.unsqueeze(0)?) };
        let mut req = CustomizationRequest::new(
            px(rgb_to_tensor(&scene, dtype, dev)?)?,
            RegionMask::new(mask_to_tensor(&mask, dtype, dev)?.unsqueeze(0)?)?,
            px(rgb_to_tensor(&subject, dtype, dev)?)?,
            cfg.int("seed"),
        );
        req.guidance = cfg.float("guidance");
        req.lambda_inf = cfg.float("lambda-inf");
        req.subject_aspect = Some(aspect);
        Ok(req)
    };
    let request = build().map_err(runtime)?;
    request.validate().map_err(usage)?;
    Ok(Inputs { request, aspect })
}

fn sidecar(cfg: &RunConfig, model: &Model, command: &str, extra: serde_json::Value) -> serde_json::Value {
    let mut v = json!({
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.int("seed"),
        "system": model.kind.to_string(),
        "checkpoint": cfg.text("checkpoint"),
        "guidance": cfg.float("guidance"),
        "lambda_inf": cfg.float("lambda-inf"),
        "sample_steps": cfg.usize("sample-steps"),
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v
}

fn customize_cmd(cfg: &RunConfig, reverse: bool) -> Outcome {
    let sched = cfg.schedule().map_err(usage)?;
    let model = load_model(cfg)?;
    let inputs = read_inputs(cfg, &model)?;
    let out = prepare_out(cfg).map_err(runtime)?;
    let image = if reverse {
        outpaint(&inputs.request, &model, &sched)
    } else {
        customize_region(&inputs.request, &model, &sched)
    }
    .map_err(runtime)?;
    let name = cfg.text("output");
    let path = out.join(name);
    tensor_to_rgb(image.tensor()).and_then(|img| Ok(img.save(&path)?)).map_err(runtime)?;
    let command = if reverse { "outpaint" } else { "customize" };
    let meta = sidecar(cfg, &model, command, json!({ "output": name, "subject_aspect": inputs.aspect }));
    write(&out.join(format!("{name}.json")), serde_json::to_vec_pretty(&meta).map_err(|e| runtime(e.into()))?)
        .map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig) -> Outcome {
    let sched = cfg.schedule().map_err(usage)?;
    let lambdas = cfg.floats("lambdas");
    if lambdas.windows(2).any(|w| w[0] > w[1]) || lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(usage(Error::Config("lambdas must be ascending values in [0, 1]".into())));
    }
    let model = load_model(cfg)?;
    let inputs = read_inputs(cfg, &model)?;
    let out = prepare_out(cfg).map_err(runtime)?;
    let images = signature_sweep(&inputs.request, &model, &sched, &lambdas).map_err(runtime)?;
    let name = cfg.text("output");
    let strip = image_strip(&images).and_then(|s| tensor_to_rgb(s.tensor())).map_err(runtime)?;
    strip.save(out.join(name)).map_err(|e| runtime(e.into()))?;
    let meta = sidecar(cfg, &model, "sweep", json!({ "output": name, "lambdas": lambdas, "subject_aspect": inputs.aspect }));
    write(&out.join(format!("{name}.json")), serde_json::to_vec_pretty(&meta).map_err(|e| runtime(e.into()))?)
        .map_err(runtime)?;
    println!("wrote {} ({} thresholds)", out.join(name).display(), lambdas.len());
    Ok(())
}

fn instrument_cmd(cfg: &RunConfig) -> Outcome {
    let sched = cfg.schedule().map_err(usage)?;
    let ecfg = cfg.eval_config().map_err(usage)?;
    let group_by = cfg.group_by();
    let model = load_model(cfg)?;
    let bench = bench_data(cfg)?;
    let out = prepare_out(cfg).map_err(runtime)?;
    let run = || -> Result<()> {
        let outputs = generate_outputs(&model, &bench, &sched, &ecfg)?;
        let traces: Vec<AttentionTrace> = outputs.into_iter().map(|(_, _, t)| t).collect();
        let table = asa_accumulate(&traces, group_by)?;
        write(&out.join("asa.tsv"), table.to_tsv(&model.kind.to_string()))?;
        let mut sld = String::from("site\tsld\n");
        for (site, v) in sld_compute(&traces) {
            sld += &format!("{site}\t{}\n", v.map_or("-".into(), |x| format!("{x:.6}")));
        }
        write(&out.join("sld.tsv"), sld)?;
        let summary = crate::eval::transmission(&traces, &model)?;
        write(&out.join("transmission.json"), serde_json::to_vec_pretty(&summary)?)?;
        println!("ASA over delivery sites {:.4} (region {:.4}, background {:.4})", summary.asa, summary.asa_region, summary.asa_background);
        Ok(())
    };
    run().map_err(runtime)
}

fn evaluate_cmd(cfg: &RunConfig) -> Outcome {
    let sched = cfg.schedule().map_err(usage)?;
    let ecfg = cfg.eval_config().map_err(usage)?;
    if cfg.path("checkpoint").is_none() {
        return Err(usage(Error::Config("--checkpoint is required".into())));
    }
    let model = load_model(cfg)?;
    let evaluator = match cfg.path("evaluator") {
        Some(p) => Some(load_checkpoint(&p, &Device::Cpu).map_err(runtime)?.0),
        None => None,
    };
    let bench = bench_data(cfg)?;
    let out = prepare_out(cfg).map_err(runtime)?;
    let report = evaluate(&model, &bench, &sched, &ecfg, evaluator.as_ref()).map_err(runtime)?;
    let mut tsv = String::from("category\tcount\tpixel_l1\tpsnr\tpatch_similarity\tsemantic_similarity\n");
    let rows = report.per_category.iter().map(|(c, m)| (c.to_string(), m)).chain([("all".to_string(), &report.overall)]);
    for (name, m) in rows {
        tsv += &format!(
            "{name}\t{}\t{:.6}\t{:.4}\t{:.6}\t{:.6}\n",
            m.count, m.pixel_l1, m.psnr, m.patch_similarity, m.semantic_similarity
        );
    }
    tsv += &format!("# diversity\t{:.6}\n", report.diversity);
    let json = serde_json::to_vec_pretty(&report).map_err(|e| runtime(e.into()))?;
    write(&out.join("report.json"), json).map_err(runtime)?;
    write(&out.join("report.tsv"), tsv).map_err(runtime)?;
    println!(
        "{}: pixel_l1 {:.4} psnr {:.2} diversity {:.4}",
        report.system, report.overall.pixel_l1, report.overall.psnr, report.diversity
    );
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig) -> Outcome {
    let suite = cfg.suite().map_err(usage)?;
    let tcfg = cfg.train_config().map_err(usage)?;
    let ecfg = cfg.eval_config().map_err(usage)?;
    let denoiser = cfg.denoiser().map_err(usage)?;
    let sched = cfg.schedule().map_err(usage)?;
    let mut acfg = AblationConfig::new(suite, denoiser, tcfg, ecfg, sched);
    acfg.lambdas = cfg.floats("train-lambdas");
    if acfg.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(usage(Error::Config("train-lambdas must lie in [0, 1]".into())));
    }
    acfg.lambda_inf = cfg.floats("lambdas");
    acfg.budget_seconds = Some(cfg.float("budget-seconds")).filter(|b| *b > 0.0);
    acfg.dtype = cfg.dtype();
    let data = train_data(cfg)?;
    let bench = bench_data(cfg)?;
    let out = prepare_out(cfg).map_err(runtime)?;
    acfg.checkpoint_dir = Some(out.join("checkpoints"));
    let report = run_ablation(&acfg, &data, &bench, &Device::Cpu).map_err(runtime)?;
    let written = write_report(&report, &out).map_err(runtime)?;
    if suite == Suite::Interpolation && !report.partial {
        for v in variants(&acfg) {
            let (model, ..) = train_variant(&v, &acfg, &data, &Device::Cpu).map_err(runtime)?;
            let strip = interpolation_strip(&model, &bench, &acfg.sched, &acfg.lambda_inf, cfg.int("seed")).map_err(runtime)?;
            strip.save(out.join(format!("interpolation_{}.png", v.label))).map_err(|e| runtime(e.into()))?;
        }
    }
    print!("{}", crate::ablation::to_tsv(&report));
    for p in written {
        println!("wrote {}", p.display());
    }
    if report.partial {
        eprintln!("warning: budget exceeded; report is partial");
    }
    Ok(())
}
