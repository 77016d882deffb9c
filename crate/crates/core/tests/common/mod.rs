//! Helpers shared by integration test targets.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use recycled_diffusion::baselines::{Model, SystemKind};
use recycled_diffusion::codec::Codec;
use recycled_diffusion::denoiser::DenoiserConfig;
use recycled_diffusion::grid::{LatentGrid, RegionMask};
use recycled_diffusion::recycling::Conditioning;
use recycled_diffusion::rng;
use recycled_diffusion::schedule::make_schedule;
use recycled_diffusion::train::{step_loss, PreparedStep, TrainConfig};

const H: f64 = 1e-5;

/// Tiny f64 symbiotic model with random weights everywhere (so no path is
/// gated by a zero layer) and one prepared training step at threshold
/// `lambda`.
pub fn gradcheck_setup(lambda: f64) -> (Model, PreparedStep, TrainConfig) {
    let cfg = DenoiserConfig::tiny();
    let dev = Device::Cpu;
    let model = Model::new(SystemKind::Symbiotic, &cfg, 11, DType::F64, &dev).unwrap();
    model.base_params.perturb(5, 0.3).unwrap();
    let n = cfg.image_size;
    let mut r = rng::stream(2, &[0]);
    let scene = LatentGrid::pixel(rng::normal_tensor(&mut r, &[2, 1, n, n], DType::F64, &dev).unwrap()).unwrap();
    let subject = LatentGrid::pixel(rng::normal_tensor(&mut r, &[2, 1, n, n], DType::F64, &dev).unwrap()).unwrap();
    let mut m = vec![1.0f64; 2 * n * n];
    for b in 0..2 {
        for y in 1..3 {
            for x in 1..3 {
                m[b * n * n + y * n + x] = 0.0;
            }
        }
    }
    let mask = RegionMask::new(Tensor::from_vec(m, (2, 1, n, n), &dev).unwrap()).unwrap();
    let codec = cfg.codec();
    let tcfg = TrainConfig { lambda, condition_drop_prob: 0.0, seed: 4, ..Default::default() };
    let sched = make_schedule(1000, 1e-4, 0.02, 10).unwrap();
    let p = PreparedStep::new(
        codec.encode(&scene).unwrap(),
        codec.encode_mask(&mask).unwrap().for_channels(1).unwrap(),
        codec.encode(&subject).unwrap(),
        &sched,
        &tcfg,
        0,
    )
    .unwrap();
    assert_eq!(p.condition, Conditioning::Full);
    (model, p, tcfg)
}

fn loss(model: &Model, p: &PreparedStep, cfg: &TrainConfig) -> f64 {
    step_loss(model, p, cfg, 0).unwrap().to_scalar::<f64>().unwrap()
}

fn values(v: &Var) -> Vec<f64> {
    v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()
}

fn set(v: &Var, data: &[f64]) {
    v.set(&Tensor::from_slice(data, v.as_tensor().shape(), &Device::Cpu).unwrap()).unwrap();
}

/// Analytic and central-difference gradients over every parameter,
/// flattened in `named_vars` order.
pub fn gradients(model: &Model, p: &PreparedStep, cfg: &TrainConfig) -> (Vec<f64>, Vec<f64>) {
    let grads = step_loss(model, p, cfg, 0).unwrap().backward().unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (_, var) in model.named_vars() {
        let g = grads.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let base = values(&var);
        analytic.extend(g.unwrap_or_else(|| vec![0.0; base.len()]));
        for i in 0..base.len() {
            let mut w = base.clone();
            w[i] = base[i] + H;
            set(&var, &w);
            let plus = loss(model, p, cfg);
            w[i] = base[i] - H;
            set(&var, &w);
            let minus = loss(model, p, cfg);
            numeric.push((plus - minus) / (2.0 * H));
        }
        set(&var, &base);
    }
    (analytic, numeric)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Largest elementwise relative error, with a small absolute floor.
pub fn worst_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()) + 1e-6)).fold(0.0, f64::max)
}
