//! Benchmark evaluation: region fidelity against the ground-truth
//! placement, semantic similarity under the model's own conditional encoder,
//! blocked-flow diversity, and transmission summaries.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::baselines::Model;
use crate::codec::Codec;
use crate::compositor::{customize, CustomizationRequest};
use crate::data::{rgb_to_tensor, tensor_to_rgb, Batch, Category, Dataset, SamplePair};
use crate::denoiser::{compose_input, ForwardOptions, Mode};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, RegionMask};
use crate::instrument::{asa_accumulate, sld_compute, AttentionTrace, GroupBy};
use crate::rng;
use crate::schedule::{forward_diffuse, DiffusionSchedule};

/// PSNR reported for a bit-exact region instead of infinity.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub guidance: f64,
    pub lambda_inf: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Samples per subject for the diversity score.
    pub diversity_samples: usize,
    /// Benchmark pairs (from the start) used for the diversity score.
    pub diversity_pairs: usize,
    /// Record attention traces for the transmission summary.
    pub trace: bool,
    /// Evaluate only the first `limit` benchmark pairs.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            guidance: 1.0,
            lambda_inf: 1.0,
            seed: 0,
            batch_size: 8,
            diversity_samples: 8,
            diversity_pairs: 8,
            trace: true,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub count: usize,
    /// Mean absolute error over region pixels, intensities in [0, 1].
    pub pixel_l1: f64,
    pub psnr: f64,
    /// Windowed structural similarity restricted to the region.
    pub patch_similarity: f64,
    /// Cosine between encoder features of the region crop and the subject.
    pub semantic_similarity: f64,
}

impl RegionMetrics {
    fn add(&mut self, m: &PairMetrics) {
        self.count += 1;
        self.pixel_l1 += m.pixel_l1;
        self.psnr += m.psnr;
        self.patch_similarity += m.patch_similarity;
        self.semantic_similarity += m.semantic_similarity;
    }

    fn finish(mut self) -> Self {
        let n = self.count.max(1) as f64;
        self.pixel_l1 /= n;
        self.psnr /= n;
        self.patch_similarity /= n;
        self.semantic_similarity /= n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub pixel_l1: f64,
    pub psnr: f64,
    pub patch_similarity: f64,
    pub semantic_similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransmissionSummary {
    /// Subject attention share accumulated over the delivery sites.
    pub asa: f64,
    pub asa_region: f64,
    pub asa_background: f64,
    pub asa_per_site: BTreeMap<String, f64>,
    /// Absent for sites that never received a signature.
    pub sld_per_site: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub per_category: BTreeMap<Category, RegionMetrics>,
    pub overall: RegionMetrics,
    /// Mean pairwise region RMS distance between blocked-flow samples.
    pub diversity: f64,
    pub transmission: Option<TransmissionSummary>,
    /// Negative region denoising error of an evaluator model on the outputs.
    pub quality: Option<f64>,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        let m = |r: &RegionMetrics| {
            [r.pixel_l1, r.psnr, r.patch_similarity, r.semantic_similarity].iter().all(|v| v.is_finite())
        };
        m(&self.overall)
            && self.per_category.values().all(m)
            && self.diversity.is_finite()
            && self.quality.is_none_or(f64::is_finite)
    }
}

/// One `(channels, h, w)` image in `[0, 1]` and its region flags.
#[derive(Debug, Clone)]
pub struct Plane {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub px: Vec<f64>,
}

impl Plane {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.px[(c * self.h + y) * self.w + x]
    }
}

/// Splits a pixel batch into unit-range planes.
pub fn planes(g: &LatentGrid) -> Result<Vec<Plane>> {
    let (b, c, h, w) = g.dims();
    let v = g.to_vec()?;
    Ok((0..b)
        .map(|i| Plane { c, h, w, px: v[i * c * h * w..(i + 1) * c * h * w].iter().map(|x| (x + 1.0) / 2.0).collect() })
        .collect())
}

/// Region flags (`true` = customized) per batch item.
pub fn region_flags(mask: &RegionMask) -> Result<Vec<Vec<bool>>> {
    let (b, _, h, w) = mask.dims();
    let v: Vec<f64> = mask.tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok((0..b).map(|i| v[i * h * w..(i + 1) * h * w].iter().map(|&m| m < 0.5).collect()).collect())
}

pub fn region_l1(a: &Plane, b: &Plane, region: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for c in 0..a.c {
        for (i, _) in region.iter().enumerate().filter(|(_, r)| **r) {
            s += (a.px[c * a.h * a.w + i] - b.px[c * b.h * b.w + i]).abs();
            n += 1;
        }
    }
    s / n.max(1) as f64
}

/// Peak 1; capped at [`PSNR_CAP`].
pub fn region_psnr(a: &Plane, b: &Plane, region: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for c in 0..a.c {
        for (i, _) in region.iter().enumerate().filter(|(_, r)| **r) {
            let d = a.px[c * a.h * a.w + i] - b.px[c * b.h * b.w + i];
            s += d * d;
            n += 1;
        }
    }
    let mse = s / n.max(1) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

const SSIM_RADIUS: usize = 3;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Mean SSIM of 7x7 windows (clipped at the border) centred on region
/// pixels, averaged over channels.
pub fn region_ssim(a: &Plane, b: &Plane, region: &[bool]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for c in 0..a.c {
        for y in 0..a.h {
            for x in 0..a.w {
                if !region[y * a.w + x] {
                    continue;
                }
                let (y0, y1) = (y.saturating_sub(SSIM_RADIUS), (y + SSIM_RADIUS + 1).min(a.h));
                let (x0, x1) = (x.saturating_sub(SSIM_RADIUS), (x + SSIM_RADIUS + 1).min(a.w));
                let k = ((y1 - y0) * (x1 - x0)) as f64;
                let (mut ma, mut mb) = (0.0, 0.0);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        ma += a.at(c, yy, xx);
                        mb += b.at(c, yy, xx);
                    }
                }
                ma /= k;
                mb /= k;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let (da, db) = (a.at(c, yy, xx) - ma, b.at(c, yy, xx) - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= k;
                vb /= k;
                cov /= k;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                n += 1;
            }
        }
    }
    total / n.max(1) as f64
}

/// Mean over all sample pairs of the region RMS distance. Zero for fewer
/// than two samples.
pub fn pairwise_diversity(samples: &[Plane], region: &[bool]) -> f64 {
    let (mut s, mut pairs) = (0.0, 0usize);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (mut d2, mut n) = (0.0, 0usize);
            for c in 0..samples[i].c {
                let off = c * samples[i].h * samples[i].w;
                for (k, _) in region.iter().enumerate().filter(|(_, r)| **r) {
                    let d = samples[i].px[off + k] - samples[j].px[off + k];
                    d2 += d * d;
                    n += 1;
                }
            }
            s += (d2 / n.max(1) as f64).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        s / pairs as f64
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn bbox(region: &[bool], w: usize) -> Option<(u32, u32, u32, u32)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in region.iter().enumerate().filter(|(_, r)| **r) {
        let (y, x) = (i / w, i % w);
        bb = Some(match bb {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    bb.map(|(x0, y0, x1, y1)| (x0 as u32, y0 as u32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32))
}

/// Global encoder features of pixel images `(B, C, H, W)`: `(B, F)`.
fn semantic_features(model: &Model, pixels: &LatentGrid) -> Result<Vec<Vec<f64>>> {
    let codec = model.cfg.codec();
    let z = codec.encode(&pixels.with_tensor(pixels.tensor().to_dtype(model.dtype())?)?)?;
    let f = model.base.semantic().global_features(z.tensor())?;
    Ok(f.to_dtype(DType::F64)?.to_vec2()?)
}

/// Region crops of `output`, each resized to the full image size.
fn region_crops(output: &LatentGrid, regions: &[Vec<bool>], model: &Model) -> Result<LatentGrid> {
    let (b, _, h, w) = output.dims();
    let mut crops = Vec::with_capacity(b);
    for (i, region) in regions.iter().enumerate() {
        let img: RgbImage = tensor_to_rgb(&output.tensor().narrow(0, i, 1)?)?;
        let crop = match bbox(region, w) {
            Some((x, y, cw, ch)) => imageops::crop_imm(&img, x, y, cw, ch).to_image(),
            None => img,
        };
        let resized = imageops::resize(&crop, w as u32, h as u32, FilterType::Triangle);
        crops.push(rgb_to_tensor(&resized, model.dtype(), model.device())?);
    }
    LatentGrid::pixel(Tensor::stack(&crops, 0)?)
}

/// Fidelity metrics of one batch of outputs against the ground truth.
pub fn batch_metrics(model: &Model, batch: &Batch, output: &LatentGrid) -> Result<Vec<PairMetrics>> {
    let regions = region_flags(&batch.mask)?;
    let out = planes(output)?;
    let truth = planes(&batch.scene)?;
    let crop_feats = semantic_features(model, &region_crops(output, &regions, model)?)?;
    let subject_feats = semantic_features(model, &batch.subject)?;
    Ok((0..batch.len())
        .map(|i| PairMetrics {
            pixel_l1: region_l1(&out[i], &truth[i], &regions[i]),
            psnr: region_psnr(&out[i], &truth[i], &regions[i]),
            patch_similarity: region_ssim(&out[i], &truth[i], &regions[i]),
            semantic_similarity: cosine(&crop_feats[i], &subject_feats[i]),
        })
        .collect())
}

fn request(batch: &Batch, cfg: &EvalConfig, lambda_inf: f64, seed: u64) -> CustomizationRequest {
    CustomizationRequest {
        guidance: cfg.guidance,
        lambda_inf,
        ..CustomizationRequest::new(batch.scene.clone(), batch.mask.clone(), batch.subject.clone(), seed)
    }
}

fn benchmark_pairs<'a>(bench: &'a Dataset, cfg: &EvalConfig) -> Result<Vec<&'a SamplePair>> {
    if bench.is_empty() {
        return Err(Error::Empty("benchmark split".into()));
    }
    let n = cfg.limit.unwrap_or(bench.len()).min(bench.len());
    Ok(bench.pairs[..n].iter().collect())
}

/// Customized outputs of every benchmark pair, batch by batch, with the
/// attention traces when requested.
pub fn generate_outputs(
    model: &Model,
    bench: &Dataset,
    sched: &DiffusionSchedule,
    cfg: &EvalConfig,
) -> Result<Vec<(Batch, LatentGrid, AttentionTrace)>> {
    let pairs = benchmark_pairs(bench, cfg)?;
    let mut out = Vec::new();
    for (k, chunk) in pairs.chunks(cfg.batch_size.max(1)).enumerate() {
        let batch = Batch::from_pairs(chunk, None, model.dtype(), model.device())?;
        let seed = rng::derive_seed(cfg.seed, &[rng::tag("eval"), k as u64]);
        let c = customize(&request(&batch, cfg, cfg.lambda_inf, seed), model, sched, cfg.trace)?;
        out.push((batch, c.image, c.trace));
    }
    Ok(out)
}

/// Blocked-flow diversity over the first `diversity_pairs` benchmark pairs.
pub fn diversity(model: &Model, bench: &Dataset, sched: &DiffusionSchedule, cfg: &EvalConfig) -> Result<f64> {
    let pairs = benchmark_pairs(bench, cfg)?;
    let pairs = &pairs[..cfg.diversity_pairs.min(pairs.len())];
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (k, p) in pairs.iter().enumerate() {
        let copies = vec![*p; cfg.diversity_samples.max(1)];
        let batch = Batch::from_pairs(&copies, None, model.dtype(), model.device())?;
        let seed = rng::derive_seed(cfg.seed, &[rng::tag("diversity"), k as u64]);
        let out = customize(&request(&batch, cfg, 0.0, seed), model, sched, false)?.image;
        let region = &region_flags(&batch.mask)?[0];
        total += pairwise_diversity(&planes(&out)?, region);
    }
    Ok(total / pairs.len() as f64)
}

pub fn transmission(traces: &[AttentionTrace], model: &Model) -> Result<TransmissionSummary> {
    let table = asa_accumulate(traces, GroupBy::Layer)?;
    let sites = model.base.delivery_sites();
    let total = table.total(Some(sites));
    Ok(TransmissionSummary {
        asa: total.asa(),
        asa_region: total.asa_region(),
        asa_background: total.asa_background(),
        asa_per_site: table.cells.iter().map(|((s, _), c)| (s.to_string(), c.asa())).collect(),
        sld_per_site: sld_compute(traces).into_iter().map(|(s, v)| (s.to_string(), v)).collect(),
    })
}

/// Timesteps at which the quality proxy probes the evaluator.
pub const QUALITY_TIMESTEPS: [usize; 3] = [50, 150, 300];

/// Negative mean squared noise-prediction error of `evaluator` on the region
/// of `images`, unconditionally and with the scene background visible. A
/// harmonious region is easier to denoise than a pasted or duplicated one.
pub fn quality_proxy(
    evaluator: &Model,
    images: &LatentGrid,
    mask: &RegionMask,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<f64> {
    let codec = evaluator.cfg.codec();
    let dtype = evaluator.dtype();
    let z0 = codec.encode(&images.with_tensor(images.tensor().to_dtype(dtype)?)?)?;
    let lm = codec.encode_mask(mask)?.for_channels(images.dims().1)?.to_dtype(dtype)?;
    let region = (1.0 - &lm.blend)?;
    let region_count = region.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
    let mut total = 0.0;
    for &t in &QUALITY_TIMESTEPS {
        let (b, c, h, w) = z0.dims();
        let mut r = rng::stream(seed, &[rng::tag("quality"), t as u64]);
        let eps = z0.with_tensor(rng::normal_tensor(&mut r, &[b, c, h, w], dtype, z0.tensor().device())?)?;
        let z_t = forward_diffuse(&z0, t, &eps, sched)?;
        let x = compose_input(&z_t, &z0, &lm)?;
        let out = evaluator.base.forward(&x, &vec![t; b], None, Mode::Unconditional, ForwardOptions::default())?;
        let err = ((out.eps.tensor() - eps.tensor())?.sqr()? * &region)?.sum_all()?;
        total += err.to_dtype(DType::F64)?.to_scalar::<f64>()? / region_count;
    }
    Ok(-total / QUALITY_TIMESTEPS.len() as f64)
}

/// Runs customization on every benchmark pair and scores it. `evaluator`,
/// when given, adds the quality proxy.
pub fn evaluate(
    model: &Model,
    bench: &Dataset,
    sched: &DiffusionSchedule,
    cfg: &EvalConfig,
    evaluator: Option<&Model>,
) -> Result<EvalReport> {
    let outputs = generate_outputs(model, bench, sched, cfg)?;
    let mut per_category: BTreeMap<Category, RegionMetrics> = BTreeMap::new();
    let mut overall = RegionMetrics::default();
    let mut quality = 0.0;
    for (k, (batch, image, _)) in outputs.iter().enumerate() {
        for (m, cat) in batch_metrics(model, batch, image)?.iter().zip(&batch.categories) {
            per_category.entry(*cat).or_default().add(m);
            overall.add(m);
        }
        if let Some(ev) = evaluator {
            let q = quality_proxy(ev, image, &batch.mask, sched, rng::derive_seed(cfg.seed, &[k as u64]))?;
            quality += q * batch.len() as f64;
        }
    }
    let count = overall.count as f64;
    let traces: Vec<AttentionTrace> = outputs.into_iter().map(|(_, _, t)| t).collect();
    let transmission = if cfg.trace { Some(transmission(&traces, model)?) } else { None };
    let report = EvalReport {
        system: model.kind.to_string(),
        per_category: per_category.into_iter().map(|(c, m)| (c, m.finish())).collect(),
        overall: overall.finish(),
        diversity: diversity(model, bench, sched, cfg)?,
        transmission,
        quality: evaluator.map(|_| quality / count),
    };
    if !report.is_finite() {
        return Err(Error::Config(format!("non-finite metrics in evaluation of {}", report.system)));
    }
    Ok(report)
}

/// Cosine similarity of two feature rows, exposed for tests of the encoder
/// path: `(B, F)` tensors to per-row values.
pub fn row_cosine(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((dot / (na * nb)?)?.to_dtype(DType::F64)?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(px: Vec<f64>, c: usize, h: usize, w: usize) -> Plane {
        Plane { c, h, w, px }
    }

    #[test]
    fn identical_regions_score_perfectly() {
        let p = plane((0..48).map(|i| (i % 7) as f64 / 7.0).collect(), 3, 4, 4);
        let region = vec![true; 16];
        assert_eq!(region_l1(&p, &p, &region), 0.0);
        assert_eq!(region_psnr(&p, &p, &region), PSNR_CAP);
        assert!((region_ssim(&p, &p, &region) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_has_known_l1_and_psnr() {
        let a = plane(vec![0.5; 16], 1, 4, 4);
        let b = plane(vec![0.6; 16], 1, 4, 4);
        let mut region = vec![false; 16];
        region[..4].iter_mut().for_each(|r| *r = true);
        assert!((region_l1(&a, &b, &region) - 0.1).abs() < 1e-12);
        // mse 0.01 -> 20 dB
        assert!((region_psnr(&a, &b, &region) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_ignore_background() {
        let a = plane(vec![0.0; 4], 1, 2, 2);
        let b = plane(vec![0.0, 1.0, 1.0, 1.0], 1, 2, 2);
        let region = [true, false, false, false];
        assert_eq!(region_l1(&a, &b, &region), 0.0);
    }

    #[test]
    fn identical_samples_have_zero_diversity() {
        let p = plane(vec![0.3; 12], 3, 2, 2);
        let region = vec![true; 4];
        assert_eq!(pairwise_diversity(&vec![p; 8], &region), 0.0);
    }

    #[test]
    fn diversity_of_two_samples_is_their_rms_distance() {
        let a = plane(vec![0.0; 4], 1, 2, 2);
        let b = plane(vec![0.0, 0.0, 0.3, 0.4], 1, 2, 2);
        let region = vec![true; 4];
        let want = ((0.09 + 0.16) / 4.0f64).sqrt();
        assert!((pairwise_diversity(&[a, b], &region) - want).abs() < 1e-12);
    }

    #[test]
    fn cosine_matches_row_cosine() {
        let a = [1.0, 2.0, 2.0];
        let b = [2.0, 0.0, 1.0];
        let ta = Tensor::new(&[a], &candle_core::Device::Cpu).unwrap();
        let tb = Tensor::new(&[b], &candle_core::Device::Cpu).unwrap();
        let want = 4.0 / (3.0 * 5f64.sqrt());
        assert!((cosine(&a, &b) - want).abs() < 1e-12);
        assert!((row_cosine(&ta, &tb).unwrap()[0] - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ssim_is_bounded_and_symmetric(
            a in proptest::collection::vec(0.0f64..1.0, 25),
            b in proptest::collection::vec(0.0f64..1.0, 25),
        ) {
            let (pa, pb) = (plane(a, 1, 5, 5), plane(b, 1, 5, 5));
            let region: Vec<bool> = (0..25).map(|i| i % 3 != 0).collect();
            let s = region_ssim(&pa, &pb, &region);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
            prop_assert!((s - region_ssim(&pb, &pa, &region)).abs() < 1e-12);
            prop_assert!(region_l1(&pa, &pb, &region) >= 0.0);
            prop_assert!(pairwise_diversity(&[pa, pb], &region) >= 0.0);
        }
    }
}
