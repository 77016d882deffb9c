//! Procedural (scene, mask, subject) triplets.
//!
//! A flat-colored "logo" is rendered into a random rectangular region of a
//! textured scene, optionally rotated. The subject is the same logo at the
//! same scale, centered on a neutral ground with slightly shifted colors.

use std::fmt;
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_rect_mut, draw_polygon_mut};
use imageproc::point::Point;
use imageproc::rect::Rect;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// First index of the frozen benchmark split. Training indices stay below.
pub const BENCHMARK_START: u64 = 1_000_000;

const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    GlyphText,
    ShapeLogo,
    TryonPatch,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::GlyphText, Category::ShapeLogo, Category::TryonPatch];

    pub fn name(self) -> &'static str {
        match self {
            Category::GlyphText => "glyph_text",
            Category::ShapeLogo => "shape_logo",
            Category::TryonPatch => "tryon_patch",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: u32,
    pub categories: Vec<Category>,
    pub category_weights: Vec<f64>,
    /// Allowed fraction of the image covered by the region.
    pub mask_area_range: (f64, f64),
    pub rng_seed: u64,
}

impl SynthSpec {
    pub fn desk(rng_seed: u64) -> Self {
        Self {
            image_size: 64,
            categories: Category::ALL.to_vec(),
            category_weights: vec![0.4, 0.4, 0.2],
            mask_area_range: (0.08, 0.3),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidRange(format!("image size {} below 16", self.image_size)));
        }
        if self.categories.is_empty() || self.categories.len() != self.category_weights.len() {
            return Err(Error::InvalidRange("one weight per category required".into()));
        }
        if self.category_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidRange("category weights must be >= 0".into()));
        }
        let sum: f64 = self.category_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRange(format!("category weights sum to {sum}, not 1")));
        }
        let (lo, hi) = self.mask_area_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::InvalidRange(format!("mask area range ({lo}, {hi}) must satisfy 0 < min < max < 1")));
        }
        Ok(())
    }

    fn pick_category(&self, r: &mut ChaCha8Rng) -> Category {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (c, w) in self.categories.iter().zip(&self.category_weights) {
            acc += w;
            if u < acc {
                return *c;
            }
        }
        *self.categories.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityFlags {
    pub area_fraction: f64,
    pub retries: usize,
    pub rotated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub index: u64,
    pub category: Category,
    pub scene: RgbImage,
    /// 255 keeps the scene, 0 marks the region.
    pub mask: GrayImage,
    pub subject: RgbImage,
    pub quality: QualityFlags,
}

impl SamplePair {
    pub fn area_fraction(&self) -> f64 {
        area_fraction(&self.mask)
    }

    /// Checks the generator contract: binary mask, area in range, and a
    /// subject no larger than the region it was rendered into.
    pub fn validate(&self, spec: &SynthSpec) -> Result<()> {
        let n = spec.image_size;
        let bad = |m: String| Err(Error::InvalidRange(format!("pair {}: {m}", self.index)));
        if self.scene.dimensions() != (n, n) || self.mask.dimensions() != (n, n) || self.subject.dimensions() != (n, n) {
            return bad("image sizes differ from the spec".into());
        }
        if self.mask.pixels().any(|p| p[0] != 0 && p[0] != 255) {
            return bad("mask is not binary".into());
        }
        let a = self.area_fraction();
        let (lo, hi) = spec.mask_area_range;
        if a < lo || a > hi {
            return bad(format!("area fraction {a} outside [{lo}, {hi}]"));
        }
        let ground = *self.subject.get_pixel(0, 0);
        let logo = self.subject.pixels().filter(|p| **p != ground).count() as f64;
        // Rasterized rotated regions lose a few boundary pixels.
        if logo == 0.0 || logo > 1.5 * a * (n * n) as f64 {
            return bad(format!("subject covers {logo} pixels for a region of {}", a * (n * n) as f64));
        }
        Ok(())
    }
}

pub fn area_fraction(mask: &GrayImage) -> f64 {
    let region = mask.pixels().filter(|p| p[0] < 128).count();
    region as f64 / (mask.width() * mask.height()) as f64
}

fn random_color(r: &mut ChaCha8Rng) -> Rgb<u8> {
    // Saturated colors: one channel high, one low, one free.
    let mut c = [r.random_range(180..=255u8), r.random_range(0..=70u8), r.random_range(0..=255u8)];
    let k = r.random_range(0..3);
    c.rotate_left(k);
    if r.random_bool(0.5) {
        c.swap(0, 1);
    }
    Rgb(c)
}

fn palette(r: &mut ChaCha8Rng) -> Vec<Rgb<u8>> {
    let n = r.random_range(2..=4);
    let mut p: Vec<Rgb<u8>> = Vec::with_capacity(n);
    while p.len() < n {
        let c = random_color(r);
        let distinct = p.iter().all(|q| q.0.iter().zip(c.0).map(|(a, b)| (*a as i32 - b as i32).abs()).sum::<i32>() > 120);
        if distinct {
            p.push(c);
        }
    }
    p
}

/// 5x7 bitmap glyphs, one byte per row, high bit on the left.
const GLYPHS: [[u8; 7]; 14] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // C
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11], // N
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // O
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // S
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04], // Y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
];

fn draw_glyph(img: &mut RgbImage, glyph: &[u8; 7], x0: i32, y0: i32, scale: i32, color: Rgb<u8>) {
    for (row, bits) in glyph.iter().enumerate() {
        for col in 0..5 {
            if bits & (0x10 >> col) != 0 {
                let rect = Rect::at(x0 + col * scale, y0 + row as i32 * scale).of_size(scale as u32, scale as u32);
                draw_filled_rect_mut(img, rect, color);
            }
        }
    }
}

fn regular_polygon(cx: f64, cy: f64, radius: f64, sides: usize, phase: f64) -> Vec<Point<i32>> {
    let mut pts: Vec<Point<i32>> = (0..sides)
        .map(|i| {
            let a = phase + i as f64 * std::f64::consts::TAU / sides as f64;
            Point::new((cx + radius * a.cos()).round() as i32, (cy + radius * a.sin()).round() as i32)
        })
        .collect();
    pts.dedup();
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    pts
}

/// A `w x h` logo fully covering its canvas with a plate color.
fn render_logo(category: Category, w: u32, h: u32, r: &mut ChaCha8Rng) -> RgbImage {
    let pal = palette(r);
    let mut img = RgbImage::from_pixel(w, h, pal[0]);
    let (wf, hf) = (w as f64, h as f64);
    match category {
        Category::GlyphText => {
            let n = r.random_range(1..=3usize).min((w as usize / 6).max(1));
            let scale = ((w as i32) / (6 * n as i32)).min(h as i32 / 8).max(1);
            let text_w = n as i32 * 6 * scale - scale;
            let x0 = (w as i32 - text_w) / 2;
            let y0 = (h as i32 - 7 * scale) / 2;
            for i in 0..n {
                let g = &GLYPHS[r.random_range(0..GLYPHS.len())];
                let color = pal[1 + i % (pal.len() - 1)];
                draw_glyph(&mut img, g, x0 + i as i32 * 6 * scale, y0, scale, color);
            }
        }
        Category::ShapeLogo => {
            let shapes = r.random_range(1..=3usize);
            for i in 0..shapes {
                let color = pal[1 + i % (pal.len() - 1)];
                let radius = r.random_range(0.2..0.45) * wf.min(hf);
                let cx = r.random_range(radius..=(wf - radius).max(radius));
                let cy = r.random_range(radius..=(hf - radius).max(radius));
                match r.random_range(0..3) {
                    0 => draw_filled_circle_mut(&mut img, (cx as i32, cy as i32), radius as i32, color),
                    k => {
                        let sides = if k == 1 { 3 } else { r.random_range(4..=6) };
                        let poly = regular_polygon(cx, cy, radius, sides, r.random_range(0.0..std::f64::consts::TAU));
                        if poly.len() >= 3 {
                            draw_polygon_mut(&mut img, &poly, color);
                        }
                    }
                }
            }
        }
        Category::TryonPatch => {
            let period = r.random_range(3..=6u32);
            let diagonal = r.random_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let k = if diagonal { x + y } else { y };
                    if (k / period) % 2 == 1 {
                        img.put_pixel(x, y, pal[1]);
                    }
                }
            }
            let color = *pal.last().expect("palette has >= 2 colors");
            let radius = 0.3 * wf.min(hf);
            let poly = regular_polygon(wf / 2.0, hf / 2.0, radius, r.random_range(3..=6), r.random_range(0.0..1.0));
            if poly.len() >= 3 {
                draw_polygon_mut(&mut img, &poly, color);
            }
        }
    }
    img
}

fn background(n: u32, r: &mut ChaCha8Rng) -> RgbImage {
    let base: [f64; 3] = [r.random_range(40.0..215.0), r.random_range(40.0..215.0), r.random_range(40.0..215.0)];
    let grad: [f64; 2] = [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6)];
    let freq = r.random_range(0.1..0.5);
    let amp = r.random_range(5.0..25.0);
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = RgbImage::new(n, n);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (xf, yf) = (x as f64, y as f64);
        let wave = amp * (freq * (ca * xf + sa * yf) + phase).sin();
        let shade = grad[0] * xf + grad[1] * yf;
        for c in 0..3 {
            let grain = r.random_range(-6.0..6.0);
            p.0[c] = (base[c] + wave + shade + grain).clamp(0.0, 255.0) as u8;
        }
    }
    img
}

struct Region {
    cx: f64,
    cy: f64,
    w: u32,
    h: u32,
    angle: f64,
    mask: GrayImage,
}

fn place_region(n: u32, target: f64, rotated: bool, r: &mut ChaCha8Rng) -> Option<Region> {
    let aspect = r.random_range(0.6..1.7);
    let area = target * (n * n) as f64;
    let w = (area * aspect).sqrt().round() as u32;
    let h = (area / w.max(1) as f64).round() as u32;
    if w < 4 || h < 4 {
        return None;
    }
    let angle = if rotated { r.random_range(-20f64..20.0).to_radians() } else { 0.0 };
    // Half extents of the rotated box.
    let (c, s) = (angle.cos().abs(), angle.sin().abs());
    let hx = 0.5 * (w as f64 * c + h as f64 * s);
    let hy = 0.5 * (w as f64 * s + h as f64 * c);
    let margin = 1.0;
    if 2.0 * (hx + margin) >= n as f64 || 2.0 * (hy + margin) >= n as f64 {
        return None;
    }
    let cx = r.random_range(hx + margin..n as f64 - hx - margin);
    let cy = r.random_range(hy + margin..n as f64 - hy - margin);
    let mut mask = GrayImage::from_pixel(n, n, Luma([255]));
    if rotated {
        let (ca, sa) = (angle.cos(), angle.sin());
        let corners = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
        let poly: Vec<Point<i32>> = corners
            .iter()
            .map(|(u, v)| {
                let (dx, dy) = (u * w as f64, v * h as f64);
                Point::new((cx + ca * dx - sa * dy).round() as i32, (cy + sa * dx + ca * dy).round() as i32)
            })
            .collect();
        draw_polygon_mut(&mut mask, &poly, Luma([0]));
    } else {
        let x0 = (cx - w as f64 / 2.0).round() as i32;
        let y0 = (cy - h as f64 / 2.0).round() as i32;
        draw_filled_rect_mut(&mut mask, Rect::at(x0, y0).of_size(w, h), Luma([0]));
    }
    Some(Region { cx, cy, w, h, angle, mask })
}

fn perturb(c: Rgb<u8>, shift: [i32; 3]) -> Rgb<u8> {
    Rgb([0, 1, 2].map(|i| (c.0[i] as i32 + shift[i]).clamp(0, 255) as u8))
}

pub fn gen_pair(spec: &SynthSpec, index: u64) -> Result<SamplePair> {
    spec.validate()?;
    let n = spec.image_size;
    let mut r = rng::stream(spec.rng_seed, &[rng::tag("pair"), index]);
    let category = spec.pick_category(&mut r);
    let rotate_p = if category == Category::TryonPatch { 0.5 } else { 0.2 };
    let rotated = r.random_bool(rotate_p);
    let (lo, hi) = spec.mask_area_range;
    let mut region = None;
    let mut retries = 0;
    while retries < MAX_RETRIES {
        let target = r.random_range(lo..hi);
        if let Some(reg) = place_region(n, target, rotated, &mut r) {
            let a = area_fraction(&reg.mask);
            if a >= lo && a <= hi {
                region = Some(reg);
                break;
            }
        }
        retries += 1;
    }
    let region = region.ok_or_else(|| Error::GeneratorExhausted {
        retries: MAX_RETRIES,
        reason: format!("no region with area in [{lo}, {hi}] for pair {index}"),
    })?;

    let logo = render_logo(category, region.w, region.h, &mut r);
    let mut scene = background(n, &mut r);
    let (ca, sa) = (region.angle.cos(), region.angle.sin());
    for (x, y, m) in region.mask.enumerate_pixels() {
        if m[0] != 0 {
            continue;
        }
        let (dx, dy) = (x as f64 + 0.5 - region.cx, y as f64 + 0.5 - region.cy);
        let u = ca * dx + sa * dy + region.w as f64 / 2.0;
        let v = -sa * dx + ca * dy + region.h as f64 / 2.0;
        let u = (u.floor() as i64).clamp(0, region.w as i64 - 1) as u32;
        let v = (v.floor() as i64).clamp(0, region.h as i64 - 1) as u32;
        scene.put_pixel(x, y, *logo.get_pixel(u, v));
    }

    let g = r.random_range(190..=240i32);
    let tint = [r.random_range(-6..=6), r.random_range(-6..=6), r.random_range(-6..=6)];
    let ground = Rgb([0, 1, 2].map(|i| (g + tint[i]).clamp(0, 255) as u8));
    let shift = [r.random_range(-12..=12), r.random_range(-12..=12), r.random_range(-12..=12)];
    let mut subject = RgbImage::from_pixel(n, n, ground);
    let (ox, oy) = ((n - region.w) / 2, (n - region.h) / 2);
    for (x, y, p) in logo.enumerate_pixels() {
        let mut c = perturb(*p, shift);
        if c == ground {
            c.0[0] = c.0[0].wrapping_add(1);
        }
        subject.put_pixel(ox + x, oy + y, c);
    }

    let quality = QualityFlags { area_fraction: area_fraction(&region.mask), retries, rotated };
    Ok(SamplePair { index, category, scene, mask: region.mask, subject, quality })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_deterministic() {
        let spec = SynthSpec::desk(3);
        let a = gen_pair(&spec, 17).unwrap();
        let b = gen_pair(&spec, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.scene, gen_pair(&spec, 18).unwrap().scene);
    }

    #[test]
    fn category_frequencies_follow_weights() {
        let spec = SynthSpec::desk(5);
        let mut counts = [0usize; 3];
        for i in 0..1000 {
            let p = gen_pair(&spec, i).unwrap();
            counts[Category::ALL.iter().position(|c| *c == p.category).unwrap()] += 1;
        }
        for (c, w) in counts.iter().zip(&spec.category_weights) {
            let rate = *c as f64 / 1000.0;
            assert!((rate - w).abs() <= 0.03, "rate {rate} vs weight {w}");
        }
    }

    #[test]
    fn generated_pairs_satisfy_their_invariants() {
        let spec = SynthSpec::desk(9);
        for i in 0..300 {
            gen_pair(&spec, i).unwrap().validate(&spec).unwrap();
        }
        for i in BENCHMARK_START..BENCHMARK_START + 50 {
            gen_pair(&spec, i).unwrap().validate(&spec).unwrap();
        }
    }

    #[test]
    fn impossible_area_range_exhausts_retries() {
        let spec = SynthSpec { mask_area_range: (0.95, 0.99), ..SynthSpec::desk(1) };
        assert!(matches!(gen_pair(&spec, 0), Err(Error::GeneratorExhausted { .. })));
    }

    #[test]
    fn spec_validation() {
        let mut s = SynthSpec::desk(1);
        s.category_weights = vec![0.5, 0.5, 0.5];
        assert!(s.validate().is_err());
        let mut s = SynthSpec::desk(1);
        s.mask_area_range = (0.3, 0.2);
        assert!(s.validate().is_err());
        assert_eq!("shape_logo".parse::<Category>().unwrap(), Category::ShapeLogo);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn any_index_yields_a_valid_pair(seed in 0u64..1000, index in 0u64..u64::MAX / 2) {
            let spec = SynthSpec::desk(seed);
            let p = gen_pair(&spec, index).unwrap();
            p.validate(&spec).unwrap();
            let (lo, hi) = spec.mask_area_range;
            proptest::prop_assert!((lo..=hi).contains(&p.quality.area_fraction));
        }
    }
}
