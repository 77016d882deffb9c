//! Seeded subject augmentation: horizontal flip, small rotation, barrel
//! distortion, and a sharpen filter standing in for super-resolution.

use image::{imageops, Rgb, RgbImage};
use imageproc::filter::filter3x3;
use imageproc::geometric_transformations::{rotate_about_center, warp_with, Interpolation};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

pub const MAX_ROTATION_DEG: f32 = 15.0;

/// Which augmentations fire. A zero angle or strength means "off".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub flip: bool,
    pub rotate_deg: f32,
    pub distortion: f32,
    pub sharpen: bool,
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan { flip: false, rotate_deg: 0.0, distortion: 0.0, sharpen: false };

    pub fn draw(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag("augment")]);
        let flip = r.random_bool(0.5);
        let rotate_deg = if r.random_bool(0.5) { r.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG) } else { 0.0 };
        let distortion = if r.random_bool(0.3) { r.random_range(0.05..0.15) } else { 0.0 };
        let sharpen = r.random_bool(0.3);
        Self { flip, rotate_deg, distortion, sharpen }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let fill = *img.get_pixel(0, 0);
        let mut out = img.clone();
        if self.flip {
            out = hflip(&out);
        }
        if self.rotate_deg != 0.0 {
            out = rotate(&out, self.rotate_deg, fill);
        }
        if self.distortion != 0.0 {
            out = barrel(&out, self.distortion, fill);
        }
        if self.sharpen {
            out = sharpen(&out);
        }
        out
    }
}

pub fn augment_subject(subject: &RgbImage, seed: u64) -> RgbImage {
    AugmentPlan::draw(seed).apply(subject)
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(img)
}

pub fn rotate(img: &RgbImage, degrees: f32, fill: Rgb<u8>) -> RgbImage {
    rotate_about_center(img, degrees.to_radians(), Interpolation::Nearest, fill)
}

/// Radial distortion `r_src = r·(1 + k·r²)` in coordinates normalized to
/// the half-diagonal.
pub fn barrel(img: &RgbImage, k: f32, fill: Rgb<u8>) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let norm = (cx * cx + cy * cy).sqrt();
    warp_with(
        img,
        move |x, y| {
            let (dx, dy) = ((x - cx) / norm, (y - cy) / norm);
            let s = 1.0 + k * (dx * dx + dy * dy);
            (cx + dx * s * norm, cy + dy * s * norm)
        },
        Interpolation::Bilinear,
        fill,
    )
}

pub fn sharpen(img: &RgbImage) -> RgbImage {
    let kernel = [0.0f32, -0.5, 0.0, -0.5, 3.0, -0.5, 0.0, -0.5, 0.0];
    filter3x3::<_, f32, u8>(img, &kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_pair, SynthSpec};

    fn subject() -> RgbImage {
        gen_pair(&SynthSpec::desk(2), 4).unwrap().subject
    }

    #[test]
    fn identity_plan_is_a_no_op() {
        let s = subject();
        assert_eq!(AugmentPlan::IDENTITY.apply(&s), s);
        let seed = (0..1000).find(|&sd| AugmentPlan::draw(sd).is_identity()).expect("some seed draws all-off");
        assert_eq!(augment_subject(&s, seed), s);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = subject();
        assert_eq!(hflip(&hflip(&s)), s);
    }

    #[test]
    fn rotation_moves_points_within_bound() {
        let n = 64u32;
        let diag = ((2 * n * n) as f32).sqrt();
        let bound = diag * MAX_ROTATION_DEG.to_radians().sin();
        for (px, py) in [(2u32, 2u32), (61, 3), (30, 60)] {
            let mut img = RgbImage::new(n, n);
            img.put_pixel(px, py, Rgb([255, 255, 255]));
            for deg in [-15.0f32, 7.5, 15.0] {
                let out = rotate(&img, deg, Rgb([0, 0, 0]));
                for (x, y, p) in out.enumerate_pixels() {
                    if p[0] > 0 {
                        let d = ((x as f32 - px as f32).powi(2) + (y as f32 - py as f32).powi(2)).sqrt();
                        assert!(d <= bound, "moved {d} > {bound}");
                    }
                }
            }
        }
    }

    #[test]
    fn plans_are_seeded() {
        assert_eq!(AugmentPlan::draw(5), AugmentPlan::draw(5));
        let s = subject();
        assert_eq!(augment_subject(&s, 8), augment_subject(&s, 8));
        for sd in 0..200 {
            assert!(AugmentPlan::draw(sd).rotate_deg.abs() <= MAX_ROTATION_DEG);
        }
    }
}
