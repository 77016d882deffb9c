//! Minimal PNG line and bar charts for ablation reports. Charts carry no
//! text; the TSV written next to each plot holds the labels and values.

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

const W: u32 = 480;
const H: u32 = 320;
const PAD: f32 = 32.0;
const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let m = (hi - lo) * 0.05;
    (lo - m, hi + m)
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let frame = Rect::at(PAD as i32, PAD as i32).of_size(W - 2 * PAD as u32, H - 2 * PAD as u32);
    draw_hollow_rect_mut(&mut img, frame, Rgb([0, 0, 0]));
    img
}

fn to_px(v: f64, (lo, hi): (f64, f64), len: u32) -> f32 {
    ((v - lo) / (hi - lo)) as f32 * (len as f32 - 2.0 * PAD)
}

/// One polyline with point markers per series.
pub fn line_chart(series: &[Series]) -> RgbImage {
    let mut img = canvas();
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let pts: Vec<(f32, f32)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (PAD + to_px(x, xr, W), H as f32 - PAD - to_px(y, yr, H)))
            .collect();
        for w in pts.windows(2) {
            draw_line_segment_mut(&mut img, w[0], w[1], color);
        }
        for &(x, y) in &pts {
            draw_filled_circle_mut(&mut img, (x as i32, y as i32), 3, color);
        }
    }
    img
}

/// One bar per value, left to right.
pub fn bar_chart(values: &[f64]) -> RgbImage {
    let mut img = canvas();
    if values.is_empty() {
        return img;
    }
    let (lo, hi) = range(values.iter().copied().chain([0.0]));
    let slot = (W as f32 - 2.0 * PAD) / values.len() as f32;
    let base = H as f32 - PAD - to_px(0.0, (lo, hi), H);
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let top = H as f32 - PAD - to_px(v, (lo, hi), H);
        let (y0, y1) = if top < base { (top, base) } else { (base, top) };
        let x0 = PAD + slot * i as f32 + slot * 0.2;
        let rect = Rect::at(x0 as i32, y0 as i32).of_size((slot * 0.6).max(1.0) as u32, (y1 - y0).max(1.0) as u32);
        draw_filled_rect_mut(&mut img, rect, Rgb(PALETTE[i % PALETTE.len()]));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_have_fixed_size_and_ink() {
        let s = Series { name: "a".into(), points: vec![(0.0, 1.0), (0.5, 2.0), (1.0, 0.5)] };
        let img = line_chart(&[s]);
        assert_eq!(img.dimensions(), (W, H));
        assert!(img.pixels().any(|p| p.0 == PALETTE[0]));
        let bars = bar_chart(&[1.0, -0.5, f64::NAN]);
        assert!(bars.pixels().any(|p| p.0 == PALETTE[1]));
        assert_eq!(line_chart(&[]).dimensions(), (W, H));
    }
}
