//! Image files and buffers to model tensors and back. Pixels map to
//! `[-1, 1]`; masks map 255 to 1 (keep) and 0 to 0 (region).

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, RgbImage};

use super::augment::augment_subject;
use super::synth::{Category, SamplePair};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, RegionMask};

pub fn rgb_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
    Ok(Tensor::from_vec(data, (h as usize, w as usize, 3), device)?
        .permute((2, 0, 1))?
        .contiguous()?
        .to_dtype(dtype)?)
}

pub fn mask_to_tensor(mask: &GrayImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = mask.dimensions();
    let data: Vec<f32> = mask.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (1, h as usize, w as usize), device)?.to_dtype(dtype)?)
}

/// `(3, h, w)` or `(1, 3, h, w)` in `[-1, 1]` to an 8-bit image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let v = t.permute((1, 2, 0))?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let bytes = v.iter().map(|&x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::ShapeMismatch("image buffer size".into()))
}

/// Resizes `img` to fit in `size x size` without changing its aspect ratio
/// and pads with the corner color. Returns the fitted image and the
/// original width/height ratio.
pub fn fit_subject(img: &RgbImage, size: u32) -> (RgbImage, f64) {
    let (w, h) = img.dimensions();
    let aspect = w as f64 / h as f64;
    if (w, h) == (size, size) {
        return (img.clone(), aspect);
    }
    let scale = size as f64 / w.max(h) as f64;
    let (nw, nh) = (((w as f64 * scale).round() as u32).max(1), ((h as f64 * scale).round() as u32).max(1));
    let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
    let mut out = RgbImage::from_pixel(size, size, *img.get_pixel(0, 0));
    imageops::overlay(&mut out, &resized, ((size - nw) / 2) as i64, ((size - nh) / 2) as i64);
    (out, aspect)
}

pub fn fit_scene(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    imageops::resize(img, size, size, FilterType::Triangle)
}

pub fn fit_mask(mask: &GrayImage, size: u32) -> GrayImage {
    let resized = if mask.dimensions() == (size, size) {
        mask.clone()
    } else {
        imageops::resize(mask, size, size, FilterType::Nearest)
    };
    GrayImage::from_fn(size, size, |x, y| Luma([if resized.get_pixel(x, y)[0] >= 128 { 255 } else { 0 }]))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn load_mask(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.to_luma8())
}

/// Stacked pixel-space tensors of a list of pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub scene: LatentGrid,
    pub mask: RegionMask,
    pub subject: LatentGrid,
    pub categories: Vec<Category>,
}

impl Batch {
    /// `augment_seed`, when set, augments subject `i` with seed
    /// `augment_seed + index`.
    pub fn from_pairs(pairs: &[&SamplePair], augment_seed: Option<u64>, dtype: DType, device: &Device) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch of zero pairs".into()));
        }
        let mut scenes = Vec::with_capacity(pairs.len());
        let mut masks = Vec::with_capacity(pairs.len());
        let mut subjects = Vec::with_capacity(pairs.len());
        for p in pairs {
            scenes.push(rgb_to_tensor(&p.scene, dtype, device)?);
            masks.push(mask_to_tensor(&p.mask, dtype, device)?);
            let subject = match augment_seed {
                Some(s) => augment_subject(&p.subject, s.wrapping_add(p.index)),
                None => p.subject.clone(),
            };
            subjects.push(rgb_to_tensor(&subject, dtype, device)?);
        }
        Ok(Self {
            scene: LatentGrid::pixel(Tensor::stack(&scenes, 0)?)?,
            mask: RegionMask::new(Tensor::stack(&masks, 0)?)?,
            subject: LatentGrid::pixel(Tensor::stack(&subjects, 0)?)?,
            categories: pairs.iter().map(|p| p.category).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}
