use rand::Rng;

use super::{Normalization, ResolutionMode};
use crate::image::{Image, Rect};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of the eval-time resized image kept by the center crop.
pub const EVAL_CROP_FRACTION: f64 = 0.875;
const CROP_SCALE: (f64, f64) = (0.08, 1.0);
const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Geometry of a train-time random resized crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropTrace {
    pub rect: Rect,
    pub flipped: bool,
}

/// Network-input view of a stored image, pixel values in `[0, 1]`.
pub fn pipeline_view<R: Rng + ?Sized>(
    image: &Image<u8>,
    mode: ResolutionMode,
    size: usize,
    train_time: bool,
    rng: &mut R,
) -> Image<f32> {
    pipeline_view_traced(image, mode, size, train_time, rng).0
}

/// As [`pipeline_view`], also reporting the crop geometry when one was drawn.
pub fn pipeline_view_traced<R: Rng + ?Sized>(
    image: &Image<u8>,
    mode: ResolutionMode,
    size: usize,
    train_time: bool,
    rng: &mut R,
) -> (Image<f32>, Option<CropTrace>) {
    match (mode, train_time) {
        (ResolutionMode::RandomCrop, true) => {
            let rect = random_resized_rect(image.height(), image.width(), rng);
            let flipped = rng.random_bool(0.5);
            let mut view = image.to_unit().resample(rect, size, size);
            if flipped {
                view = view.flip_horizontal();
            }
            (view, Some(CropTrace { rect, flipped }))
        }
        _ => (eval_view(image, mode, size), None),
    }
}

/// The deterministic eval-mode view.
pub fn eval_view(image: &Image<u8>, mode: ResolutionMode, size: usize) -> Image<f32> {
    let unit = image.to_unit();
    match mode {
        ResolutionMode::Resized => unit.resize(size, size),
        ResolutionMode::RandomCrop => {
            let short_target = (size as f64 / EVAL_CROP_FRACTION).round() as usize;
            let (h, w) = (image.height(), image.width());
            let (nh, nw) = if h <= w {
                (short_target, (w * short_target + h / 2) / h)
            } else {
                ((h * short_target + w / 2) / w, short_target)
            };
            let resized = unit.resize(nh, nw);
            resized.crop(Rect {
                top: (nh - size) / 2,
                left: (nw - size) / 2,
                height: size,
                width: size,
            })
        }
    }
}

pub(crate) fn random_resized_rect<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Rect {
    let area = (h * w) as f64;
    let (lr0, lr1) = (CROP_RATIO.0.ln(), CROP_RATIO.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Rect {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    // Fallback: the largest centered crop within the ratio bounds.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < CROP_RATIO.0 {
        (((w as f64) / CROP_RATIO.0).round() as usize, w)
    } else if in_ratio > CROP_RATIO.1 {
        (h, ((h as f64) * CROP_RATIO.1).round() as usize)
    } else {
        (h, w)
    };
    Rect {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Normalizes views into a `[B, C, H, W]` tensor.
pub fn to_batch<T: Scalar>(views: &[Image<f32>], norm: &Normalization) -> Tensor<T> {
    let Some(first) = views.first() else {
        return Tensor::zeros(&[0, 3, 1, 1]);
    };
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut out = Tensor::zeros(&[views.len(), c, h, w]);
    for (i, v) in views.iter().enumerate() {
        norm.write_into(v, out.row_mut(i));
    }
    out
}
