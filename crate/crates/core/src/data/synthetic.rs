//! Desk-scale substrate: colored parametric shapes over textured backgrounds.
//!
//! Rendering is integer-only so the bytes are identical on every platform.
//! Images are stored at twice the view size, which leaves room for lossless
//! location crops. Every shape has an upright orientation, which is what the
//! rotation task can pick up; backgrounds carry a radial vignette, per-image
//! tint, blotchy texture and pixel noise.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSpec, ImageRecord, ImageSource, Partition, ResolutionMode};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Every shape has a canonical upright orientation.
pub const SHAPE_NAMES: [&str; 4] = ["triangle", "tee", "ell", "dome"];
const COLORS: [[i32; 3]; 6] = [
    [220, 50, 50],
    [50, 190, 60],
    [50, 80, 220],
    [230, 210, 50],
    [200, 60, 200],
    [60, 200, 210],
];
const SKY: [i32; 3] = [90, 170, 250];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapesConfig {
    pub n_classes: usize,
    pub images_per_class: usize,
    /// View size; images are stored at twice this side length.
    pub image_size: usize,
    pub seed: u64,
    /// Probability that a held-out image gets a saturated "sky" band across
    /// its top; zero disables the band everywhere.
    #[serde(default)]
    pub spurious_prob: f64,
}

impl Default for SyntheticShapesConfig {
    fn default() -> Self {
        Self {
            n_classes: 24,
            images_per_class: 60,
            image_size: 32,
            seed: 0,
            spurious_prob: 0.0,
        }
    }
}

impl SyntheticShapesConfig {
    pub fn max_classes() -> usize {
        SHAPE_NAMES.len() * COLORS.len()
    }

    /// Base/val/novel class counts: one sixth each for val and novel (at least
    /// one), the rest base. 24 classes give 16/4/4.
    pub fn partition_sizes(&self) -> (usize, usize, usize) {
        let held = (self.n_classes / 6).max(1);
        (self.n_classes - 2 * held, held, held)
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 3 || self.n_classes > Self::max_classes() {
            return Err(Error::Config(format!(
                "synthetic n_classes must be in 3..={}, got {}",
                Self::max_classes(),
                self.n_classes
            )));
        }
        if self.images_per_class == 0 || self.image_size < 8 {
            return Err(Error::Config("synthetic images_per_class ≥ 1 and image_size ≥ 8".into()));
        }
        if !(0.0..=1.0).contains(&self.spurious_prob) {
            return Err(Error::Config("spurious_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `(shape, color)` of each class id.
pub fn class_combos(cfg: &SyntheticShapesConfig) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..SHAPE_NAMES.len())
        .flat_map(|s| (0..COLORS.len()).map(move |c| (s, c)))
        .collect();
    all.shuffle(&mut rng::stream(cfg.seed, &[0x636c6173]));
    all.truncate(cfg.n_classes);
    all
}

pub fn generate_synthetic(cfg: &SyntheticShapesConfig) -> Result<DatasetSpec> {
    cfg.validate()?;
    let (base, val, _) = cfg.partition_sizes();
    let combos = class_combos(cfg);
    let side = 2 * cfg.image_size;
    let mut records = Vec::with_capacity(cfg.n_classes * cfg.images_per_class);
    for (class, &(shape, color)) in combos.iter().enumerate() {
        let partition = if class < base {
            Partition::Train
        } else if class < base + val {
            Partition::Val
        } else {
            Partition::Test
        };
        for j in 0..cfg.images_per_class {
            let mut r = rng::stream(cfg.seed, &[class as u64, j as u64]);
            let rate = sky_rate(cfg, class, base);
            let sky = rate > 0.0 && r.random_bool(rate);
            let img = render(side, shape, color, sky, &mut r);
            records.push(ImageRecord::in_memory(
                format!("synthetic/{class:03}/{j:04}.png"),
                class as u32,
                partition,
                img,
            ));
        }
    }
    DatasetSpec::new(
        format!("synthetic-{}", cfg.seed),
        ImageSource::Synthetic { seed: cfg.seed },
        ResolutionMode::Resized,
        cfg.image_size,
        records,
    )
}

/// Base classes alternate between always and never showing the sky band, so
/// it is a predictive feature during training; held-out classes show it at
/// `spurious_prob` regardless of class.
fn sky_rate(cfg: &SyntheticShapesConfig, class: usize, base: usize) -> f64 {
    if cfg.spurious_prob == 0.0 {
        0.0
    } else if class >= base {
        cfg.spurious_prob
    } else if class % 2 == 0 {
        1.0
    } else {
        0.0
    }
}

fn uniform<R: Rng + ?Sized>(r: &mut R, lo: i32, hi: i32) -> i32 {
    // Integer draw over u32 so results do not depend on pointer width.
    lo + r.random_range(0..(hi - lo + 1) as u32) as i32
}

fn inside(shape: usize, dx: i32, dy: i32, radius: i32) -> bool {
    let t = (radius / 3).max(1);
    match shape {
        0 => {
            // Apex at -radius, base at +radius/2.
            dy >= -radius && 2 * dy <= radius && 1000 * dx.abs() <= 577 * (dy + radius)
        }
        1 => (dy >= -radius && dy <= -radius + 2 * t && dx.abs() <= radius) || (dx.abs() <= t && dy.abs() <= radius),
        2 => {
            (dx >= -radius && dx <= -radius + 2 * t && dy.abs() <= radius)
                || (dy <= radius && dy >= radius - 2 * t && dx >= -radius && dx <= radius * 2 / 3)
        }
        _ => {
            // Upper half disc, flat side down.
            let y = dy - radius / 2;
            y <= 0 && dx * dx + y * y <= radius * radius
        }
    }
}

fn render<R: Rng + ?Sized>(side: usize, shape: usize, color: usize, sky: bool, r: &mut R) -> Image<u8> {
    let s = side as i32;
    let level = uniform(r, 70, 130);
    let tint = [uniform(r, -15, 15), uniform(r, -15, 15), uniform(r, -15, 15)];
    let vignette = uniform(r, 30, 50);
    let cell = (s / 8).max(1);
    let cells = (s + cell - 1) / cell;
    let blotches: Vec<i32> = (0..cells * cells).map(|_| uniform(r, -20, 20)).collect();
    let sky_rows = if sky { s * 2 / 5 } else { 0 };

    let radius = uniform(r, s / 6, s / 4);
    let margin = radius + 2;
    let cx = uniform(r, margin, s - 1 - margin);
    let cy = uniform(r, margin, s - 1 - margin);
    let fill: Vec<i32> = (0..3)
        .map(|c| COLORS[color][c] + uniform(r, -25, 25))
        .collect();

    let center2 = s - 1; // doubled center coordinate
    let rmax2 = 2 * center2 * center2;
    let mut img = Image::new(3, side, side);
    for y in 0..s {
        for x in 0..s {
            let noise = uniform(r, -12, 12);
            let obj = inside(shape, x - cx, y - cy, radius);
            let (ddx, ddy) = (2 * x - center2, 2 * y - center2);
            let shade = -vignette * (ddx * ddx + ddy * ddy) / rmax2;
            let blotch = blotches[((y / cell) * cells + x / cell) as usize];
            for c in 0..3 {
                let v = if obj {
                    fill[c] + noise / 2
                } else if y < sky_rows {
                    SKY[c] + noise
                } else {
                    level + tint[c] + shade + blotch + noise
                };
                img.set(c, y as usize, x as usize, v.clamp(0, 255) as u8);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_counts() {
        let spec = generate_synthetic(&SyntheticShapesConfig::default()).unwrap();
        assert_eq!(spec.len(), 1440);
        assert_eq!(spec.classes_of(Partition::Train).len(), 16);
        assert_eq!(spec.classes_of(Partition::Val).len(), 4);
        assert_eq!(spec.classes_of(Partition::Test).len(), 4);
        assert!(spec.supports_high_res());
        let px = spec.load(0).unwrap();
        assert_eq!((px.channels(), px.height(), px.width()), (3, 64, 64));
    }

    #[test]
    fn generation_is_byte_reproducible() {
        let cfg = SyntheticShapesConfig {
            images_per_class: 3,
            spurious_prob: 0.5,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.load(i).unwrap(), b.load(i).unwrap());
        }
        let other = generate_synthetic(&SyntheticShapesConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.load(0).unwrap(), other.load(0).unwrap());
    }

    #[test]
    fn rejects_too_few_classes() {
        let cfg = SyntheticShapesConfig {
            n_classes: 2,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn small_class_counts_still_cover_all_partitions() {
        let cfg = SyntheticShapesConfig {
            n_classes: 3,
            images_per_class: 2,
            ..Default::default()
        };
        assert_eq!(cfg.partition_sizes(), (1, 1, 1));
        generate_synthetic(&cfg).unwrap();
    }
}
