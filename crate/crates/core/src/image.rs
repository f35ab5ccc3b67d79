//! Channel-major image buffers and the pixel-level operations shared by the
//! input pipelines, pretext transforms, and voting copies.

use std::path::Path;

use crate::error::{Error, Result};

/// `[C, H, W]` image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image<P> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<P>,
}

/// Integer source rectangle, `(top, left, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl<P: Copy + Default> Image<P> {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![P::default(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn into_data(self) -> Vec<P> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> P {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: P) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn crop(&self, r: Rect) -> Self {
        assert!(r.top + r.height <= self.height && r.left + r.width <= self.width);
        let mut out = Self::new(self.channels, r.height, r.width);
        for c in 0..self.channels {
            for y in 0..r.height {
                let src = (c * self.height + r.top + y) * self.width + r.left;
                let dst = (c * r.height + y) * r.width;
                out.data[dst..dst + r.width].copy_from_slice(&self.data[src..src + r.width]);
            }
        }
        out
    }

    /// Writes `patch` with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, patch: &Self, top: usize, left: usize) {
        for c in 0..self.channels {
            for y in 0..patch.height {
                let dst = (c * self.height + top + y) * self.width + left;
                let src = (c * patch.height + y) * patch.width;
                self.data[dst..dst + patch.width].copy_from_slice(&patch.data[src..src + patch.width]);
            }
        }
    }

    /// Counter-clockwise rotation by `quarter_turns · 90°` of a square image.
    ///
    /// One quarter turn sends pixel `(y, x)` to `(W−1−x, y)`.
    pub fn rotate_quarter(&self, quarter_turns: usize) -> Self {
        let n = self.height;
        debug_assert_eq!(n, self.width);
        let r = quarter_turns % 4;
        if r == 0 {
            return self.clone();
        }
        let mut out = Self::new(self.channels, n, n);
        for c in 0..self.channels {
            for y in 0..n {
                for x in 0..n {
                    let (ny, nx) = match r {
                        1 => (n - 1 - x, y),
                        2 => (n - 1 - y, n - 1 - x),
                        _ => (x, n - 1 - y),
                    };
                    out.set(c, ny, nx, self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    pub fn map<Q: Copy + Default>(&self, f: impl Fn(P) -> Q) -> Image<Q> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }
}

impl Image<u8> {
    pub fn to_unit(&self) -> Image<f32> {
        self.map(|p| f32::from(p) / 255.0)
    }

    /// Decodes any PNG/JPEG file into an RGB image.
    pub fn decode_file(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb(&decoded.to_rgb8()))
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory(bytes).map_err(|e| Error::Decode {
            path: "<memory>".into(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb(&decoded.to_rgb8()))
    }

    fn from_rgb(rgb: &image::RgbImage) -> Self {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Self::new(3, h, w);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c]);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        assert_eq!(self.channels, 3);
        let mut rgb = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = self.get(c, y as usize, x as usize);
            }
        }
        rgb.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::format(path, other.to_string()),
        })
    }
}

impl Image<f32> {
    /// Bilinear resampling of the region `src` to `out_h × out_w`, with
    /// half-pixel centers (`align_corners = false`) and edge clamping.
    pub fn resample(&self, src: Rect, out_h: usize, out_w: usize) -> Self {
        if src.height == out_h && src.width == out_w {
            return self.crop(src);
        }
        let sy = src.height as f64 / out_h as f64;
        let sx = src.width as f64 / out_w as f64;
        let taps = |dst: usize, scale: f64, offset: usize, extent: usize| {
            let pos = (dst as f64 + 0.5) * scale - 0.5;
            let pos = pos.clamp(0.0, (extent - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            let frac = (pos - i0 as f64) as f32;
            (offset + i0, offset + i1, frac)
        };
        let ys: Vec<_> = (0..out_h).map(|y| taps(y, sy, src.top, src.height)).collect();
        let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, src.left, src.width)).collect();
        let mut out = Self::new(self.channels, out_h, out_w);
        for c in 0..self.channels {
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    out.set(c, y, x, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        self.resample(self.full_rect(), out_h, out_w)
    }

    pub fn full_rect(&self) -> Rect {
        Rect {
            top: 0,
            left: 0,
            height: self.height,
            width: self.width,
        }
    }
}
