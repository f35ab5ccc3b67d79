//! Stride-1 "same" 2-D convolution via im2col.

use crate::scalar::Scalar;
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut out[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[ch * hw + sy as usize * w..ch * hw + (sy as usize + 1) * w];
                    for (x, v) in line.iter_mut().enumerate() {
                        let sx = x as isize + kj as isize - pad as isize;
                        *v = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, img: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ch * hw + sy as usize * w;
                    for x in 0..w {
                        let sx = x as isize + kj as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            img[base + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass over `[B, C, H, W]`. Returns the output and, when
/// `keep_cols`, the unfolded input needed by [`backward`].
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    shape: ConvShape,
    keep_cols: bool,
) -> (Tensor<T>, Option<Vec<T>>) {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    debug_assert_eq!(c, shape.in_c);
    let hw = h * w;
    let patch = shape.patch();
    let mut out = Tensor::zeros(&[b, shape.out_c, h, w]);
    let mut all_cols = if keep_cols {
        vec![T::zero(); b * patch * hw]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols {
        Vec::new()
    } else {
        vec![T::zero(); patch * hw]
    };
    let wmat = MatRef::new(weight.data(), shape.out_c, patch);
    for i in 0..b {
        let cols: &mut [T] = if keep_cols {
            &mut all_cols[i * patch * hw..(i + 1) * patch * hw]
        } else {
            &mut scratch
        };
        im2col(x.row(i), c, h, w, shape.k, shape.pad(), cols);
        let dst = out.row_mut(i);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), wmat, MatRef::new(cols, patch, hw), beta, dst);
    }
    (out, keep_cols.then_some(all_cols))
}

/// Reverse pass. Accumulates into `dweight`/`dbias`; returns the input
/// gradient only when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    dout: &Tensor<T>,
    cols: &[T],
    in_shape: &[usize],
    weight: &Tensor<T>,
    shape: ConvShape,
    dweight: &mut Tensor<T>,
    dbias: Option<&mut Tensor<T>>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let hw = h * w;
    let patch = shape.patch();
    if let Some(db) = dbias {
        let dbd = db.data_mut();
        for i in 0..b {
            let g = dout.row(i);
            for (o, acc) in dbd.iter_mut().enumerate() {
                *acc += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
    let mut dx = need_dx.then(|| Tensor::zeros(in_shape));
    let mut dcols = vec![T::zero(); if need_dx { patch * hw } else { 0 }];
    for i in 0..b {
        let g = MatRef::new(dout.row(i), shape.out_c, hw);
        let col = MatRef::new(&cols[i * patch * hw..(i + 1) * patch * hw], patch, hw);
        gemm(T::one(), g, col.t(), T::one(), dweight.data_mut());
        if let Some(dx) = dx.as_mut() {
            let wmat = MatRef::new(weight.data(), shape.out_c, patch);
            gemm(T::one(), wmat.t(), g, T::zero(), &mut dcols);
            col2im(&dcols, c, h, w, shape.k, shape.pad(), dx.row_mut(i));
        }
    }
    dx
}
