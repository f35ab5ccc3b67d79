use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2x2 max-pool, stride 2, floor semantics. Returns the output and, per
/// output element, the flat input offset (within its image) of the maximum.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut arg = vec![0u32; b * c * oh * ow];
    let per = c * oh * ow;
    for i in 0..b {
        let src = x.row(i);
        let dst = out.row_mut(i);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = ch * h * w + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if src[at] > src[best] {
                            best = at;
                        }
                    }
                    let o = (ch * oh + y) * ow + xx;
                    dst[o] = src[best];
                    arg[i * per + o] = best as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u32], in_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let per = dy.row_len();
    for i in 0..in_shape[0] {
        let g = dy.row(i);
        let out = dx.row_mut(i);
        for (o, &a) in arg[i * per..(i + 1) * per].iter().enumerate() {
            out[a as usize] += g[o];
        }
    }
    dx
}

/// Mean over spatial positions: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (x.dim(0), x.dim(1));
    let s: usize = x.shape()[2..].iter().product();
    let inv = T::one() / T::lit(s as f64);
    let mut out = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let src = x.row(i);
        let dst = out.row_mut(i);
        for ch in 0..c {
            dst[ch] = src[ch * s..(ch + 1) * s].iter().copied().sum::<T>() * inv;
        }
    }
    out
}

pub fn global_avg_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (b, c) = (in_shape[0], in_shape[1]);
    let s: usize = in_shape[2..].iter().product();
    let inv = T::one() / T::lit(s as f64);
    let mut dx = Tensor::zeros(in_shape);
    for i in 0..b {
        let g = dy.row(i);
        let out = dx.row_mut(i);
        for ch in 0..c {
            out[ch * s..(ch + 1) * s]
                .iter_mut()
                .for_each(|v| *v = g[ch] * inv);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_block_maximum_and_routes_gradient() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (y, arg) = maxpool2_forward::<f64>(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dx = maxpool2_backward(&Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap(), &arg, x.shape());
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn odd_sizes_floor() {
        let x = Tensor::<f32>::zeros(&[2, 3, 5, 5]);
        let (y, _) = maxpool2_forward(&x);
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
    }
}
