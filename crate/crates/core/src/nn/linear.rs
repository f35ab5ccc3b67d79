//! Affine maps over `[B, in]` with weights stored `[out, in]`.

use crate::scalar::Scalar;
use crate::tensor::{gemm, MatRef, Tensor};

pub fn forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let (b, din) = (x.dim(0), x.dim(1));
    let dout = weight.dim(0);
    let mut y = Tensor::zeros(&[b, dout]);
    if let Some(bias) = bias {
        for i in 0..b {
            y.row_mut(i).copy_from_slice(bias.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(
        T::one(),
        MatRef::new(x.data(), b, din),
        MatRef::new(weight.data(), dout, din).t(),
        beta,
        y.data_mut(),
    );
    y
}

/// Accumulates weight/bias gradients; returns `dx` when requested.
pub fn backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: Option<&mut Tensor<T>>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (b, din) = (x.dim(0), x.dim(1));
    let dout = weight.dim(0);
    let g = MatRef::new(dy.data(), b, dout);
    gemm(
        T::one(),
        g.t(),
        MatRef::new(x.data(), b, din),
        T::one(),
        dweight.data_mut(),
    );
    if let Some(db) = dbias {
        for i in 0..b {
            for (acc, &v) in db.data_mut().iter_mut().zip(dy.row(i)) {
                *acc += v;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = Tensor::zeros(&[b, din]);
        gemm(
            T::one(),
            g,
            MatRef::new(weight.data(), dout, din),
            T::zero(),
            dx.data_mut(),
        );
        dx
    })
}
