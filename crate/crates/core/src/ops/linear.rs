//! Fully-connected layer on `[B, in]` inputs with `[out, in]` weights.

use crate::error::{DnaError, Result};
use crate::ops::gemm::gemm;
use crate::tensor::{Real, Tensor};

fn check(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 || w.rank() != 2 {
        return Err(DnaError::shape(
            "linear",
            format!("input {:?}, weight {:?}", x.shape(), w.shape()),
        ));
    }
    let b = x.dim(0);
    let fan_in = x.len() / b.max(1);
    if fan_in != w.dim(1) {
        return Err(DnaError::shape(
            "linear",
            format!("{} input features, weight {:?}", fan_in, w.shape()),
        ));
    }
    Ok((b, fan_in, w.dim(0)))
}

/// `y = x W^T + b`; trailing input dims are flattened.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bn, fin, fout) = check(x, w)?;
    let mut y = vec![0.0; bn * fout];
    for row in y.chunks_mut(fout) {
        row.copy_from_slice(b.data());
    }
    gemm(
        bn,
        fin,
        fout,
        1.0,
        x.data(),
        fin as isize,
        1,
        w.data(),
        1,
        fin as isize,
        1.0,
        &mut y,
        fout as isize,
        1,
    );
    Tensor::from_vec(&[bn, fout], y)
}

/// Input cotangent, shaped like `x_shape`.
pub fn linear_input_grad(dy: &Tensor, w: &Tensor, x_shape: &[usize]) -> Result<Tensor> {
    let (bn, fout) = (dy.dim(0), dy.dim(1));
    let fin = w.dim(1);
    let mut dx = vec![0.0; bn * fin];
    gemm(
        bn,
        fout,
        fin,
        1.0,
        dy.data(),
        fout as isize,
        1,
        w.data(),
        fin as isize,
        1,
        0.0,
        &mut dx,
        fin as isize,
        1,
    );
    Tensor::from_vec(x_shape, dx)
}

/// Accumulates `dW += dy^T x`.
pub fn linear_weight_grad(x: &Tensor, dy: &Tensor, dw: &mut [Real]) {
    let (bn, fout) = (dy.dim(0), dy.dim(1));
    let fin = x.len() / bn;
    gemm(
        fout,
        bn,
        fin,
        1.0,
        dy.data(),
        1,
        fout as isize,
        x.data(),
        fin as isize,
        1,
        1.0,
        dw,
        fin as isize,
        1,
    );
}

pub fn linear_bias_grad(dy: &Tensor, db: &mut [Real]) {
    let fout = dy.dim(1);
    for row in dy.data().chunks(fout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_layer() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, -1.0, 1.0]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0, 1.0, 1.0]);

        let dy = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let dx = linear_input_grad(&dy, &w, &[2, 3]).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let mut dw = vec![0.0; 6];
        linear_weight_grad(&x, &dy, &mut dw);
        assert_eq!(dw, vec![1.0, 2.0, 3.0, 0.0, -2.0, 2.0]);
    }
}
