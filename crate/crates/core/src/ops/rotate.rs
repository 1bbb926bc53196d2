//! Bilinear image rotation about the pixel-grid centre `(N - 1) / 2`.
//!
//! Output pixel `p` samples the input at the inverse-rotated coordinate.
//! Samples that fall outside the image read as zero. The transpose of that
//! sampling (scatter with the same weights) is the exact adjoint and is what
//! the backprojectors use.

use crate::error::{DnaError, Result};
use crate::tensor::{Real, Tensor};

/// Four bilinear taps for every output pixel of an `n x n` image.
#[derive(Clone, Debug)]
pub struct RotationPlan {
    n: usize,
    theta: f64,
    idx: Vec<[u32; 4]>,
    wts: Vec<[Real; 4]>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

impl RotationPlan {
    pub fn new(n: usize, theta: f64) -> Self {
        let c = (n as f64 - 1.0) / 2.0;
        let (s, co) = theta.sin_cos();
        let mut idx = Vec::with_capacity(n * n);
        let mut wts = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - c;
                let dy = y as f64 - c;
                let sx = snap(co * dx + s * dy + c);
                let sy = snap(-s * dx + co * dy + c);
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let mut ti = [0u32; 4];
                let mut tw = [0.0 as Real; 4];
                let taps = [
                    (y0, x0, (1.0 - fx) * (1.0 - fy)),
                    (y0, x0 + 1.0, fx * (1.0 - fy)),
                    (y0 + 1.0, x0, (1.0 - fx) * fy),
                    (y0 + 1.0, x0 + 1.0, fx * fy),
                ];
                for (t, &(ty, tx, w)) in taps.iter().enumerate() {
                    if w != 0.0 && ty >= 0.0 && tx >= 0.0 && ty < n as f64 && tx < n as f64 {
                        ti[t] = (ty as usize * n + tx as usize) as u32;
                        tw[t] = w as Real;
                    }
                }
                idx.push(ti);
                wts.push(tw);
            }
        }
        RotationPlan { n, theta, idx, wts }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    /// `out = R(src)` for one `n x n` plane.
    pub fn apply(&self, src: &[Real], out: &mut [Real]) {
        for ((o, ti), tw) in out.iter_mut().zip(&self.idx).zip(&self.wts) {
            *o = tw[0] * src[ti[0] as usize]
                + tw[1] * src[ti[1] as usize]
                + tw[2] * src[ti[2] as usize]
                + tw[3] * src[ti[3] as usize];
        }
    }

    /// `acc += R^T(src)` for one plane (exact adjoint of [`apply`](Self::apply)).
    pub fn apply_adjoint_acc(&self, src: &[Real], acc: &mut [Real]) {
        for ((&g, ti), tw) in src.iter().zip(&self.idx).zip(&self.wts) {
            if g == 0.0 {
                continue;
            }
            for t in 0..4 {
                acc[ti[t] as usize] += tw[t] * g;
            }
        }
    }
}

fn check_square(op: &'static str, img: &Tensor) -> Result<usize> {
    if img.rank() != 4 || img.dim(2) != img.dim(3) {
        return Err(DnaError::shape(
            op,
            format!("expected [B, C, N, N], got {:?}", img.shape()),
        ));
    }
    Ok(img.dim(2))
}

/// Rotates every plane of a `[B, C, N, N]` tensor by `theta` radians.
pub fn rotate_bilinear(img: &Tensor, theta: f64) -> Result<Tensor> {
    let n = check_square("rotate_bilinear", img)?;
    let plan = RotationPlan::new(n, theta);
    let mut out = Tensor::zeros(img.shape());
    for (src, dst) in img
        .data()
        .chunks(n * n)
        .zip(out.data_mut().chunks_mut(n * n))
    {
        plan.apply(src, dst);
    }
    Ok(out)
}

/// Vector-Jacobian product of [`rotate_bilinear`]: the transpose sampling.
pub fn rotate_bilinear_adjoint(grad: &Tensor, theta: f64) -> Result<Tensor> {
    let n = check_square("rotate_bilinear_adjoint", grad)?;
    let plan = RotationPlan::new(n, theta);
    let mut out = Tensor::zeros(grad.shape());
    for (src, dst) in grad
        .data()
        .chunks(n * n)
        .zip(out.data_mut().chunks_mut(n * n))
    {
        plan.apply_adjoint_acc(src, dst);
    }
    Ok(out)
}
