//! Learned point-wise backprojection and the analytic FBP baseline.
//!
//! For every branch `c` and view `v`, filtered sample `f[v, d]` is expanded
//! by a per-view fully-connected layer into image row `d`:
//! `S[d, j] = f[v, d] * w[c, v, j] + b[c, v, j]`. The smear is rotated back
//! to its view angle with the transpose bilinear rotation and summed over
//! views; branches are averaged and the result carries the per-view
//! quadrature weight. With unit weights and zero biases this is exactly the
//! scaled [`Projector::adjoint`].

use rand::Rng;

use crate::error::{DnaError, Result};
use crate::filtration::RampFilter;
use crate::geometry::{apply_circle_mask, GeometryConfig, Projector};
use crate::params::{join, Parameters};
use crate::tensor::{Real, Tensor};

/// Paper-scale branch count.
pub const DEFAULT_BRANCHES: usize = 23;

/// `2 * C * N * N_c`: one weight and one bias per branch, view and image column.
pub fn bp_param_count(branches: usize, image_size: usize, num_views: usize) -> u64 {
    2 * branches as u64 * image_size as u64 * num_views as u64
}

#[derive(Clone, Debug)]
pub struct PointwiseBPParams {
    /// `[C, N_c, N]`
    pub weights: Tensor,
    /// `[C, N_c, N]`
    pub biases: Tensor,
}

impl PointwiseBPParams {
    pub fn identity(branches: usize, geo: &GeometryConfig) -> Self {
        let shape = [branches, geo.num_views, geo.image_size];
        PointwiseBPParams {
            weights: Tensor::full(&shape, 1.0),
            biases: Tensor::zeros(&shape),
        }
    }

    /// Unit weights perturbed by `N(0, std^2)`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        branches: usize,
        geo: &GeometryConfig,
        std: Real,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::identity(branches, geo);
        let noise = Tensor::randn(p.weights.shape(), std, rng);
        p.weights.add_assign(&noise);
        p
    }

    pub fn branches(&self) -> usize {
        self.weights.dim(0)
    }

    fn check(&self, geo: &GeometryConfig) -> Result<()> {
        let shape = [self.branches(), geo.num_views, geo.image_size];
        self.weights.expect_shape("pointwise_backproject", &shape)?;
        self.biases.expect_shape("pointwise_backproject", &shape)
    }
}

impl Parameters for PointwiseBPParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weights"), &self.weights);
        f(&join(prefix, "biases"), &self.biases);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weights"), &mut self.weights);
        f(&join(prefix, "biases"), &mut self.biases);
    }
}

/// Shared machinery for the learned and the analytic backprojection.
#[derive(Clone, Debug)]
pub struct Backprojector {
    projector: Projector,
    ramp: RampFilter,
}

impl Backprojector {
    pub fn new(geo: &GeometryConfig) -> Result<Self> {
        Ok(Backprojector {
            projector: Projector::new(geo)?,
            ramp: RampFilter::new(geo.num_detectors),
        })
    }

    pub fn geometry(&self) -> &GeometryConfig {
        self.projector.geometry()
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn ramp(&self) -> &RampFilter {
        &self.ramp
    }

    fn check_input(&self, filtered: &Tensor) -> Result<usize> {
        let geo = self.geometry();
        if filtered.rank() != 4
            || filtered.dim(1) != 1
            || filtered.dim(2) != geo.num_views
            || filtered.dim(3) != geo.image_size
        {
            return Err(DnaError::shape(
                "pointwise_backproject",
                format!(
                    "expected [B, 1, {}, {}], got {:?}",
                    geo.num_views,
                    geo.image_size,
                    filtered.shape()
                ),
            ));
        }
        Ok(filtered.dim(0))
    }

    /// `[B, 1, N_c, N]` filtered sinograms to `[B, 1, N, N]` images.
    pub fn forward(&self, filtered: &Tensor, params: &PointwiseBPParams) -> Result<Tensor> {
        let batch = self.check_input(filtered)?;
        let geo = self.geometry();
        params.check(geo)?;
        let (n, nv, nc) = (geo.image_size, geo.num_views, params.branches());
        let plane = n * n;
        let mut out = Tensor::zeros(&geo.image_shape(batch));
        let mut smear = vec![0.0; plane];
        let mut first = vec![0.0; plane];
        let mut branch = vec![0.0; plane];
        let mut spread = vec![0.0; plane];
        let inv_c = 1.0 / nc as Real;
        for b in 0..batch {
            for c in 0..nc {
                let acc = if c == 0 { &mut first } else { &mut branch };
                acc.iter_mut().for_each(|v| *v = 0.0);
                for (v, plan) in self.projector.plans().iter().enumerate() {
                    let f = &filtered.data()[(b * nv + v) * n..(b * nv + v + 1) * n];
                    let off = (c * nv + v) * n;
                    let w = &params.weights.data()[off..off + n];
                    let bias = &params.biases.data()[off..off + n];
                    for (d, line) in smear.chunks_mut(n).enumerate() {
                        for ((s, &wj), &bj) in line.iter_mut().zip(w).zip(bias) {
                            *s = f[d] * wj + bj;
                        }
                    }
                    plan.apply_adjoint_acc(&smear, acc);
                }
                if c > 0 {
                    for ((s, &bc), &b0) in spread.iter_mut().zip(branch.iter()).zip(first.iter()) {
                        *s += bc - b0;
                    }
                }
            }
            // mean = first + (1/C) * sum_c (branch_c - first), exact when all branches agree
            let dst = &mut out.data_mut()[b * plane..(b + 1) * plane];
            for ((o, &f0), s) in dst.iter_mut().zip(&first).zip(spread.iter_mut()) {
                *o = f0 + inv_c * *s;
                *s = 0.0;
            }
        }
        out.scale(geo.backprojection_scale());
        Ok(out)
    }

    /// Accumulates parameter gradients; returns the cotangent of `filtered`.
    pub fn backward(
        &self,
        filtered: &Tensor,
        params: &mut PointwiseBPParams,
        dy: &Tensor,
    ) -> Result<Tensor> {
        let batch = self.check_input(filtered)?;
        let geo = self.geometry().clone();
        params.check(&geo)?;
        dy.expect_shape("pointwise_backproject", &geo.image_shape(batch))?;
        let (n, nv, nc) = (geo.image_size, geo.num_views, params.branches());
        let plane = n * n;
        let coeff = geo.backprojection_scale() / nc as Real;
        let mut d_filtered = Tensor::zeros(filtered.shape());
        let mut g = vec![0.0; plane];
        let mut col_f = vec![0.0; n];
        let mut col = vec![0.0; n];
        let mut w_sum = vec![0.0; nv * n];
        for c in 0..nc {
            for (i, s) in w_sum.iter_mut().enumerate() {
                *s += params.weights.data()[c * nv * n + i];
            }
        }
        let scaled: Vec<Real> = dy.data().iter().map(|&v| v * coeff).collect();
        let (_, dw) = params.weights.data_and_grad_mut();
        let mut dw_acc = vec![0.0; nv * n];
        let mut db_acc = vec![0.0; nv * n];
        for b in 0..batch {
            let src = &scaled[b * plane..(b + 1) * plane];
            for (v, plan) in self.projector.plans().iter().enumerate() {
                plan.apply(src, &mut g);
                let f = &filtered.data()[(b * nv + v) * n..(b * nv + v + 1) * n];
                col_f.iter_mut().for_each(|x| *x = 0.0);
                col.iter_mut().for_each(|x| *x = 0.0);
                let df = &mut d_filtered.data_mut()[(b * nv + v) * n..(b * nv + v + 1) * n];
                let ws = &w_sum[v * n..(v + 1) * n];
                for (d, line) in g.chunks(n).enumerate() {
                    let mut dot = 0.0;
                    for j in 0..n {
                        col_f[j] += line[j] * f[d];
                        col[j] += line[j];
                        dot += line[j] * ws[j];
                    }
                    df[d] += dot;
                }
                for j in 0..n {
                    dw_acc[v * n + j] += col_f[j];
                    db_acc[v * n + j] += col[j];
                }
            }
        }
        // every branch sees the same cotangent
        for c in 0..nc {
            for (d, a) in dw[c * nv * n..(c + 1) * nv * n].iter_mut().zip(&dw_acc) {
                *d += a;
            }
        }
        let db = params.biases.grad_mut();
        for c in 0..nc {
            for (d, a) in db[c * nv * n..(c + 1) * nv * n].iter_mut().zip(&db_acc) {
                *d += a;
            }
        }
        Ok(d_filtered)
    }

    /// Ramp filter, unscaled adjoint, quadrature weight, circle mask.
    pub fn fbp(&self, sino: &Tensor) -> Result<Tensor> {
        let filtered = self.ramp.apply(sino)?;
        let mut img = self.projector.adjoint(&filtered)?;
        img.scale(self.geometry().backprojection_scale());
        apply_circle_mask(&mut img);
        Ok(img)
    }
}

pub fn pointwise_backproject(
    filtered: &Tensor,
    params: &PointwiseBPParams,
    geo: &GeometryConfig,
) -> Result<Tensor> {
    Backprojector::new(geo)?.forward(filtered, params)
}

pub fn fbp_reconstruct(sino: &Tensor, geo: &GeometryConfig) -> Result<Tensor> {
    Backprojector::new(geo)?.fbp(sino)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_law() {
        assert_eq!(bp_param_count(1, 8, 1), 16);
        assert_eq!(
            bp_param_count(23, 256, 49) - bp_param_count(23, 256, 39),
            117_760
        );
        let geo = GeometryConfig::new(16, 5).unwrap();
        let p = PointwiseBPParams::identity(3, &geo);
        assert_eq!(p.param_count() as u64, bp_param_count(3, 16, 5));
    }

    #[test]
    fn identity_reduces_to_scaled_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geo = GeometryConfig::new(16, 6).unwrap();
        let bp = Backprojector::new(&geo).unwrap();
        let f = Tensor::randn(&geo.sinogram_shape(2), 1.0, &mut rng);
        for c in [1usize, 3, 4] {
            let got = bp
                .forward(&f, &PointwiseBPParams::identity(c, &geo))
                .unwrap();
            let mut want = bp.projector().adjoint(&f).unwrap();
            want.scale(geo.backprojection_scale());
            assert_eq!(got, want, "C = {}", c);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geo = GeometryConfig::new(16, 4).unwrap();
        let p = PointwiseBPParams::init(2, &geo, 0.1, &mut rng);
        let out = pointwise_backproject(&Tensor::zeros(&geo.sinogram_shape(1)), &p, &geo).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_in_input_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geo = GeometryConfig::new(16, 4).unwrap();
        let p = PointwiseBPParams::init(2, &geo, 0.5, &mut rng);
        let x = Tensor::randn(&geo.sinogram_shape(1), 1.0, &mut rng);
        let y = Tensor::randn(&geo.sinogram_shape(1), 1.0, &mut rng);
        let mut comb = x.clone();
        comb.scale(0.5);
        comb.axpy(2.0, &y);
        let mut want = pointwise_backproject(&x, &p, &geo).unwrap();
        want.scale(0.5);
        want.axpy(2.0, &pointwise_backproject(&y, &p, &geo).unwrap());
        let got = pointwise_backproject(&comb, &p, &geo).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-5 * 10.0);
    }

    #[test]
    fn rejects_mismatched_params() {
        let geo = GeometryConfig::new(16, 4).unwrap();
        let other = GeometryConfig::new(16, 5).unwrap();
        let p = PointwiseBPParams::identity(1, &other);
        assert!(pointwise_backproject(&Tensor::zeros(&geo.sinogram_shape(1)), &p, &geo).is_err());
        assert!(fbp_reconstruct(&Tensor::zeros(&other.sinogram_shape(1)), &geo).is_err());
    }

    #[test]
    fn zero_sinogram_fbp() {
        let geo = GeometryConfig::new(16, 4).unwrap();
        let img = fbp_reconstruct(&Tensor::zeros(&geo.sinogram_shape(1)), &geo).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }
}
