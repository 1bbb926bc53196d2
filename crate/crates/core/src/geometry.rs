//! Parallel-beam geometry and the rotate-and-sum projector pair.
//!
//! Images are `[B, 1, N, N]` tensors and sinograms `[B, 1, N_c, N_d]` with
//! `N_d = N`. Detector bin `d` is image row `d` of the view-rotated image,
//! so a projection sums each row of `rotate_bilinear(img, angle)`, and the
//! adjoint smears bin `d` along row `d` before applying the transpose
//! rotation.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{DnaError, Result};
use crate::ops::RotationPlan;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub image_size: usize,
    pub num_views: usize,
    pub num_detectors: usize,
    /// Radians covered by the equally spaced views (endpoint excluded).
    pub angular_span: f64,
}

impl GeometryConfig {
    pub fn new(image_size: usize, num_views: usize) -> Result<Self> {
        let geo = GeometryConfig {
            image_size,
            num_views,
            num_detectors: image_size,
            angular_span: PI,
        };
        geo.validate()?;
        Ok(geo)
    }

    pub fn with_span(mut self, angular_span: f64) -> Result<Self> {
        self.angular_span = angular_span;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(DnaError::Config(format!(
                "image size {} < 8",
                self.image_size
            )));
        }
        if self.num_views == 0 {
            return Err(DnaError::Config("at least one view is required".into()));
        }
        if self.num_detectors != self.image_size {
            return Err(DnaError::Config(format!(
                "detector count {} must equal image size {}",
                self.num_detectors, self.image_size
            )));
        }
        if !(self.angular_span.is_finite() && self.angular_span > 0.0) {
            return Err(DnaError::Config(format!(
                "angular span {} must be positive",
                self.angular_span
            )));
        }
        Ok(())
    }

    /// `angles[i] = i * span / N_c`.
    pub fn angles(&self) -> Vec<f64> {
        (0..self.num_views)
            .map(|i| i as f64 * self.angular_span / self.num_views as f64)
            .collect()
    }

    /// Quadrature weight of one view in the backprojection sum.
    ///
    /// Parallel-beam data are pi-periodic, so a 2pi scan counts every ray
    /// twice and gets half the per-view weight.
    pub fn backprojection_scale(&self) -> Real {
        let turns = (self.angular_span / PI).max(1.0);
        (self.angular_span / turns / self.num_views as f64) as Real
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.image_size, self.image_size]
    }

    pub fn sinogram_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.num_views, self.num_detectors]
    }
}

/// Zeroes every pixel whose centre lies farther than `N / 2` from the image
/// centre. Works on any tensor whose two trailing axes are `N x N`.
pub fn circle_mask(img: &Tensor) -> Tensor {
    let mut out = img.clone();
    apply_circle_mask(&mut out);
    out
}

pub fn apply_circle_mask(img: &mut Tensor) {
    let r = img.rank();
    let n = img.dim(r - 1);
    debug_assert_eq!(img.dim(r - 2), n);
    let mask = circle_mask_plane(n);
    for plane in img.data_mut().chunks_mut(n * n) {
        for (v, &keep) in plane.iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

pub fn circle_mask_plane(n: usize) -> Vec<bool> {
    let c = (n as f64 - 1.0) / 2.0;
    let r2 = (n as f64 / 2.0).powi(2);
    (0..n * n)
        .map(|i| {
            let dy = (i / n) as f64 - c;
            let dx = (i % n) as f64 - c;
            dx * dx + dy * dy <= r2
        })
        .collect()
}

/// Forward projector and its adjoint with cached per-view rotation plans.
#[derive(Clone, Debug)]
pub struct Projector {
    geo: GeometryConfig,
    plans: Vec<RotationPlan>,
}

impl Projector {
    pub fn new(geo: &GeometryConfig) -> Result<Self> {
        geo.validate()?;
        let plans = geo
            .angles()
            .into_iter()
            .map(|a| RotationPlan::new(geo.image_size, a))
            .collect();
        Ok(Projector {
            geo: geo.clone(),
            plans,
        })
    }

    pub fn geometry(&self) -> &GeometryConfig {
        &self.geo
    }

    pub fn plans(&self) -> &[RotationPlan] {
        &self.plans
    }

    fn batch_of(&self, op: &'static str, t: &Tensor, rows: usize) -> Result<usize> {
        let n = self.geo.image_size;
        if t.rank() != 4 || t.dim(1) != 1 || t.dim(2) != rows || t.dim(3) != n {
            return Err(DnaError::shape(
                op,
                format!("expected [B, 1, {}, {}], got {:?}", rows, n, t.shape()),
            ));
        }
        Ok(t.dim(0))
    }

    /// Sinogram row `v` holds the row sums of the image rotated by `angles[v]`.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let n = self.geo.image_size;
        let batch = self.batch_of("radon_forward", img, n)?;
        let nv = self.geo.num_views;
        let mut sino = Tensor::zeros(&self.geo.sinogram_shape(batch));
        let mut rot = vec![0.0; n * n];
        for b in 0..batch {
            let src = &img.data()[b * n * n..(b + 1) * n * n];
            for (v, plan) in self.plans.iter().enumerate() {
                plan.apply(src, &mut rot);
                let row = &mut sino.data_mut()[(b * nv + v) * n..(b * nv + v + 1) * n];
                for (d, r) in row.iter_mut().zip(rot.chunks(n)) {
                    *d = r.iter().sum();
                }
            }
        }
        Ok(sino)
    }

    /// Unscaled backprojection: the exact transpose of [`forward`](Self::forward).
    pub fn adjoint(&self, sino: &Tensor) -> Result<Tensor> {
        let n = self.geo.image_size;
        let batch = self.batch_of("radon_adjoint", sino, self.geo.num_views)?;
        let nv = self.geo.num_views;
        let mut img = Tensor::zeros(&self.geo.image_shape(batch));
        let mut smear = vec![0.0; n * n];
        for b in 0..batch {
            let acc = &mut img.data_mut()[b * n * n..(b + 1) * n * n];
            for (v, plan) in self.plans.iter().enumerate() {
                let row = &sino.data()[(b * nv + v) * n..(b * nv + v + 1) * n];
                for (d, line) in smear.chunks_mut(n).enumerate() {
                    line.iter_mut().for_each(|s| *s = row[d]);
                }
                plan.apply_adjoint_acc(&smear, acc);
            }
        }
        Ok(img)
    }
}

pub fn radon_forward(img: &Tensor, geo: &GeometryConfig) -> Result<Tensor> {
    Projector::new(geo)?.forward(img)
}

pub fn radon_adjoint(sino: &Tensor, geo: &GeometryConfig) -> Result<Tensor> {
    Projector::new(geo)?.adjoint(sino)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn angles_are_equally_spaced_without_endpoint() {
        let geo = GeometryConfig::new(16, 4).unwrap();
        let a = geo.angles();
        assert_eq!(a.len(), 4);
        assert_eq!(a[0], 0.0);
        assert!((a[2] - PI / 2.0).abs() < 1e-15);
        assert!(a[3] < PI);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(GeometryConfig::new(4, 4).is_err());
        assert!(GeometryConfig::new(16, 0).is_err());
        assert!(GeometryConfig::new(16, 4).unwrap().with_span(0.0).is_err());
    }

    #[test]
    fn mask_corner_centre_and_idempotence() {
        let img = Tensor::full(&[1, 1, 16, 16], 1.0);
        let m = circle_mask(&img);
        assert_eq!(m.data()[0], 0.0);
        assert_eq!(m.data()[8 * 16 + 8], 1.0);
        assert_eq!(circle_mask(&m), m);
    }

    #[test]
    fn zero_in_zero_out() {
        let geo = GeometryConfig::new(16, 5).unwrap();
        let p = Projector::new(&geo).unwrap();
        assert!(p
            .forward(&Tensor::zeros(&geo.image_shape(2)))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(p
            .adjoint(&Tensor::zeros(&geo.sinogram_shape(2)))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn centred_disk_projects_alike_from_every_angle() {
        let n = 64;
        let img =
            crate::data_io::render_phantom(&crate::data_io::EllipsePhantomSpec::disk(0.6, 0.8), n)
                .unwrap();
        let sino = radon_forward(&img, &GeometryConfig::new(n, 8).unwrap()).unwrap();
        let d = sino.data();
        let peak = d[..n].iter().cloned().fold(0.0, Real::max);
        let sum0: Real = d[..n].iter().sum();
        for r in 1..8 {
            let row = &d[r * n..(r + 1) * n];
            assert!((row.iter().sum::<Real>() - sum0).abs() <= 1e-3 * sum0);
            // pixelated rim
            assert!(row
                .iter()
                .zip(&d[..n])
                .all(|(a, b)| (a - b).abs() <= 0.06 * peak));
        }
    }

    #[test]
    fn single_view_delta_gives_stripe() {
        let geo = GeometryConfig::new(16, 1).unwrap();
        let mut sino = Tensor::zeros(&geo.sinogram_shape(1));
        sino.data_mut()[5] = 2.0;
        let img = radon_adjoint(&sino, &geo).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let want = if y == 5 { 2.0 } else { 0.0 };
                assert_eq!(img.data()[y * 16 + x], want);
            }
        }
    }

    #[test]
    fn adjoint_pairing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [16usize, 32] {
            let geo = GeometryConfig::new(n, 7).unwrap();
            let p = Projector::new(&geo).unwrap();
            let x = circle_mask(&Tensor::uniform(&geo.image_shape(1), 0.0, 1.0, &mut rng));
            let y = Tensor::randn(&geo.sinogram_shape(1), 1.0, &mut rng);
            let lhs = p.forward(&x).unwrap().dot(&y);
            let rhs = x.dot(&p.adjoint(&y).unwrap());
            assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn full_scan_halves_view_weight() {
        let half = GeometryConfig::new(16, 8).unwrap();
        let full = half.clone().with_span(2.0 * PI).unwrap();
        assert_eq!(half.backprojection_scale(), (PI / 8.0) as Real);
        assert_eq!(full.backprojection_scale(), (PI / 8.0) as Real);
    }
}
