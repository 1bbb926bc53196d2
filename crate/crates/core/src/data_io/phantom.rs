use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::geometry::apply_circle_mask;
use crate::tensor::{Real, Tensor};

/// One ellipse in normalised coordinates: the image spans `[-1, 1]` on both
/// axes with `y` pointing up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EllipsePhantomSpec {
    pub ellipses: Vec<Ellipse>,
    pub seed: u64,
}

impl EllipsePhantomSpec {
    pub fn disk(radius: f64, intensity: f64) -> Self {
        EllipsePhantomSpec {
            ellipses: vec![Ellipse {
                cx: 0.0,
                cy: 0.0,
                semi_x: radius,
                semi_y: radius,
                rotation: 0.0,
                intensity,
            }],
            seed: 0,
        }
    }

    /// A body ellipse with a handful of brighter and darker inclusions.
    pub fn random<R: Rng + ?Sized>(seed: u64, rng: &mut R) -> Self {
        let mut ellipses = vec![Ellipse {
            cx: rng.gen_range(-0.05..0.05),
            cy: rng.gen_range(-0.05..0.05),
            semi_x: rng.gen_range(0.6..0.85),
            semi_y: rng.gen_range(0.5..0.8),
            rotation: rng.gen_range(-0.3..0.3),
            intensity: rng.gen_range(0.3..0.5),
        }];
        for _ in 0..rng.gen_range(4..9) {
            let r: f64 = rng.gen_range(0.0..0.45);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let sign = if rng.gen_bool(0.7) { 1.0 } else { -1.0 };
            ellipses.push(Ellipse {
                cx: r * phi.cos(),
                cy: r * phi.sin(),
                semi_x: rng.gen_range(0.04..0.25),
                semi_y: rng.gen_range(0.04..0.25),
                rotation: rng.gen_range(0.0..std::f64::consts::PI),
                intensity: sign * rng.gen_range(0.1..0.4),
            });
        }
        EllipsePhantomSpec { ellipses, seed }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.ellipses.iter().enumerate() {
            let finite = [e.cx, e.cy, e.semi_x, e.semi_y, e.rotation, e.intensity]
                .iter()
                .all(|v| v.is_finite());
            if !finite || e.semi_x <= 0.0 || e.semi_y <= 0.0 || e.cx.abs() > 1.0 || e.cy.abs() > 1.0
            {
                return Err(DnaError::Config(format!(
                    "ellipse {} is invalid: {:?}",
                    i, e
                )));
            }
        }
        Ok(())
    }
}

/// Normalised coordinate of pixel index `i` on an `n`-pixel axis.
fn coord(i: usize, n: usize) -> f64 {
    (i as f64 - (n as f64 - 1.0) / 2.0) / (n as f64 / 2.0)
}

/// Sums the intensities of the ellipses covering each pixel centre, clips
/// to `[0, 1]` and masks. Returns `[1, 1, n, n]`.
pub fn render_phantom(spec: &EllipsePhantomSpec, n: usize) -> Result<Tensor> {
    spec.validate()?;
    let mut img = Tensor::zeros(&[1, 1, n, n]);
    let data = img.data_mut();
    for i in 0..n {
        let y = -coord(i, n);
        for j in 0..n {
            let x = coord(j, n);
            let v: f64 = spec
                .ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum();
            data[i * n + j] = v.clamp(0.0, 1.0) as Real;
        }
    }
    apply_circle_mask(&mut img);
    Ok(img)
}

/// Corner-aligned bilinear resampling of an `[h, w]` grid to `[n, n]`.
pub fn resize_bilinear(src: &Tensor, n: usize) -> Result<Tensor> {
    if src.rank() != 2 || src.is_empty() {
        return Err(DnaError::shape(
            "resize_bilinear",
            format!("expected [H, W], got {:?}", src.shape()),
        ));
    }
    let (h, w) = (src.dim(0), src.dim(1));
    if (h, w) == (n, n) {
        return Ok(src.clone());
    }
    let s = src.data();
    let pos = |i: usize, len: usize| -> (usize, usize, f64) {
        if n == 1 || len == 1 {
            return (0, 0, 0.0);
        }
        let p = i as f64 * (len - 1) as f64 / (n - 1) as f64;
        let lo = (p.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, p - lo as f64)
    };
    let mut out = vec![0.0 as Real; n * n];
    for i in 0..n {
        let (y0, y1, fy) = pos(i, h);
        for j in 0..n {
            let (x0, x1, fx) = pos(j, w);
            let at = |y: usize, x: usize| s[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out[i * n + j] = (top * (1.0 - fy) + bottom * fy) as Real;
        }
    }
    Tensor::from_vec(&[n, n], out)
}

/// Resizes an `[H, W]` grid to `n x n`, masks it and min-max normalises the
/// pixels inside the circle to `[0, 1]`. A grid that is constant inside the
/// circle becomes all zeros. Returns `[1, 1, n, n]`.
pub fn normalize_and_mask(raw: &Tensor, n: usize) -> Result<Tensor> {
    raw.check_finite("normalize_and_mask input")?;
    let mut img = resize_bilinear(raw, n)?.reshape(&[1, 1, n, n])?;
    apply_circle_mask(&mut img);
    let inside = crate::geometry::circle_mask_plane(n);
    let vals = || {
        img.data()
            .iter()
            .zip(&inside)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
    };
    let lo = vals().fold(Real::INFINITY, Real::min);
    let hi = vals().fold(Real::NEG_INFINITY, Real::max);
    if !(hi > lo) {
        return Ok(Tensor::zeros(&[1, 1, n, n]));
    }
    let span = hi - lo;
    for (v, &m) in img.data_mut().iter_mut().zip(&inside) {
        *v = if m {
            ((*v - lo) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    Ok(img)
}
