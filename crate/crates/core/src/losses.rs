//! Training objectives. Every loss returns its value together with the
//! cotangent of its image argument so the generators can chain them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::geometry::Projector;
use crate::networks::{Critic, CriticCache};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Adversarial terms.
    pub lambda_q: f64,
    /// Structural (1 - SSIM) terms.
    pub lambda_p: f64,
    /// Sinogram consistency terms.
    pub lambda_r: f64,
    /// Gradient penalty in the critic objective.
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_q: 5e-3,
            lambda_p: 0.1,
            lambda_r: 1.0,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_q: 0.0,
            lambda_p: 0.0,
            lambda_r: 0.0,
            lambda_gp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_q", self.lambda_q),
            ("lambda_p", self.lambda_p),
            ("lambda_r", self.lambda_r),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DnaError::Config(format!(
                    "{} = {} must be finite and >= 0",
                    name, v
                )));
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DnaError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Mean squared difference over every element.
pub fn mse_loss(y: &Tensor, x: &Tensor) -> Result<f64> {
    same_shape("mse_loss", y, x)?;
    let s: f64 = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok(s / y.len() as f64)
}

/// Cotangent of [`mse_loss`] with respect to `y`.
pub fn mse_grad(y: &Tensor, x: &Tensor) -> Result<Tensor> {
    same_shape("mse_loss", y, x)?;
    let k = 2.0 / y.len() as f64;
    let data = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| (k * (a - b) as f64) as Real)
        .collect();
    Tensor::from_vec(y.shape(), data)
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

struct SsimStats {
    n: f64,
    mu_y: f64,
    mu_x: f64,
    var_y: f64,
    var_x: f64,
    cov: f64,
    c1: f64,
    c2: f64,
}

impl SsimStats {
    fn new(y: &[Real], x: &[Real], range: f64) -> Self {
        let n = y.len() as f64;
        let mu_y = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mu_x = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let (mut var_y, mut var_x, mut cov) = (0.0, 0.0, 0.0);
        for (&a, &b) in y.iter().zip(x) {
            let (dy, dx) = (a as f64 - mu_y, b as f64 - mu_x);
            var_y += dy * dy;
            var_x += dx * dx;
            cov += dy * dx;
        }
        SsimStats {
            n,
            mu_y,
            mu_x,
            var_y: var_y / n,
            var_x: var_x / n,
            cov: cov / n,
            c1: (SSIM_K1 * range).powi(2),
            c2: (SSIM_K2 * range).powi(2),
        }
    }

    fn terms(&self) -> (f64, f64, f64, f64) {
        (
            2.0 * self.mu_y * self.mu_x + self.c1,
            2.0 * self.cov + self.c2,
            self.mu_y * self.mu_y + self.mu_x * self.mu_x + self.c1,
            self.var_y + self.var_x + self.c2,
        )
    }

    fn value(&self) -> f64 {
        let (a, b, c, d) = self.terms();
        (a * b) / (c * d)
    }

    /// d ssim / d y_i written into `out`.
    fn grad_y(&self, y: &[Real], x: &[Real], out: &mut [Real]) {
        let (a, b, c, d) = self.terms();
        let s = self.value();
        let k = 2.0 / self.n;
        for ((o, &yi), &xi) in out.iter_mut().zip(y).zip(x) {
            let g = k
                * (self.mu_x / a + (xi as f64 - self.mu_x) / b
                    - self.mu_y / c
                    - (yi as f64 - self.mu_y) / d);
            *o = (s * g) as Real;
        }
    }
}

/// Plain per-item SSIM with global image statistics. Batched `[B, ...]`
/// tensors are scored item by item; `ssim` of a rank-2 or single-item
/// tensor is that one value.
pub fn ssim_items(y: &Tensor, x: &Tensor, range: f64) -> Result<Vec<f64>> {
    same_shape("ssim", y, x)?;
    let items = if y.rank() >= 3 { y.dim(0) } else { 1 };
    let per = y.len() / items.max(1);
    Ok((0..items)
        .map(|b| {
            let (ys, xs) = (
                &y.data()[b * per..(b + 1) * per],
                &x.data()[b * per..(b + 1) * per],
            );
            SsimStats::new(ys, xs, range).value()
        })
        .collect())
}

/// Mean over batch items of the global-statistics SSIM.
pub fn ssim(y: &Tensor, x: &Tensor, range: f64) -> Result<f64> {
    let v = ssim_items(y, x, range)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Cotangent of [`ssim`] with respect to `y`.
pub fn ssim_grad(y: &Tensor, x: &Tensor, range: f64) -> Result<Tensor> {
    same_shape("ssim", y, x)?;
    let items = if y.rank() >= 3 { y.dim(0) } else { 1 };
    let per = y.len() / items.max(1);
    let mut g = Tensor::zeros(y.shape());
    for b in 0..items {
        let r = b * per..(b + 1) * per;
        let (ys, xs) = (&y.data()[r.clone()], &x.data()[r.clone()]);
        SsimStats::new(ys, xs, range).grad_y(ys, xs, &mut g.data_mut()[r]);
    }
    g.scale(1.0 / items as Real);
    Ok(g)
}

/// `1 - ssim`.
pub fn structural_loss(y: &Tensor, x: &Tensor) -> Result<f64> {
    Ok(1.0 - ssim(y, x, 1.0)?)
}

/// Mean of global-statistics SSIM over non-overlapping `win x win` tiles of
/// each `[.., H, W]` image. Reporting only.
pub fn ssim_windowed(y: &Tensor, x: &Tensor, range: f64, win: usize) -> Result<f64> {
    same_shape("ssim_windowed", y, x)?;
    let r = y.rank();
    if r < 2 || win == 0 || y.dim(r - 1) < win || y.dim(r - 2) < win {
        return Err(DnaError::shape(
            "ssim_windowed",
            format!("window {} for {:?}", win, y.shape()),
        ));
    }
    let (h, w) = (y.dim(r - 2), y.dim(r - 1));
    let (mut total, mut count) = (0.0, 0usize);
    let mut ty = Vec::with_capacity(win * win);
    let mut tx = Vec::with_capacity(win * win);
    for (py, px) in y.data().chunks(h * w).zip(x.data().chunks(h * w)) {
        for by in 0..h / win {
            for bx in 0..w / win {
                ty.clear();
                tx.clear();
                for i in 0..win {
                    let row = (by * win + i) * w + bx * win;
                    ty.extend_from_slice(&py[row..row + win]);
                    tx.extend_from_slice(&px[row..row + win]);
                }
                total += SsimStats::new(&ty, &tx, range).value();
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Generator adversarial loss `-mean(scores)`; its cotangent is `-1/B`.
pub fn adversarial_loss_g(scores: &Tensor) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    -scores.sum() / scores.len() as f64
}

pub fn adversarial_grad(scores: &Tensor) -> Tensor {
    Tensor::full(scores.shape(), -1.0 / scores.len() as Real)
}

/// `mean((P img - sino)^2)` and its cotangent with respect to `img`.
pub fn sinogram_consistency(
    img: &Tensor,
    sino: &Tensor,
    projector: &Projector,
) -> Result<(f64, Tensor)> {
    let proj = projector.forward(img)?;
    same_shape("sinogram_consistency_loss", &proj, sino)?;
    let n = proj.len() as f64;
    let mut resid = proj;
    resid.axpy(-1.0, sino);
    let value = resid
        .data()
        .iter()
        .map(|&r| (r as f64).powi(2))
        .sum::<f64>()
        / n;
    resid.scale((2.0 / n) as Real);
    Ok((value, projector.adjoint(&resid)?))
}

pub fn sinogram_consistency_loss(
    img: &Tensor,
    sino: &Tensor,
    geo: &crate::geometry::GeometryConfig,
) -> Result<f64> {
    Ok(sinogram_consistency(img, sino, &Projector::new(geo)?)?.0)
}

/// One uniform mixing weight per batch item.
pub fn sample_mix<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<Real> {
    (0..batch).map(|_| rng.gen::<Real>()).collect()
}

/// `eps * real + (1 - eps) * fake`, item by item.
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &[Real]) -> Result<Tensor> {
    same_shape("gradient_penalty", real, fake)?;
    let b = real.dim(0);
    if eps.len() != b {
        return Err(DnaError::shape(
            "gradient_penalty",
            format!("{} mixing weights for batch {}", eps.len(), b),
        ));
    }
    let per = real.len() / b;
    let mut out = fake.clone();
    for (i, item) in out.data_mut().chunks_mut(per).enumerate() {
        let r = &real.data()[i * per..(i + 1) * per];
        let e = eps[i];
        for (o, &rv) in item.iter_mut().zip(r) {
            *o = e * rv + (1.0 - e) * *o;
        }
    }
    Ok(out)
}

/// Penalty state for one interpolated batch.
pub struct PenaltyEval {
    pub value: f64,
    pub norms: Vec<f64>,
    cache: CriticCache,
    deltas: Vec<Tensor>,
    input_grad: Tensor,
}

/// `mean_i (||grad_x D(x_i)|| - 1)^2` at the given points.
pub fn penalty_at(critic: &Critic, points: &Tensor) -> Result<PenaltyEval> {
    let (_, cache) = critic.forward_cached(points)?;
    penalty_with_pattern(critic, cache)
}

/// Penalty with the activation pattern of `cache` held fixed. Equals
/// [`penalty_at`] when `cache` came from `critic` itself; with other
/// weights it is the smooth local piece of the penalty.
pub fn penalty_with_pattern(critic: &Critic, cache: CriticCache) -> Result<PenaltyEval> {
    let b = cache.batch();
    let (input_grad, deltas) = critic.backward_input(&cache, &Tensor::full(&[b], 1.0))?;
    let per = input_grad.len() / b;
    let norms: Vec<f64> = input_grad
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let value = norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / b as f64;
    Ok(PenaltyEval {
        value,
        norms,
        cache,
        deltas,
        input_grad,
    })
}

impl PenaltyEval {
    /// Adds `weight * d penalty / d theta` to the critic gradients.
    pub fn accumulate(&self, critic: &mut Critic, weight: f64) -> Result<()> {
        let b = self.norms.len();
        let per = self.input_grad.len() / b;
        let mut v = self.input_grad.clone();
        for (item, &n) in v.data_mut().chunks_mut(per).zip(&self.norms) {
            // the norm is not differentiable at 0; take the zero subgradient
            let c = if n > 0.0 {
                weight * 2.0 * (n - 1.0) / (n * b as f64)
            } else {
                0.0
            };
            item.iter_mut().for_each(|x| *x *= c as Real);
        }
        critic.accumulate_input_grad_vjp(&self.cache, &self.deltas, &v)
    }
}

/// Gradient penalty on random interpolates between `real` and `fake`.
pub fn gradient_penalty<R: Rng + ?Sized>(
    critic: &Critic,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut R,
) -> Result<f64> {
    let eps = sample_mix(real.dim(0), rng);
    Ok(penalty_at(critic, &interpolate(real, fake, &eps)?)?.value)
}

/// Per-term generator losses for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub mse1: f64,
    pub mse2: f64,
    pub ssim1: f64,
    pub ssim2: f64,
    pub sino1: f64,
    pub sino2: f64,
    pub adv1: f64,
    pub adv2: f64,
}

/// `lq (adv1 + adv2) + lp (sl1 + sl2) + lr (sino1 + sino2) + mse1 + mse2`
/// with `sl = 1 - ssim`.
pub fn generator_objective(t: &GeneratorTerms, w: &LossWeights) -> f64 {
    w.lambda_q * (t.adv1 + t.adv2)
        + w.lambda_p * ((1.0 - t.ssim1) + (1.0 - t.ssim2))
        + w.lambda_r * (t.sino1 + t.sino2)
        + t.mse1
        + t.mse2
}

/// `mean(fake1) + mean(fake2) - 2 mean(real) + lambda_gp * gp`, minimised
/// by the critic.
pub fn critic_objective(
    real: &Tensor,
    fake1: &Tensor,
    fake2: &Tensor,
    gp: f64,
    lambda_gp: f64,
) -> f64 {
    let mean = |t: &Tensor| t.sum() / t.len() as f64;
    mean(fake1) + mean(fake2) - 2.0 * mean(real) + lambda_gp * gp
}
