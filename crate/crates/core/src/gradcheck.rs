//! Finite-difference verification of hand-written VJPs.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DnaError, Result};
use crate::tensor::{Real, Tensor};

/// A differentiable map from a list of tensors to one tensor.
pub trait Primitive {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Cotangents of every input given the output cotangent.
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>>;
}

/// [`Primitive`] built from a pair of closures.
pub struct FnPrimitive<F, B> {
    pub forward: F,
    pub vjp: B,
}

impl<F, B> Primitive for FnPrimitive<F, B>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    B: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        (self.vjp)(inputs, cotangent)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed per input; `0` probes all of them.
    pub probes: usize,
    pub seed: u64,
    /// Inputs with these indices are held fixed.
    pub skip: Vec<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            probes: 24,
            seed: 0,
            skip: Vec::new(),
        }
    }
}

/// Worst relative error between VJP gradients and central differences.
///
/// The output is reduced to a scalar by a fixed random projection. For
/// each input, the probed gradient entries form a vector and the error is
/// `|fd - vjp| / max(|fd|, |vjp|)` in the Euclidean norm, with the
/// denominator floored at 1e-3 of the largest input's gradient norm.
pub fn grad_check(primitive: &dyn Primitive, inputs: &[Tensor], eps: f64) -> Result<f64> {
    grad_check_with(
        primitive,
        inputs,
        &GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn grad_check_with(
    primitive: &dyn Primitive,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<f64> {
    for (i, t) in inputs.iter().enumerate() {
        t.check_finite(&format!("grad_check input {}", i))?;
    }
    let out = primitive.forward(inputs)?;
    out.check_finite("grad_check forward")?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let projection = if out.len() == 1 {
        Tensor::full(out.shape(), 1.0)
    } else {
        Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng)
    };
    let grads = primitive.vjp(inputs, &projection)?;
    if grads.len() != inputs.len() {
        return Err(DnaError::shape(
            "grad_check",
            format!("{} cotangents for {} inputs", grads.len(), inputs.len()),
        ));
    }
    let scalar = |xs: &[Tensor]| -> Result<f64> {
        let y = primitive.forward(xs)?;
        y.check_finite("grad_check perturbed forward")?;
        Ok(y.dot(&projection))
    };

    // a power-of-two step keeps x +/- eps exact for dyadic inputs
    let eps = 2f64.powi(opts.eps.log2().round() as i32) as Real;
    let mut per_input = Vec::new();
    let mut work = inputs.to_vec();
    for (k, g) in grads.iter().enumerate() {
        if opts.skip.contains(&k) {
            continue;
        }
        g.check_finite("grad_check cotangent")?;
        g.expect_shape("grad_check", inputs[k].shape())?;
        let n = inputs[k].len();
        let coords: Vec<usize> = if opts.probes == 0 || opts.probes >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.probes).into_vec()
        };
        let (mut diff, mut fd_norm, mut an_norm) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = scalar(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = scalar(&work)?;
            work[k].data_mut()[i] = orig;
            // actual step after rounding to the tensor precision
            let step = (orig + eps) as f64 - (orig - eps) as f64;
            let fd = (up - down) / step;
            let an = g.data()[i] as f64;
            diff += (fd - an).powi(2);
            fd_norm += fd * fd;
            an_norm += an * an;
        }
        per_input.push((diff.sqrt(), fd_norm.sqrt().max(an_norm.sqrt())));
    }
    // inputs whose gradient is (near) zero are judged against the overall
    // gradient scale instead of their own rounding noise
    let scale = per_input.iter().map(|p| p.1).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    let worst = per_input
        .iter()
        .map(|&(d, m)| d / m.max(floor))
        .fold(0.0, f64::max);
    Ok(worst)
}
