//! Sinogram filtration: the fixed ramp filter and the learnable 1-D
//! convolution stack applied along detector rows.

use rand::Rng;
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{DnaError, Result};
use crate::ops::{
    bias_grad, conv2d_forward, conv2d_input_grad, conv2d_weight_grad, ConvSpec, DftPlan,
};
use crate::params::{join, Parameters};
use crate::tensor::{Real, Tensor};

/// Band-limited ramp kernel sampled at integer offsets:
/// `1/4` at zero, `-1/(pi k)^2` at odd `k`, zero at even `k != 0`.
pub fn ramp_kernel_tap(k: i64) -> f64 {
    if k == 0 {
        0.25
    } else if k % 2 != 0 {
        -1.0 / (PI * k as f64).powi(2)
    } else {
        0.0
    }
}

/// Ramp filter for rows of `n_d` detector bins.
///
/// Rows are zero-padded to `2 n_d`, multiplied in the Fourier domain by the
/// transform of the ramp kernel, and cropped back. This is the linear
/// convolution with the kernel over offsets `|k| < n_d`, which is symmetric,
/// so the operator is its own adjoint.
#[derive(Clone, Debug)]
pub struct RampFilter {
    n_d: usize,
    plan: DftPlan,
    response: Vec<f64>,
}

impl RampFilter {
    pub fn new(n_d: usize) -> Self {
        let len = 2 * n_d;
        let plan = DftPlan::new(len);
        let mut h: Vec<Complex64> = (0..len)
            .map(|i| {
                let k = if i <= n_d {
                    i as i64
                } else {
                    i as i64 - len as i64
                };
                Complex64::new(ramp_kernel_tap(k), 0.0)
            })
            .collect();
        plan.forward(&mut h);
        RampFilter {
            n_d,
            plan,
            response: h.iter().map(|c| c.re).collect(),
        }
    }

    pub fn detectors(&self) -> usize {
        self.n_d
    }

    /// Real frequency response over the padded length.
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn filter_row(&self, row: &[Real], out: &mut [Real]) {
        let len = 2 * self.n_d;
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v as f64;
        }
        self.plan.forward(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.plan.inverse(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re as Real;
        }
    }

    /// Filters every row of a tensor whose last axis has `n_d` bins.
    pub fn apply(&self, sino: &Tensor) -> Result<Tensor> {
        let r = sino.rank();
        if r == 0 || sino.dim(r - 1) != self.n_d {
            return Err(DnaError::shape(
                "ramp_filter",
                format!("rows of {} bins expected, got {:?}", self.n_d, sino.shape()),
            ));
        }
        let mut out = Tensor::zeros(sino.shape());
        for (src, dst) in sino
            .data()
            .chunks(self.n_d)
            .zip(out.data_mut().chunks_mut(self.n_d))
        {
            self.filter_row(src, dst);
        }
        Ok(out)
    }

    /// VJP of [`apply`](Self::apply); the operator is self-adjoint.
    pub fn backward(&self, dy: &Tensor) -> Result<Tensor> {
        self.apply(dy)
    }
}

pub fn ramp_filter(sino: &Tensor) -> Result<Tensor> {
    let r = sino.rank();
    if r == 0 {
        return Err(DnaError::shape("ramp_filter", "scalar input"));
    }
    RampFilter::new(sino.dim(r - 1)).apply(sino)
}

/// The odd integer nearest `n_d / 4`; ties go up.
pub fn filter_kernel_len(n_d: usize) -> usize {
    2 * (n_d / 8) + 1
}

#[derive(Clone, Debug)]
pub struct FilterLayer {
    /// `[out, in, 1, K]`
    pub weight: Tensor,
    pub bias: Tensor,
    /// Adds a skip path: the layer input when channel counts agree, the
    /// input broadcast over channels when it has one channel, otherwise the
    /// stack input.
    pub residual: bool,
}

impl FilterLayer {
    fn c_in(&self) -> usize {
        self.weight.dim(1)
    }
    fn c_out(&self) -> usize {
        self.weight.dim(0)
    }
    fn k(&self) -> usize {
        self.weight.dim(3)
    }
    fn spec(&self) -> ConvSpec {
        ConvSpec::row(1, self.k() / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Skip {
    None,
    Identity,
    Broadcast,
    StackInput,
}

/// Linear stack of row convolutions with residual skips.
#[derive(Clone, Debug)]
pub struct FilterStackParams {
    pub layers: Vec<FilterLayer>,
}

pub struct FilterCache {
    inputs: Vec<Tensor>,
}

impl FilterStackParams {
    /// Zero kernels everywhere; with all-residual wiring the stack is the
    /// identity map.
    pub fn identity(n_d: usize, channels: &[usize]) -> Result<Self> {
        Self::build(n_d, channels, |_| 0.0)
    }

    /// Identity plus `N(0, std^2)` kernel noise.
    pub fn init<R: Rng + ?Sized>(
        n_d: usize,
        channels: &[usize],
        std: Real,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::identity(n_d, channels)?;
        for l in &mut p.layers {
            l.weight = Tensor::randn(l.weight.shape(), std, rng);
        }
        Ok(p)
    }

    fn build(n_d: usize, channels: &[usize], fill: impl Fn(usize) -> Real) -> Result<Self> {
        if channels.len() < 2 || channels[0] != 1 || *channels.last().unwrap() != 1 {
            return Err(DnaError::Config(format!(
                "filter channels must run 1 -> ... -> 1, got {:?}",
                channels
            )));
        }
        let k = filter_kernel_len(n_d);
        let layers = channels
            .windows(2)
            .map(|w| {
                let shape = [w[1], w[0], 1, k];
                let n = shape.iter().product();
                FilterLayer {
                    weight: Tensor::from_vec(&shape, (0..n).map(&fill).collect()).unwrap(),
                    bias: Tensor::zeros(&[w[1]]),
                    residual: true,
                }
            })
            .collect();
        Ok(FilterStackParams { layers })
    }

    /// One non-residual layer holding the centred, truncated ramp kernel.
    pub fn single_ramp(n_d: usize) -> Self {
        let k = filter_kernel_len(n_d);
        let half = (k / 2) as i64;
        let taps = (0..k as i64)
            .map(|i| ramp_kernel_tap(i - half) as Real)
            .collect();
        FilterStackParams {
            layers: vec![FilterLayer {
                weight: Tensor::from_vec(&[1, 1, 1, k], taps).unwrap(),
                bias: Tensor::zeros(&[1]),
                residual: false,
            }],
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.layers[0].k()
    }

    fn skip(&self, i: usize) -> Skip {
        let l = &self.layers[i];
        if !l.residual {
            Skip::None
        } else if l.c_in() == l.c_out() {
            Skip::Identity
        } else if l.c_in() == 1 {
            Skip::Broadcast
        } else {
            Skip::StackInput
        }
    }

    pub fn validate(&self, n_d: usize) -> Result<()> {
        let mut c = 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.c_in() != c || l.weight.dim(2) != 1 || l.k() % 2 == 0 || l.k() > n_d {
                return Err(DnaError::shape(
                    "learned_filter",
                    format!(
                        "layer {} weight {:?} after {} channels",
                        i,
                        l.weight.shape(),
                        c
                    ),
                ));
            }
            if self.skip(i) == Skip::StackInput && l.c_out() != 1 {
                return Err(DnaError::shape(
                    "learned_filter",
                    format!("layer {} has no matching skip path", i),
                ));
            }
            c = l.c_out();
        }
        if c != 1 {
            return Err(DnaError::shape(
                "learned_filter",
                "stack must end in 1 channel",
            ));
        }
        Ok(())
    }

    /// `x`: `[B, 1, N_c, N_d]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FilterCache)> {
        if x.rank() != 4 || x.dim(1) != 1 {
            return Err(DnaError::shape(
                "learned_filter",
                format!("expected [B, 1, N_c, N_d], got {:?}", x.shape()),
            ));
        }
        self.validate(x.dim(3))?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = conv2d_forward(&h, &l.weight, Some(&l.bias), l.spec())?;
            match self.skip(i) {
                Skip::None => {}
                Skip::Identity => y.add_assign(&h),
                Skip::Broadcast => {
                    let plane = h.len() / h.dim(0);
                    for (b, item) in y.data_mut().chunks_mut(l.c_out() * plane).enumerate() {
                        let src = &h.data()[b * plane..(b + 1) * plane];
                        for ch in item.chunks_mut(plane) {
                            for (a, s) in ch.iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                }
                Skip::StackInput => y.add_assign(x),
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        Ok((h, FilterCache { inputs }))
    }

    /// Accumulates parameter gradients and returns the input cotangent.
    pub fn backward(&mut self, cache: &FilterCache, dy: &Tensor) -> Result<Tensor> {
        let mut g = dy.clone();
        let mut d_stack = Tensor::zeros(cache.inputs[0].shape());
        for i in (0..self.layers.len()).rev() {
            let skip = self.skip(i);
            let l = &mut self.layers[i];
            let input = &cache.inputs[i];
            let spec = l.spec();
            let wshape = l.weight.shape().to_vec();
            conv2d_weight_grad(input, &g, spec, &wshape, l.weight.grad_mut())?;
            bias_grad(&g, l.bias.grad_mut());
            let mut dx = conv2d_input_grad(&g, &l.weight, spec, input.shape())?;
            match skip {
                Skip::None => {}
                Skip::Identity => dx.add_assign(&g),
                Skip::Broadcast => {
                    let plane = dx.len() / dx.dim(0);
                    let c = l.c_out();
                    for (b, item) in g.data().chunks(c * plane).enumerate() {
                        let dst = &mut dx.data_mut()[b * plane..(b + 1) * plane];
                        for ch in item.chunks(plane) {
                            for (a, s) in dst.iter_mut().zip(ch) {
                                *a += s;
                            }
                        }
                    }
                }
                Skip::StackInput => d_stack.add_assign(&g),
            }
            g = dx;
        }
        g.add_assign(&d_stack);
        Ok(g)
    }
}

impl Parameters for FilterStackParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&join(prefix, &format!("conv{}.weight", i)), &l.weight);
            f(&join(prefix, &format!("conv{}.bias", i)), &l.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&join(prefix, &format!("conv{}.weight", i)), &mut l.weight);
            f(&join(prefix, &format!("conv{}.bias", i)), &mut l.bias);
        }
    }
}

/// Applies the learned stack to `[B, 1, N_c, N_d]` sinograms.
pub fn learned_filter(sino_batch: &Tensor, params: &FilterStackParams) -> Result<Tensor> {
    params.forward(sino_batch).map(|(y, _)| y)
}
