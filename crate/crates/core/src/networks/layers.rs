use rand::Rng;

use crate::error::Result;
use crate::ops::{
    bias_grad, conv2d_forward, conv2d_input_grad, conv2d_transpose_to, conv2d_weight_grad, linear,
    linear_bias_grad, linear_input_grad, linear_weight_grad, ConvSpec,
};
use crate::params::join;
use crate::tensor::{Real, Tensor};

/// Zero-padded "same" convolution (or stride-2 down-sampling) with bias.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl Conv2dLayer {
    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize) -> Self {
        Conv2dLayer {
            weight: Tensor::zeros(&[c_out, c_in / groups, k, k]),
            bias: Tensor::zeros(&[c_out]),
            spec: ConvSpec::grouped(stride, k / 2, groups),
        }
    }

    /// Normal weights with `std = gain / sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        gain: Real,
        rng: &mut R,
    ) -> Self {
        let mut l = Self::zeros(c_in, c_out, k, stride, groups);
        let fan_in = (c_in / groups * k * k) as Real;
        l.weight = Tensor::randn(l.weight.shape(), gain / fan_in.sqrt(), rng);
        l
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight, Some(&self.bias), self.spec)
    }

    /// Linear part only (no bias).
    pub fn forward_linear(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight, None, self.spec)
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        params: bool,
        input: bool,
    ) -> Result<Option<Tensor>> {
        if params {
            self.weight_grad(x, dy)?;
            bias_grad(dy, self.bias.grad_mut());
        }
        if input {
            Ok(Some(conv2d_input_grad(
                dy,
                &self.weight,
                self.spec,
                x.shape(),
            )?))
        } else {
            Ok(None)
        }
    }

    pub fn weight_grad(&mut self, x: &Tensor, dy: &Tensor) -> Result<()> {
        let shape = self.weight.shape().to_vec();
        conv2d_weight_grad(x, dy, self.spec, &shape, self.weight.grad_mut())
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, &format!("{}.weight", name)), &self.weight);
        f(&join(prefix, &format!("{}.bias", name)), &self.bias);
    }

    pub(crate) fn visit_mut(
        &mut self,
        prefix: &str,
        name: &str,
        f: &mut dyn FnMut(&str, &mut Tensor),
    ) {
        f(&join(prefix, &format!("{}.weight", name)), &mut self.weight);
        f(&join(prefix, &format!("{}.bias", name)), &mut self.bias);
    }
}

/// Stride-2 transpose convolution doubling the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2dLayer {
    /// `[in, out / groups, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl ConvTranspose2dLayer {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvTranspose2dLayer {
            weight: Tensor::zeros(&[c_in, c_out, k, k]),
            bias: Tensor::zeros(&[c_out]),
            spec: ConvSpec::new(2, k / 2),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        gain: Real,
        rng: &mut R,
    ) -> Self {
        let mut l = Self::zeros(c_in, c_out, k);
        // each output pixel of a stride-2 transpose sees about k*k/4 taps per input channel
        let fan_in = (c_in * k * k) as Real / 4.0;
        l.weight = Tensor::randn(l.weight.shape(), gain / fan_in.sqrt(), rng);
        l
    }

    fn out_hw(&self, x: &Tensor) -> (usize, usize) {
        (x.dim(2) * self.spec.stride.0, x.dim(3) * self.spec.stride.1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_transpose_to(x, &self.weight, Some(&self.bias), self.spec, self.out_hw(x))
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        params: bool,
        input: bool,
    ) -> Result<Option<Tensor>> {
        if params {
            let shape = self.weight.shape().to_vec();
            conv2d_weight_grad(dy, x, self.spec, &shape, self.weight.grad_mut())?;
            bias_grad(dy, self.bias.grad_mut());
        }
        if input {
            Ok(Some(conv2d_forward(dy, &self.weight, None, self.spec)?))
        } else {
            Ok(None)
        }
    }

    pub(crate) fn visit(&self, prefix: &str, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, &format!("{}.weight", name)), &self.weight);
        f(&join(prefix, &format!("{}.bias", name)), &self.bias);
    }

    pub(crate) fn visit_mut(
        &mut self,
        prefix: &str,
        name: &str,
        f: &mut dyn FnMut(&str, &mut Tensor),
    ) {
        f(&join(prefix, &format!("{}.weight", name)), &mut self.weight);
        f(&join(prefix, &format!("{}.bias", name)), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LinearLayer {
            weight: Tensor::zeros(&[fan_out, fan_in]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: Real, rng: &mut R) -> Self {
        LinearLayer {
            weight: Tensor::randn(&[fan_out, fan_in], gain / (fan_in as Real).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, &self.bias)
    }

    pub fn forward_linear(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, &Tensor::zeros(self.bias.shape()))
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        params: bool,
        input: bool,
    ) -> Result<Option<Tensor>> {
        if params {
            self.weight_grad(x, dy);
            linear_bias_grad(dy, self.bias.grad_mut());
        }
        if input {
            Ok(Some(linear_input_grad(dy, &self.weight, x.shape())?))
        } else {
            Ok(None)
        }
    }

    pub fn weight_grad(&mut self, x: &Tensor, dy: &Tensor) {
        linear_weight_grad(x, dy, self.weight.grad_mut());
    }

    pub(crate) fn visit(&self, prefix: &str, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, &format!("{}.weight", name)), &self.weight);
        f(&join(prefix, &format!("{}.bias", name)), &self.bias);
    }

    pub(crate) fn visit_mut(
        &mut self,
        prefix: &str,
        name: &str,
        f: &mut dyn FnMut(&str, &mut Tensor),
    ) {
        f(&join(prefix, &format!("{}.weight", name)), &mut self.weight);
        f(&join(prefix, &format!("{}.bias", name)), &mut self.bias);
    }
}

/// Channel concatenation of two `[B, C, H, W]` tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (bn, ca, cb) = (a.dim(0), a.dim(1), b.dim(1));
    let plane = a.dim(2) * a.dim(3);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..bn {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::from_vec(&[bn, ca + cb, a.dim(2), a.dim(3)], data).expect("concat shape")
}

/// Inverse of [`concat_channels`] for cotangents.
pub fn split_channels(t: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (bn, c) = (t.dim(0), t.dim(1));
    let cb = c - ca;
    let plane = t.dim(2) * t.dim(3);
    let mut a = Vec::with_capacity(bn * ca * plane);
    let mut b = Vec::with_capacity(bn * cb * plane);
    for i in 0..bn {
        let item = &t.data()[i * c * plane..(i + 1) * c * plane];
        a.extend_from_slice(&item[..ca * plane]);
        b.extend_from_slice(&item[ca * plane..]);
    }
    (
        Tensor::from_vec(&[bn, ca, t.dim(2), t.dim(3)], a).expect("split shape"),
        Tensor::from_vec(&[bn, cb, t.dim(2), t.dim(3)], b).expect("split shape"),
    )
}
