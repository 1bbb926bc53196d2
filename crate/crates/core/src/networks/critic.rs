//! Wasserstein critic: strided 3x3 convs with leaky ReLU, then two dense
//! layers ending in an unbounded scalar.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2dLayer, LinearLayer};
use crate::error::{DnaError, Result};
use crate::ops::{leaky_relu, leaky_relu_backward};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub fc_hidden: usize,
    pub slope: Real,
}

impl CriticConfig {
    /// Filter counts 64, 64, 128, 128, 256, 256 and a 1024-unit dense layer.
    pub fn paper(image_size: usize) -> Self {
        CriticConfig {
            image_size,
            widths: vec![64, 64, 128, 128, 256, 256],
            strides: vec![1, 2, 1, 2, 1, 2],
            fc_hidden: 1024,
            slope: 0.2,
        }
    }

    /// Same topology with every width divided by `factor`.
    pub fn scaled(image_size: usize, factor: usize) -> Self {
        let mut c = Self::paper(image_size);
        for w in c.widths.iter_mut() {
            *w = (*w / factor).max(1);
        }
        c.fc_hidden = (c.fc_hidden / factor).max(1);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(DnaError::Config(
                "critic widths and strides must have equal, nonzero length".into(),
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.fc_hidden == 0 {
            return Err(DnaError::Config("critic sizes must be positive".into()));
        }
        let total: usize = self.strides.iter().product();
        if self.image_size == 0 || self.image_size % total != 0 {
            return Err(DnaError::Config(format!(
                "critic image size {} must be divisible by the total stride {}",
                self.image_size, total
            )));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        let side = self.image_size / self.strides.iter().product::<usize>();
        self.widths.last().unwrap() * side * side
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub config: CriticConfig,
    pub convs: Vec<Conv2dLayer>,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

/// Layer inputs and pre-activations from one forward pass.
#[derive(Clone, Debug)]
pub struct CriticCache {
    /// `inputs[l]` feeds layer `l` (convs, then fc1, then fc2).
    inputs: Vec<Tensor>,
    /// Pre-activations of every leaky layer.
    z: Vec<Tensor>,
}

impl CriticCache {
    pub fn batch(&self) -> usize {
        self.inputs[0].dim(0)
    }
}

impl Critic {
    pub fn zeros(config: &CriticConfig) -> Result<Self> {
        config.validate()?;
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (&w, &s) in config.widths.iter().zip(&config.strides) {
            convs.push(Conv2dLayer::zeros(c_in, w, 3, s, 1));
            c_in = w;
        }
        Ok(Critic {
            config: config.clone(),
            convs,
            fc1: LinearLayer::zeros(config.feature_len(), config.fc_hidden),
            fc2: LinearLayer::zeros(config.fc_hidden, 1),
        })
    }

    pub fn init<R: Rng + ?Sized>(config: &CriticConfig, rng: &mut R) -> Result<Self> {
        let mut c = Self::zeros(config)?;
        let gain = (2.0 / (1.0 + config.slope * config.slope)).sqrt();
        let mut c_in = 1;
        for (l, (&w, &s)) in config.widths.iter().zip(&config.strides).enumerate() {
            c.convs[l] = Conv2dLayer::init(c_in, w, 3, s, 1, gain, rng);
            c_in = w;
        }
        c.fc1 = LinearLayer::init(config.feature_len(), config.fc_hidden, gain, rng);
        c.fc2 = LinearLayer::init(config.fc_hidden, 1, 1.0, rng);
        Ok(c)
    }

    fn layer_count(&self) -> usize {
        self.convs.len() + 2
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let n = self.config.image_size;
        if x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != n || x.dim(3) != n {
            return Err(DnaError::shape(
                "critic_forward",
                format!("expected [B, 1, {}, {}], got {:?}", n, n, x.shape()),
            ));
        }
        Ok(())
    }

    /// One score per batch item, shape `[B]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, CriticCache)> {
        self.check_input(x)?;
        let slope = self.config.slope;
        let mut cache = CriticCache {
            inputs: vec![x.clone()],
            z: Vec::new(),
        };
        for conv in &self.convs {
            let z = conv.forward(cache.inputs.last().unwrap())?;
            cache.inputs.push(leaky_relu(&z, slope));
            cache.z.push(z);
        }
        let z = self.fc1.forward(cache.inputs.last().unwrap())?;
        cache.inputs.push(leaky_relu(&z, slope));
        cache.z.push(z);
        let out = self.fc2.forward(cache.inputs.last().unwrap())?;
        let b = x.dim(0);
        Ok((out.reshape(&[b])?, cache))
    }

    /// Scores with every leaky unit's slope taken from `pattern` instead of
    /// its own sign: the linear piece of the critic that `pattern` lies on.
    pub fn forward_with_pattern(&self, x: &Tensor, pattern: &CriticCache) -> Result<Tensor> {
        self.check_input(x)?;
        let slope = self.config.slope;
        let mut h = x.clone();
        for (l, conv) in self.convs.iter().enumerate() {
            h = leaky_relu_backward(&pattern.z[l], &conv.forward(&h)?, slope);
        }
        let nl = self.layer_count();
        h = leaky_relu_backward(&pattern.z[nl - 2], &self.fc1.forward(&h)?, slope);
        self.fc2.forward(&h)?.reshape(&[x.dim(0)])
    }

    /// Input cotangent and the cotangent of every layer output (before
    /// activation), without touching parameter gradients.
    pub fn backward_input(
        &self,
        cache: &CriticCache,
        dscore: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let b = cache.inputs[0].dim(0);
        dscore.expect_shape("critic_backward", &[b])?;
        let slope = self.config.slope;
        let nl = self.layer_count();
        let mut deltas = vec![Tensor::zeros(&[0]); nl];
        deltas[nl - 1] = dscore.clone().reshape(&[b, 1])?;
        let mut g = linear_input(&self.fc2, &cache.inputs[nl - 1], &deltas[nl - 1])?;
        deltas[nl - 2] = leaky_relu_backward(&cache.z[nl - 2], &g, slope);
        g = linear_input(&self.fc1, &cache.inputs[nl - 2], &deltas[nl - 2])?;
        for l in (0..self.convs.len()).rev() {
            // fc1 flattened the last feature map; restore its shape
            let g_shaped = g.reshape(cache.z[l].shape())?;
            deltas[l] = leaky_relu_backward(&cache.z[l], &g_shaped, slope);
            g = crate::ops::conv2d_input_grad(
                &deltas[l],
                &self.convs[l].weight,
                self.convs[l].spec,
                cache.inputs[l].shape(),
            )?;
        }
        Ok((g, deltas))
    }

    /// Parameter gradients of `sum_i dscore_i * D(x_i)` given the deltas
    /// from [`backward_input`](Self::backward_input).
    pub fn accumulate_grads(&mut self, cache: &CriticCache, deltas: &[Tensor]) -> Result<()> {
        let nl = self.layer_count();
        for (l, conv) in self.convs.iter_mut().enumerate() {
            conv.backward(&cache.inputs[l], &deltas[l], true, false)?;
        }
        self.fc1
            .backward(&cache.inputs[nl - 2], &deltas[nl - 2], true, false)?;
        self.fc2
            .backward(&cache.inputs[nl - 1], &deltas[nl - 1], true, false)?;
        Ok(())
    }

    pub fn backward(&mut self, cache: &CriticCache, dscore: &Tensor) -> Result<Tensor> {
        let (dx, deltas) = self.backward_input(cache, dscore)?;
        self.accumulate_grads(cache, &deltas)?;
        Ok(dx)
    }

    /// Accumulates `grad_theta sum_i <grad_x D(x_i), v_i>`.
    ///
    /// The critic is piecewise linear, so this is the weight gradient of
    /// each layer with the tangent of `v` (pushed forward through the fixed
    /// activation pattern of `cache`) as input and the primal deltas as
    /// output cotangent. Biases receive nothing.
    pub fn accumulate_input_grad_vjp(
        &mut self,
        cache: &CriticCache,
        deltas: &[Tensor],
        v: &Tensor,
    ) -> Result<()> {
        v.expect_shape("critic_tangent", cache.inputs[0].shape())?;
        let slope = self.config.slope;
        let nl = self.layer_count();
        let mut t = v.clone();
        for l in 0..self.convs.len() {
            self.convs[l].weight_grad(&t, &deltas[l])?;
            let tz = self.convs[l].forward_linear(&t)?;
            t = leaky_relu_backward(&cache.z[l], &tz, slope);
        }
        self.fc1.weight_grad(&t, &deltas[nl - 2]);
        let tz = self.fc1.forward_linear(&t)?;
        t = leaky_relu_backward(&cache.z[nl - 2], &tz, slope);
        self.fc2.weight_grad(&t, &deltas[nl - 1]);
        Ok(())
    }
}

fn linear_input(layer: &LinearLayer, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    crate::ops::linear_input_grad(dy, &layer.weight, x.shape())
}

impl Parameters for Critic {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (l, c) in self.convs.iter().enumerate() {
            c.visit(prefix, &format!("conv{}", l), f);
        }
        self.fc1.visit(prefix, "fc1", f);
        self.fc2.visit(prefix, "fc2", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(prefix, &format!("conv{}", l), f);
        }
        self.fc1.visit_mut(prefix, "fc1", f);
        self.fc2.visit_mut(prefix, "fc2", f);
    }
}
