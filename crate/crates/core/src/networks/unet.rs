//! Refinement U-net with ResNeXt-style grouped residual blocks.
//!
//! Layout (width `w`, cardinality `g`):
//! stem 3x3 in->w, then per encoder stage a stride-2 conv followed by a
//! block `x + relu(gconv(x))`; per decoder stage a stride-2 transpose conv,
//! concatenation with the matching encoder feature, a 3x3 2w->w fuse conv
//! and another grouped block; finally a linear 3x3 head w->1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{concat_channels, split_channels, Conv2dLayer, ConvTranspose2dLayer};
use crate::error::{DnaError, Result};
use crate::ops::{relu, relu_backward};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

pub const UNET_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub width: usize,
    pub groups: usize,
}

impl UNetConfig {
    pub fn new(in_channels: usize, width: usize, groups: usize) -> Result<Self> {
        let c = UNetConfig {
            in_channels,
            width,
            groups,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.width == 0
            || self.groups == 0
            || self.width % self.groups != 0
        {
            return Err(DnaError::Config(format!(
                "U-net width {} must be a positive multiple of the cardinality {}",
                self.width, self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub stem: Conv2dLayer,
    pub down: Vec<Conv2dLayer>,
    pub enc: Vec<Conv2dLayer>,
    pub up: Vec<ConvTranspose2dLayer>,
    pub fuse: Vec<Conv2dLayer>,
    pub dec: Vec<Conv2dLayer>,
    pub head: Conv2dLayer,
}

/// Activations kept for the backward pass.
#[derive(Debug)]
pub struct UNetCache {
    x: Tensor,
    z_stem: Tensor,
    /// Encoder features at full, 1/2, ..., 1/16 resolution.
    feats: Vec<Tensor>,
    z_down: Vec<Tensor>,
    a_down: Vec<Tensor>,
    z_enc: Vec<Tensor>,
    /// Decoder inputs per stage, coarsest first.
    h_in: Vec<Tensor>,
    z_up: Vec<Tensor>,
    cat: Vec<Tensor>,
    z_fuse: Vec<Tensor>,
    f: Vec<Tensor>,
    z_dec: Vec<Tensor>,
    h_out: Tensor,
}

impl UNet {
    /// All weights and biases zero: the network outputs exactly 0.
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let (w, g) = (config.width, config.groups);
        Ok(UNet {
            config: config.clone(),
            stem: Conv2dLayer::zeros(config.in_channels, w, 3, 1, 1),
            down: (0..UNET_STAGES)
                .map(|_| Conv2dLayer::zeros(w, w, 3, 2, 1))
                .collect(),
            enc: (0..UNET_STAGES)
                .map(|_| Conv2dLayer::zeros(w, w, 3, 1, g))
                .collect(),
            up: (0..UNET_STAGES)
                .map(|_| ConvTranspose2dLayer::zeros(w, w, 3))
                .collect(),
            fuse: (0..UNET_STAGES)
                .map(|_| Conv2dLayer::zeros(2 * w, w, 3, 1, 1))
                .collect(),
            dec: (0..UNET_STAGES)
                .map(|_| Conv2dLayer::zeros(w, w, 3, 1, g))
                .collect(),
            head: Conv2dLayer::zeros(w, 1, 3, 1, 1),
        })
    }

    /// He-normal hidden layers; the head is scaled by `head_gain` so the
    /// initial correction stays small.
    pub fn init<R: Rng + ?Sized>(
        config: &UNetConfig,
        head_gain: Real,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (w, g) = (config.width, config.groups);
        let he = (2.0 as Real).sqrt();
        // residual branches start damped so the blocks begin near identity
        let block = 0.5 * he;
        let mut net = UNet::zeros(config)?;
        net.stem = Conv2dLayer::init(config.in_channels, w, 3, 1, 1, he, rng);
        for i in 0..UNET_STAGES {
            net.down[i] = Conv2dLayer::init(w, w, 3, 2, 1, he, rng);
            net.enc[i] = Conv2dLayer::init(w, w, 3, 1, g, block, rng);
            net.up[i] = ConvTranspose2dLayer::init(w, w, 3, he, rng);
            net.fuse[i] = Conv2dLayer::init(2 * w, w, 3, 1, 1, he, rng);
            net.dec[i] = Conv2dLayer::init(w, w, 3, 1, g, block, rng);
        }
        net.head = Conv2dLayer::init(w, 1, 3, 1, 1, head_gain, rng);
        Ok(net)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let m = 1 << UNET_STAGES;
        if x.rank() != 4
            || x.dim(1) != self.config.in_channels
            || x.dim(2) % m != 0
            || x.dim(3) % m != 0
        {
            return Err(DnaError::shape(
                "unet",
                format!(
                    "expected [B, {}, H, W] with H, W divisible by {}, got {:?}",
                    self.config.in_channels,
                    m,
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, UNetCache)> {
        self.run(x, None)
    }

    /// Output with every ReLU gated by the sign pattern stored in `pattern`
    /// rather than its own input: the linear piece `pattern` lies on.
    pub fn forward_with_pattern(&self, x: &Tensor, pattern: &UNetCache) -> Result<Tensor> {
        Ok(self.run(x, Some(pattern))?.0)
    }

    fn run(&self, x: &Tensor, pattern: Option<&UNetCache>) -> Result<(Tensor, UNetCache)> {
        self.check_input(x)?;
        let gate = |z: &Tensor, pick: &dyn Fn(&UNetCache) -> &Tensor| match pattern {
            Some(p) => relu_backward(pick(p), z),
            None => relu(z),
        };
        let z_stem = self.stem.forward(x)?;
        let mut feats = vec![gate(&z_stem, &|p| &p.z_stem)];
        let (mut z_down, mut a_down, mut z_enc) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..UNET_STAGES {
            let zd = self.down[i].forward(&feats[i])?;
            let a = gate(&zd, &|p| &p.z_down[i]);
            let ze = self.enc[i].forward(&a)?;
            let mut e = gate(&ze, &|p| &p.z_enc[i]);
            e.add_assign(&a);
            z_down.push(zd);
            a_down.push(a);
            z_enc.push(ze);
            feats.push(e);
        }
        let mut h = feats[UNET_STAGES].clone();
        let mut c = UNetCache {
            x: x.clone(),
            z_stem,
            feats: Vec::new(),
            z_down,
            a_down,
            z_enc,
            h_in: Vec::new(),
            z_up: Vec::new(),
            cat: Vec::new(),
            z_fuse: Vec::new(),
            f: Vec::new(),
            z_dec: Vec::new(),
            h_out: Tensor::zeros(&[0]),
        };
        for i in (0..UNET_STAGES).rev() {
            let j = c.z_up.len();
            let zu = self.up[i].forward(&h)?;
            let cat = concat_channels(&gate(&zu, &|p| &p.z_up[j]), &feats[i]);
            let zf = self.fuse[i].forward(&cat)?;
            let f = gate(&zf, &|p| &p.z_fuse[j]);
            let zdec = self.dec[i].forward(&f)?;
            let mut next = gate(&zdec, &|p| &p.z_dec[j]);
            next.add_assign(&f);
            c.h_in.push(std::mem::replace(&mut h, next));
            c.z_up.push(zu);
            c.cat.push(cat);
            c.z_fuse.push(zf);
            c.f.push(f);
            c.z_dec.push(zdec);
        }
        let out = self.head.forward(&h)?;
        c.h_out = h;
        c.feats = feats;
        Ok((out, c))
    }

    /// Accumulates parameter gradients and returns the input cotangent.
    pub fn backward(&mut self, cache: &UNetCache, dy: &Tensor) -> Result<Tensor> {
        let w = self.config.width;
        let mut dh = self.head.backward(&cache.h_out, dy, true, true)?.unwrap();
        let mut dfeat: Vec<Option<Tensor>> = vec![None; UNET_STAGES + 1];
        // decoder, walked from the finest stage back to the coarsest
        // `j` indexes the cache (coarsest first)
        for j in (0..UNET_STAGES).rev() {
            let stage = UNET_STAGES - 1 - j;
            let dzdec = relu_backward(&cache.z_dec[j], &dh);
            let mut df = self.dec[stage]
                .backward(&cache.f[j], &dzdec, true, true)?
                .unwrap();
            df.add_assign(&dh);
            let dzf = relu_backward(&cache.z_fuse[j], &df);
            let dcat = self.fuse[stage]
                .backward(&cache.cat[j], &dzf, true, true)?
                .unwrap();
            let (du, dskip) = split_channels(&dcat, w);
            accumulate(&mut dfeat[stage], dskip);
            let dzu = relu_backward(&cache.z_up[j], &du);
            dh = self.up[stage]
                .backward(&cache.h_in[j], &dzu, true, true)?
                .unwrap();
        }
        accumulate(&mut dfeat[UNET_STAGES], dh);
        for i in (0..UNET_STAGES).rev() {
            let de = dfeat[i + 1].take().expect("encoder cotangent");
            let dze = relu_backward(&cache.z_enc[i], &de);
            let mut da = self.enc[i]
                .backward(&cache.a_down[i], &dze, true, true)?
                .unwrap();
            da.add_assign(&de);
            let dzd = relu_backward(&cache.z_down[i], &da);
            let dprev = self.down[i]
                .backward(&cache.feats[i], &dzd, true, true)?
                .unwrap();
            accumulate(&mut dfeat[i], dprev);
        }
        let d0 = dfeat[0].take().expect("stem cotangent");
        let dz = relu_backward(&cache.z_stem, &d0);
        Ok(self.stem.backward(&cache.x, &dz, true, true)?.unwrap())
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

impl Parameters for UNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit(prefix, "stem", f);
        for i in 0..UNET_STAGES {
            self.down[i].visit(prefix, &format!("down{}", i), f);
            self.enc[i].visit(prefix, &format!("enc{}", i), f);
            self.up[i].visit(prefix, &format!("up{}", i), f);
            self.fuse[i].visit(prefix, &format!("fuse{}", i), f);
            self.dec[i].visit(prefix, &format!("dec{}", i), f);
        }
        self.head.visit(prefix, "head", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut(prefix, "stem", f);
        for i in 0..UNET_STAGES {
            self.down[i].visit_mut(prefix, &format!("down{}", i), f);
            self.enc[i].visit_mut(prefix, &format!("enc{}", i), f);
            self.up[i].visit_mut(prefix, &format!("up{}", i), f);
            self.fuse[i].visit_mut(prefix, &format!("fuse{}", i), f);
            self.dec[i].visit_mut(prefix, &format!("dec{}", i), f);
        }
        self.head.visit_mut(prefix, "head", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_with, FnPrimitive, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = UNetConfig::new(2, 8, 4).unwrap();
        let net = UNet::init(&cfg, 1.0, &mut rng).unwrap();
        for n in [16usize, 32, 48] {
            let x = Tensor::randn(&[2, 2, n, n], 1.0, &mut rng);
            assert_eq!(net.forward(&x).unwrap().shape(), &[2, 1, n, n]);
        }
        assert!(net.forward(&Tensor::zeros(&[1, 2, 24, 24])).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = UNet::zeros(&UNetConfig::new(1, 4, 2).unwrap()).unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.7);
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = UNetConfig::new(1, 4, 2).unwrap();
        let net = UNet::init(&cfg, 1.0, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let fwd_net = net.clone();
        let bwd_net = net.clone();
        let p = FnPrimitive {
            forward: move |xs: &[Tensor]| fwd_net.forward(&xs[0]),
            vjp: move |xs: &[Tensor], g: &Tensor| {
                let mut n = bwd_net.clone();
                let (_, c) = n.forward_cached(&xs[0])?;
                Ok(vec![n.backward(&c, g)?])
            },
        };
        let opts = GradCheckOptions {
            eps: if cfg!(feature = "f64") { 1e-6 } else { 1e-3 },
            probes: 16,
            ..Default::default()
        };
        let err = grad_check_with(&p, &[x], &opts).unwrap();
        assert!(err < 1e-2, "input grad error {}", err);
    }

    #[test]
    fn every_tensor_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = UNetConfig::new(1, 4, 2).unwrap();
        let mut net = UNet::init(&cfg, 1.0, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng);
        let (y, c) = net.forward_cached(&x).unwrap();
        net.backward(&c, &y.map(|_| 1.0)).unwrap();
        net.visit("", &mut |name, t| {
            let g = t
                .grad()
                .map(|g| g.iter().map(|v| v.abs()).sum::<Real>())
                .unwrap_or(0.0);
            assert!(g > 0.0, "{} has no gradient", name);
        });
    }
}
