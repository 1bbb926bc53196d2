//! The two generators and their composition.
//!
//! G1: ramp filter, learned filter stack, point-wise backprojection, circle
//! mask, then a residual U-net. G2: a residual U-net over the channel
//! concatenation of the analytic FBP image and the G1 output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::critic::{Critic, CriticConfig};
use super::layers::{concat_channels, split_channels};
use super::unet::{UNet, UNetCache, UNetConfig};
use crate::backprojection::{Backprojector, PointwiseBPParams};
use crate::error::{DnaError, Result};
use crate::filtration::{FilterCache, FilterStackParams};
use crate::geometry::{apply_circle_mask, GeometryConfig};
use crate::params::Parameters;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnaConfig {
    pub geometry: GeometryConfig,
    pub branches: usize,
    pub filter_channels: Vec<usize>,
    pub unet_width: usize,
    pub unet_groups: usize,
    pub critic: CriticConfig,
}

impl DnaConfig {
    /// Desk-scale defaults: 4 branches, width-12 U-nets, critic widths / 8.
    pub fn desk(geometry: GeometryConfig) -> Self {
        let n = geometry.image_size;
        DnaConfig {
            geometry,
            branches: 4,
            filter_channels: vec![1, 8, 8, 1],
            unet_width: 12,
            unet_groups: 4,
            critic: CriticConfig::scaled(n, 8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.branches == 0 {
            return Err(DnaError::Config("branch count must be positive".into()));
        }
        if self.geometry.image_size % 16 != 0 {
            return Err(DnaError::Config(format!(
                "image size {} must be divisible by 16 for the U-nets",
                self.geometry.image_size
            )));
        }
        if self.critic.image_size != self.geometry.image_size {
            return Err(DnaError::Config(
                "critic and geometry image sizes differ".into(),
            ));
        }
        self.critic.validate()?;
        UNetConfig::new(1, self.unet_width, self.unet_groups)?;
        Ok(())
    }

    fn unet(&self, in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            width: self.unet_width,
            groups: self.unet_groups,
        }
    }
}

/// Everything the generator objective trains.
#[derive(Clone, Debug)]
pub struct Generator {
    pub filter: FilterStackParams,
    pub bp: PointwiseBPParams,
    pub g1: UNet,
    pub g2: UNet,
}

impl Parameters for Generator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        let p = |s: &str| crate::params::join(prefix, s);
        self.filter.visit(&p("filter"), f);
        self.bp.visit(&p("bp"), f);
        self.g1.visit(&p("g1"), f);
        self.g2.visit(&p("g2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = |s: &str| crate::params::join(prefix, s);
        self.filter.visit_mut(&p("filter"), f);
        self.bp.visit_mut(&p("bp"), f);
        self.g1.visit_mut(&p("g1"), f);
        self.g2.visit_mut(&p("g2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DnaParams {
    pub generator: Generator,
    pub critic: Critic,
}

impl DnaParams {
    /// Identity filter stack, unit BP weights, zero U-nets and critic: the
    /// generators reproduce analytic FBP exactly.
    pub fn identity(config: &DnaConfig) -> Result<Self> {
        config.validate()?;
        let n_d = config.geometry.num_detectors;
        Ok(DnaParams {
            generator: Generator {
                filter: FilterStackParams::identity(n_d, &config.filter_channels)?,
                bp: PointwiseBPParams::identity(config.branches, &config.geometry),
                g1: UNet::zeros(&config.unet(1))?,
                g2: UNet::zeros(&config.unet(2))?,
            },
            critic: Critic::zeros(&config.critic)?,
        })
    }

    /// Training initialisation: everything starts close to FBP.
    pub fn init<R: Rng + ?Sized>(config: &DnaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n_d = config.geometry.num_detectors;
        Ok(DnaParams {
            generator: Generator {
                filter: FilterStackParams::init(n_d, &config.filter_channels, 1e-3, rng)?,
                bp: PointwiseBPParams::init(config.branches, &config.geometry, 0.01, rng),
                g1: UNet::init(&config.unet(1), 0.1, rng)?,
                g2: UNet::init(&config.unet(2), 0.1, rng)?,
            },
            critic: Critic::init(&config.critic, rng)?,
        })
    }
}

impl Parameters for DnaParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.generator.visit(prefix, f);
        self.critic.visit(&crate::params::join(prefix, "critic"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.generator.visit_mut(prefix, f);
        self.critic
            .visit_mut(&crate::params::join(prefix, "critic"), f);
    }
}

/// Images produced from one sinogram batch.
#[derive(Clone, Debug)]
pub struct GenOutput {
    pub fbp: Tensor,
    pub g1: Tensor,
    pub g2: Tensor,
}

pub struct GenCache {
    filter: FilterCache,
    filtered: Tensor,
    unet1: UNetCache,
    unet2: UNetCache,
}

/// Geometry-bound operators shared by both generators.
#[derive(Clone, Debug)]
pub struct DnaModel {
    config: DnaConfig,
    bp: Backprojector,
}

impl DnaModel {
    pub fn new(config: &DnaConfig) -> Result<Self> {
        config.validate()?;
        Ok(DnaModel {
            config: config.clone(),
            bp: Backprojector::new(&config.geometry)?,
        })
    }

    pub fn config(&self) -> &DnaConfig {
        &self.config
    }

    pub fn geometry(&self) -> &GeometryConfig {
        &self.config.geometry
    }

    pub fn backprojector(&self) -> &Backprojector {
        &self.bp
    }

    pub fn fbp(&self, sino: &Tensor) -> Result<Tensor> {
        self.bp.fbp(sino)
    }

    pub fn forward(&self, gen: &Generator, sino: &Tensor) -> Result<GenOutput> {
        Ok(self.forward_cached(gen, sino)?.0)
    }

    pub fn forward_cached(&self, gen: &Generator, sino: &Tensor) -> Result<(GenOutput, GenCache)> {
        let ramped = self.bp.ramp().apply(sino)?;
        let (filtered, filter) = gen.filter.forward(&ramped)?;
        let mut x1 = self.bp.forward(&filtered, &gen.bp)?;
        apply_circle_mask(&mut x1);
        let (c1, unet1) = gen.g1.forward_cached(&x1)?;
        let g1 = residual(&x1, &c1);
        let fbp = self.fbp(sino)?;
        let (c2, unet2) = gen.g2.forward_cached(&concat_channels(&fbp, &g1))?;
        let g2 = residual(&g1, &c2);
        Ok((
            GenOutput { fbp, g1, g2 },
            GenCache {
                filter,
                filtered,
                unet1,
                unet2,
            },
        ))
    }

    /// Accumulates generator gradients from cotangents of both outputs.
    pub fn backward(
        &self,
        gen: &mut Generator,
        cache: &GenCache,
        d_g1: &Tensor,
        d_g2: &Tensor,
    ) -> Result<()> {
        let dcat = gen.g2.backward(&cache.unet2, d_g2)?;
        let (_, d_from_g2) = split_channels(&dcat, 1);
        let mut dy1 = d_g1.clone();
        dy1.add_assign(d_g2);
        dy1.add_assign(&d_from_g2);
        let mut dx1 = gen.g1.backward(&cache.unet1, &dy1)?;
        dx1.add_assign(&dy1);
        apply_circle_mask(&mut dx1);
        let d_filtered = self.bp.backward(&cache.filtered, &mut gen.bp, &dx1)?;
        // the ramped sinogram is data, so its cotangent is dropped
        gen.filter.backward(&cache.filter, &d_filtered)?;
        Ok(())
    }
}

fn residual(base: &Tensor, correction: &Tensor) -> Tensor {
    let mut out = base.clone();
    out.add_assign(correction);
    out
}

pub fn g1_forward(sino: &Tensor, params: &DnaParams, geo: &GeometryConfig) -> Result<Tensor> {
    let model = DnaModel::new(&config_for(params, geo)?)?;
    let ramped = model.bp.ramp().apply(sino)?;
    let filtered = params.generator.filter.forward(&ramped)?.0;
    let mut x1 = model.bp.forward(&filtered, &params.generator.bp)?;
    apply_circle_mask(&mut x1);
    Ok(residual(&x1, &params.generator.g1.forward(&x1)?))
}

pub fn g2_forward(fbp_img: &Tensor, g1_img: &Tensor, params: &DnaParams) -> Result<Tensor> {
    if fbp_img.shape() != g1_img.shape() || fbp_img.rank() != 4 || fbp_img.dim(1) != 1 {
        return Err(DnaError::shape(
            "g2_forward",
            format!(
                "inputs {:?} and {:?} must both be [B, 1, N, N]",
                fbp_img.shape(),
                g1_img.shape()
            ),
        ));
    }
    let c = params
        .generator
        .g2
        .forward(&concat_channels(fbp_img, g1_img))?;
    Ok(residual(g1_img, &c))
}

pub fn critic_forward(img: &Tensor, critic: &Critic) -> Result<Tensor> {
    critic.forward(img)
}

/// Recovers the architecture config implied by a parameter set.
pub fn config_for(params: &DnaParams, geo: &GeometryConfig) -> Result<DnaConfig> {
    let gen = &params.generator;
    let mut channels = vec![1];
    channels.extend(gen.filter.layers.iter().map(|l| l.weight.dim(0)));
    Ok(DnaConfig {
        geometry: geo.clone(),
        branches: gen.bp.branches(),
        filter_channels: channels,
        unet_width: gen.g1.config.width,
        unet_groups: gen.g1.config.groups,
        critic: params.critic.config.clone(),
    })
}

/// Sum of element counts per component, for reporting.
pub fn param_breakdown(params: &DnaParams) -> Vec<(&'static str, usize)> {
    let g = &params.generator;
    vec![
        ("filter", g.filter.param_count()),
        ("bp", g.bp.param_count()),
        ("g1", g.g1.param_count()),
        ("g2", g.g2.param_count()),
        ("critic", params.critic.param_count()),
    ]
}
