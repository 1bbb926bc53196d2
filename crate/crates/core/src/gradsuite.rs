//! Finite-difference checks of every hand-written VJP in the pipeline,
//! each on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backprojection::{Backprojector, PointwiseBPParams};
use crate::error::Result;
use crate::filtration::{FilterStackParams, RampFilter};
use crate::geometry::{GeometryConfig, Projector};
use crate::gradcheck::{grad_check_with, FnPrimitive, GradCheckOptions};
use crate::losses::{
    interpolate, penalty_at, penalty_with_pattern, sinogram_consistency, ssim, ssim_grad,
};
use crate::networks::critic::{Critic, CriticConfig};
use crate::networks::unet::{UNet, UNetConfig};
use crate::ops::{
    bias_grad, conv1d, conv2d_forward, conv2d_input_grad, conv2d_transpose_to, conv2d_weight_grad,
    rotate_bilinear, rotate_bilinear_adjoint, ConvSpec,
};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

/// Names of the checked primitives, in report order.
pub const CASES: &[&str] = &[
    "conv1d",
    "conv2d",
    "conv2d_transpose",
    "rotate_bilinear",
    "ramp_filter",
    "learned_filter",
    "pointwise_backproject",
    "ssim",
    "sinogram_consistency_loss",
    "gradient_penalty",
    "critic_forward",
    "unet",
];

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps: if cfg!(feature = "f64") { 1e-6 } else { 1e-3 },
        probes: 24,
        seed,
        skip: Vec::new(),
    }
}

fn grad_or_zero(t: &Tensor) -> Tensor {
    match t.grad() {
        Some(g) => grads_of(g.to_vec(), t.shape()),
        None => Tensor::zeros(t.shape()),
    }
}

fn grads_of(dw: Vec<Real>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(shape, dw).unwrap()
}

/// Worst relative error of case `name` on the instance drawn from `seed`.
pub fn run_case(name: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    match name {
        "conv1d" => {
            let x = Tensor::randn(&[2, 3, 16], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, 5], 0.5, &mut rng);
            let b = Tensor::randn(&[4], 0.5, &mut rng);
            let stride = 1 + (seed as usize % 2);
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| conv1d(&xs[0], &xs[1], &xs[2], stride, 2),
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let spec = ConvSpec::row(stride, 2);
                    let (bt, c, l) = (xs[0].dim(0), xs[0].dim(1), xs[0].dim(2));
                    let x4 = xs[0].clone().reshape(&[bt, c, 1, l])?;
                    let wshape = [xs[1].dim(0), xs[1].dim(1), 1, xs[1].dim(2)];
                    let w4 = xs[1].clone().reshape(&wshape)?;
                    let g4 = g.clone().reshape(&[bt, g.dim(1), 1, g.dim(2)])?;
                    let dx =
                        conv2d_input_grad(&g4, &w4, spec, x4.shape())?.reshape(xs[0].shape())?;
                    let mut dw = vec![0.0; xs[1].len()];
                    conv2d_weight_grad(&x4, &g4, spec, &wshape, &mut dw)?;
                    let mut db = vec![0.0; xs[2].len()];
                    bias_grad(&g4, &mut db);
                    Ok(vec![
                        dx,
                        grads_of(dw, xs[1].shape()),
                        grads_of(db, xs[2].shape()),
                    ])
                },
            };
            grad_check_with(&p, &[x, w, b], &opts(seed))
        }
        "conv2d" => {
            let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng);
            let groups = if seed % 2 == 0 { 1 } else { 2 };
            let w = Tensor::randn(&[4, 4 / groups, 3, 3], 0.5, &mut rng);
            let b = Tensor::randn(&[4], 0.5, &mut rng);
            let spec = ConvSpec::grouped(1 + (seed as usize % 2), 1, groups);
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| conv2d_forward(&xs[0], &xs[1], Some(&xs[2]), spec),
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let dx = conv2d_input_grad(g, &xs[1], spec, xs[0].shape())?;
                    let mut dw = vec![0.0; xs[1].len()];
                    conv2d_weight_grad(&xs[0], g, spec, xs[1].shape(), &mut dw)?;
                    let mut db = vec![0.0; 4];
                    bias_grad(g, &mut db);
                    Ok(vec![dx, grads_of(dw, xs[1].shape()), grads_of(db, &[4])])
                },
            };
            grad_check_with(&p, &[x, w, b], &opts(seed))
        }
        "conv2d_transpose" => {
            let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut rng);
            let b = Tensor::randn(&[3], 0.5, &mut rng);
            let spec = ConvSpec::new(2, 1);
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| {
                    conv2d_transpose_to(&xs[0], &xs[1], Some(&xs[2]), spec, (8, 8))
                },
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let dx = conv2d_forward(g, &xs[1], None, spec)?;
                    let mut dw = vec![0.0; xs[1].len()];
                    conv2d_weight_grad(g, &xs[0], spec, xs[1].shape(), &mut dw)?;
                    let mut db = vec![0.0; 3];
                    bias_grad(g, &mut db);
                    Ok(vec![dx, grads_of(dw, xs[1].shape()), grads_of(db, &[3])])
                },
            };
            grad_check_with(&p, &[x, w, b], &opts(seed))
        }
        "rotate_bilinear" => {
            let img = Tensor::randn(&[1, 2, 9, 9], 1.0, &mut rng);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| rotate_bilinear(&xs[0], theta),
                vjp: move |_: &[Tensor], g: &Tensor| Ok(vec![rotate_bilinear_adjoint(g, theta)?]),
            };
            grad_check_with(&p, &[img], &opts(seed))
        }
        "ramp_filter" => {
            let sino = Tensor::randn(&[2, 1, 3, 16], 1.0, &mut rng);
            let ramp = RampFilter::new(16);
            let r2 = ramp.clone();
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| ramp.apply(&xs[0]),
                vjp: move |_: &[Tensor], g: &Tensor| Ok(vec![r2.backward(g)?]),
            };
            grad_check_with(&p, &[sino], &opts(seed))
        }
        "learned_filter" => {
            let sino = Tensor::randn(&[1, 1, 3, 16], 1.0, &mut rng);
            let stack = FilterStackParams::init(16, &[1, 4, 4, 1], 0.3, &mut rng)?;
            let mut inputs = vec![sino];
            stack.visit("", &mut |_, t| inputs.push(t.clone()));
            let template = stack.clone();
            let build = move |xs: &[Tensor]| {
                let mut s = template.clone();
                let mut i = 1;
                s.visit_mut("", &mut |_, t| {
                    *t = xs[i].clone();
                    i += 1;
                });
                s
            };
            let b2 = build.clone();
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| Ok(build(xs).forward(&xs[0])?.0),
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let mut s = b2(xs);
                    let (_, cache) = s.forward(&xs[0])?;
                    let dx = s.backward(&cache, g)?;
                    let mut out = vec![dx];
                    s.visit("", &mut |_, t| out.push(grad_or_zero(t)));
                    Ok(out)
                },
            };
            grad_check_with(&p, &inputs, &opts(seed))
        }
        "pointwise_backproject" => {
            let geo = GeometryConfig::new(16, 4)?;
            let bp = Backprojector::new(&geo)?;
            let filtered = Tensor::randn(&geo.sinogram_shape(2), 1.0, &mut rng);
            let mut params = PointwiseBPParams::init(2, &geo, 0.3, &mut rng);
            params.biases = Tensor::randn(params.biases.shape(), 0.1, &mut rng);
            let bp2 = bp.clone();
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| {
                    let params = PointwiseBPParams {
                        weights: xs[1].clone(),
                        biases: xs[2].clone(),
                    };
                    bp.forward(&xs[0], &params)
                },
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let mut params = PointwiseBPParams {
                        weights: xs[1].clone(),
                        biases: xs[2].clone(),
                    };
                    let df = bp2.backward(&xs[0], &mut params, g)?;
                    let dw = grads_of(params.weights.grad().unwrap().to_vec(), xs[1].shape());
                    let db = grads_of(params.biases.grad().unwrap().to_vec(), xs[2].shape());
                    Ok(vec![df, dw, db])
                },
            };
            grad_check_with(&p, &[filtered, params.weights, params.biases], &opts(seed))
        }
        "ssim" => {
            let x = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
            let mut y = x.map(|v| v * 0.7 + 0.1);
            y.add_assign(&Tensor::randn(y.shape(), 0.1, &mut rng));
            let p = FnPrimitive {
                forward: |xs: &[Tensor]| Ok(Tensor::full(&[1], ssim(&xs[0], &xs[1], 1.0)? as Real)),
                vjp: |xs: &[Tensor], g: &Tensor| {
                    let mut d = ssim_grad(&xs[0], &xs[1], 1.0)?;
                    d.scale(g.data()[0]);
                    Ok(vec![d, Tensor::zeros(xs[1].shape())])
                },
            };
            let mut o = opts(seed);
            o.skip = vec![1];
            grad_check_with(&p, &[y, x], &o)
        }
        "sinogram_consistency_loss" => {
            let geo = GeometryConfig::new(16, 4)?;
            let proj = Projector::new(&geo)?;
            let img = Tensor::uniform(&geo.image_shape(2), 0.0, 1.0, &mut rng);
            let sino = Tensor::uniform(&geo.sinogram_shape(2), 0.0, 8.0, &mut rng);
            let p2 = proj.clone();
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| {
                    Ok(Tensor::full(
                        &[1],
                        sinogram_consistency(&xs[0], &xs[1], &proj)?.0 as Real,
                    ))
                },
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let mut d = sinogram_consistency(&xs[0], &xs[1], &p2)?.1;
                    d.scale(g.data()[0]);
                    Ok(vec![d, Tensor::zeros(xs[1].shape())])
                },
            };
            let mut o = opts(seed);
            o.skip = vec![1];
            grad_check_with(&p, &[img, sino], &o)
        }
        "gradient_penalty" => {
            let cfg = small_critic();
            let critic = Critic::init(&cfg, &mut rng)?;
            let real = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
            let fake = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
            let eps: Vec<Real> = (0..2).map(|_| rng.gen()).collect();
            let points = interpolate(&real, &fake, &eps)?;
            let mut inputs = Vec::new();
            critic.visit("", &mut |_, t| inputs.push(t.clone()));
            let template = critic.clone();
            let build = move |xs: &[Tensor]| {
                let mut c = template.clone();
                let mut i = 0;
                c.visit_mut("", &mut |_, t| {
                    *t = xs[i].clone();
                    i += 1;
                });
                c
            };
            // The penalty jumps where a unit changes sign, so differences
            // are taken with the activation pattern of the base point frozen.
            let (_, pattern) = critic.forward_cached(&points)?;
            let b2 = build.clone();
            let pts = points.clone();
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| {
                    Ok(Tensor::full(
                        &[1],
                        penalty_with_pattern(&build(xs), pattern.clone())?.value as Real,
                    ))
                },
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let mut c = b2(xs);
                    c.zero_grads();
                    penalty_at(&c, &pts)?.accumulate(&mut c, g.data()[0] as f64)?;
                    let mut out = Vec::new();
                    c.visit("", &mut |_, t| out.push(grad_or_zero(t)));
                    Ok(out)
                },
            };
            grad_check_with(&p, &inputs, &opts(seed))
        }
        "critic_forward" => {
            let cfg = small_critic();
            let critic = with_random_biases(Critic::init(&cfg, &mut rng)?, &mut rng);
            let x = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
            // kinks are crossed by finite steps; difference on the base piece
            let (_, pattern) = critic.forward_cached(&x)?;
            let mut inputs = vec![x];
            critic.visit("", &mut |_, t| inputs.push(t.clone()));
            let build = move |xs: &[Tensor]| {
                let mut c = critic.clone();
                let mut i = 1;
                c.visit_mut("", &mut |_, t| {
                    *t = xs[i].clone();
                    i += 1;
                });
                c
            };
            let b2 = build.clone();
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| build(xs).forward_with_pattern(&xs[0], &pattern),
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let mut c = b2(xs);
                    c.zero_grads();
                    let (_, cache) = c.forward_cached(&xs[0])?;
                    let dx = c.backward(&cache, g)?;
                    let mut out = vec![dx];
                    c.visit("", &mut |_, t| out.push(grad_or_zero(t)));
                    Ok(out)
                },
            };
            grad_check_with(&p, &inputs, &opts(seed))
        }
        "unet" => {
            let cfg = UNetConfig::new(2, 4, 2)?;
            let net = with_random_biases(UNet::init(&cfg, 1.0, &mut rng)?, &mut rng);
            let x = Tensor::randn(&[1, 2, 16, 16], 1.0, &mut rng);
            let (_, pattern) = net.forward_cached(&x)?;
            let mut inputs = vec![x];
            net.visit("", &mut |_, t| inputs.push(t.clone()));
            let build = move |xs: &[Tensor]| {
                let mut c = net.clone();
                let mut i = 1;
                c.visit_mut("", &mut |_, t| {
                    *t = xs[i].clone();
                    i += 1;
                });
                c
            };
            let b2 = build.clone();
            let p = FnPrimitive {
                forward: move |xs: &[Tensor]| build(xs).forward_with_pattern(&xs[0], &pattern),
                vjp: move |xs: &[Tensor], g: &Tensor| {
                    let mut c = b2(xs);
                    c.zero_grads();
                    let (_, cache) = c.forward_cached(&xs[0])?;
                    let dx = c.backward(&cache, g)?;
                    let mut out = vec![dx];
                    c.visit("", &mut |_, t| out.push(grad_or_zero(t)));
                    Ok(out)
                },
            };
            // on a frozen piece the net is affine in each tensor separately,
            // so a wide step costs no truncation and swamps f32 rounding
            let mut o = opts(seed);
            o.probes = 8;
            o.eps = 0.125;
            grad_check_with(&p, &inputs, &o)
        }
        other => Err(crate::error::DnaError::Config(format!(
            "unknown gradient case {}",
            other
        ))),
    }
}

/// Nonzero biases keep units off their kinks at exactly zero input.
fn with_random_biases<P: Parameters, R: Rng>(mut p: P, rng: &mut R) -> P {
    p.visit_mut("", &mut |name, t| {
        if name.ends_with("bias") {
            *t = Tensor::randn(t.shape(), 0.1, rng);
        }
    });
    p
}

fn small_critic() -> CriticConfig {
    CriticConfig {
        image_size: 8,
        widths: vec![2, 2, 3, 3, 4, 4],
        strides: vec![1, 2, 1, 2, 1, 2],
        fc_hidden: 6,
        slope: 0.2,
    }
}

/// Worst error of `name` over `instances` seeds.
pub fn worst_over(name: &str, instances: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        worst = worst.max(run_case(name, s)?);
    }
    Ok(worst)
}
