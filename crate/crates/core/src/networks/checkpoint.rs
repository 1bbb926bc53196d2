//! "DNA1" binary checkpoints.
//!
//! Layout: the 4-byte magic, then per tensor a u16 LE name length, the
//! UTF-8 name, a u8 rank, u32 LE dims and 32-bit LE floats. Architecture
//! is recovered from tensor shapes plus a few `meta.*` entries, so a file
//! is self-describing.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use super::critic::{Critic, CriticConfig};
use super::dna::{DnaParams, Generator};
use super::unet::{UNet, UNetConfig};
use crate::backprojection::PointwiseBPParams;
use crate::error::{DnaError, Result};
use crate::filtration::{FilterLayer, FilterStackParams};
use crate::geometry::GeometryConfig;
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DNA1";

pub type NamedTensors = BTreeMap<String, Tensor>;

pub fn encode(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(DnaError::Config(format!(
                "tensor {} cannot be encoded",
                name
            )));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DnaError::Parse {
                offset: self.pos,
                detail: format!(
                    "{} needs {} bytes, only {} remain",
                    what,
                    n,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode(buf: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DnaError::Parse {
            offset: 0,
            detail: format!("unknown magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let mut out = NamedTensors::new();
    while r.pos < buf.len() {
        let start = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| DnaError::Parse {
                offset: start + 2,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.take(4, "dimension")?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(
            count.checked_mul(4).ok_or_else(|| DnaError::Parse {
                offset: r.pos,
                detail: "tensor size overflows".into(),
            })?,
            &format!("data of {}", name),
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        if out
            .insert(name.clone(), Tensor::from_vec(&shape, data)?)
            .is_some()
        {
            return Err(DnaError::Parse {
                offset: start,
                detail: format!("duplicate tensor {}", name),
            });
        }
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &NamedTensors) -> Result<()> {
    std::fs::write(path, encode(tensors)?).map_err(|e| DnaError::io(path, e))
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    decode(&std::fs::read(path).map_err(|e| DnaError::io(path, e))?)
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(&[1], vec![v as Real]).unwrap()
}

/// All parameters plus the metadata needed to rebuild the architecture.
pub fn params_to_named(params: &DnaParams, geo: &GeometryConfig) -> NamedTensors {
    let mut m = NamedTensors::new();
    params.visit("", &mut |name, t| {
        let mut c = t.clone();
        c.clear_grad();
        m.insert(name.to_string(), c);
    });
    m.insert("meta.span_over_pi".into(), scalar(geo.angular_span / PI));
    m.insert(
        "meta.unet_groups".into(),
        scalar(params.generator.g1.config.groups as f64),
    );
    m.insert(
        "meta.critic_slope".into(),
        scalar(params.critic.config.slope as f64),
    );
    let strides = params
        .critic
        .config
        .strides
        .iter()
        .map(|&s| s as Real)
        .collect();
    m.insert(
        "meta.critic_strides".into(),
        Tensor::from_vec(&[params.critic.config.strides.len()], strides).unwrap(),
    );
    let residual = params
        .generator
        .filter
        .layers
        .iter()
        .map(|l| if l.residual { 1.0 } else { 0.0 })
        .collect::<Vec<_>>();
    m.insert(
        "meta.filter_residual".into(),
        Tensor::from_vec(&[residual.len()], residual).unwrap(),
    );
    m
}

fn get<'a>(m: &'a NamedTensors, name: &str) -> Result<&'a Tensor> {
    m.get(name)
        .ok_or_else(|| DnaError::Config(format!("checkpoint lacks tensor {}", name)))
}

fn meta(m: &NamedTensors, name: &str) -> Result<f64> {
    Ok(get(m, name)?.data()[0] as f64)
}

/// Rebuilds parameters and geometry from [`params_to_named`] output.
/// Tensors outside the parameter set are ignored unless they would shadow a
/// parameter name.
pub fn params_from_named(m: &NamedTensors) -> Result<(DnaParams, GeometryConfig)> {
    let bp_w = get(m, "bp.weights")?;
    if bp_w.rank() != 3 {
        return Err(DnaError::Config("bp.weights must be rank 3".into()));
    }
    let (branches, views, n) = (bp_w.dim(0), bp_w.dim(1), bp_w.dim(2));
    let span_ratio = meta(m, "meta.span_over_pi")?;
    let mut geo = GeometryConfig::new(n, views)?;
    if span_ratio != 1.0 {
        geo = geo.with_span(span_ratio * PI)?;
    }

    let residual = get(m, "meta.filter_residual")?;
    let mut layers = Vec::new();
    for (i, &r) in residual.data().iter().enumerate() {
        layers.push(FilterLayer {
            weight: get(m, &format!("filter.conv{}.weight", i))?.clone(),
            bias: get(m, &format!("filter.conv{}.bias", i))?.clone(),
            residual: r != 0.0,
        });
    }
    let filter = FilterStackParams { layers };
    filter.validate(n)?;

    let groups = meta(m, "meta.unet_groups")? as usize;
    let width = get(m, "g1.stem.weight")?.dim(0);
    let mut g1 = UNet::zeros(&UNetConfig::new(1, width, groups)?)?;
    let mut g2 = UNet::zeros(&UNetConfig::new(2, width, groups)?)?;
    assign(&mut g1, "g1", m)?;
    assign(&mut g2, "g2", m)?;

    let strides: Vec<usize> = get(m, "meta.critic_strides")?
        .data()
        .iter()
        .map(|&s| s as usize)
        .collect();
    let widths = (0..strides.len())
        .map(|l| get(m, &format!("critic.conv{}.weight", l)).map(|t| t.dim(0)))
        .collect::<Result<Vec<_>>>()?;
    let critic_cfg = CriticConfig {
        image_size: n,
        widths,
        strides,
        fc_hidden: get(m, "critic.fc1.weight")?.dim(0),
        slope: meta(m, "meta.critic_slope")? as Real,
    };
    let mut critic = Critic::zeros(&critic_cfg)?;
    assign(&mut critic, "critic", m)?;

    let mut bp = PointwiseBPParams::identity(branches, &geo);
    assign(&mut bp, "bp", m)?;
    Ok((
        DnaParams {
            generator: Generator { filter, bp, g1, g2 },
            critic,
        },
        geo,
    ))
}

/// Copies every tensor named under `prefix` into `target`, checking shapes.
pub fn assign(target: &mut dyn Parameters, prefix: &str, m: &NamedTensors) -> Result<()> {
    let mut err = None;
    target.visit_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match m.get(name) {
            Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            Some(src) => {
                err = Some(DnaError::shape(
                    "checkpoint",
                    format!(
                        "{}: expected {:?}, found {:?}",
                        name,
                        t.shape(),
                        src.shape()
                    ),
                ))
            }
            None => {
                err = Some(DnaError::Config(format!(
                    "checkpoint lacks tensor {}",
                    name
                )))
            }
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn save_params(path: &Path, params: &DnaParams, geo: &GeometryConfig) -> Result<()> {
    save(path, &params_to_named(params, geo))
}

pub fn load_params(path: &Path) -> Result<(DnaParams, GeometryConfig)> {
    params_from_named(&load(path)?)
}
