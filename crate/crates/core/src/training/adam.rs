use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::networks::checkpoint::NamedTensors;
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(DnaError::Config(format!(
                "invalid Adam settings {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<Real>>,
    pub v: BTreeMap<String, Vec<Real>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes `prefix.step`, `prefix.m.<name>` and `prefix.v.<name>`.
    pub fn export(&self, prefix: &str, params: &dyn Parameters, out: &mut NamedTensors) {
        out.insert(
            format!("{}.step", prefix),
            Tensor::from_vec(&[1], vec![self.step as Real]).unwrap(),
        );
        params.visit("", &mut |name, t| {
            for (tag, buf) in [("m", &self.m), ("v", &self.v)] {
                let data = buf.get(name).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
                out.insert(
                    format!("{}.{}.{}", prefix, tag, name),
                    Tensor::from_vec(t.shape(), data).unwrap(),
                );
            }
        });
    }

    pub fn import(prefix: &str, params: &dyn Parameters, src: &NamedTensors) -> Result<Self> {
        let step_name = format!("{}.step", prefix);
        let step = src
            .get(&step_name)
            .ok_or_else(|| DnaError::Config(format!("checkpoint lacks {}", step_name)))?
            .data()[0] as u64;
        let mut state = AdamState {
            step,
            ..Default::default()
        };
        let mut err = None;
        params.visit("", &mut |name, t| {
            for tag in ["m", "v"] {
                let key = format!("{}.{}.{}", prefix, tag, name);
                match src.get(&key) {
                    Some(b) if b.shape() == t.shape() => {
                        let map = if tag == "m" {
                            &mut state.m
                        } else {
                            &mut state.v
                        };
                        map.insert(name.to_string(), b.data().to_vec());
                    }
                    _ => {
                        err = err.take().or(Some(DnaError::Config(format!(
                            "checkpoint lacks {} for {:?}",
                            key,
                            t.shape()
                        ))))
                    }
                }
            }
        });
        err.map_or(Ok(state), Err)
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
/// Any non-finite gradient aborts before a single value changes. Tensors
/// without a gradient count as zero-gradient.
pub fn adam_step(
    params: &mut dyn Parameters,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut bad = None;
    params.visit("", &mut |name, t| {
        if bad.is_none() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    bad = Some(format!("gradient of {} at element {} is {}", name, i, g[i]));
                }
            }
        }
    });
    if let Some(detail) = bad {
        return Err(DnaError::NonFinite(detail));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    params.visit_mut("", &mut |name, p| {
        let n = p.len();
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let grad = p.grad().map(|g| g.to_vec());
        let data = p.data_mut();
        for i in 0..n {
            let g = grad.as_ref().map_or(0.0, |g| g[i] as f64);
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
            m[i] = mi as Real;
            v[i] = vi as Real;
            let step = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            data[i] = (data[i] as f64 - step) as Real;
        }
    });
    Ok(())
}
