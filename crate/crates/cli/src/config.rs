//! `key = value` run configuration. Later sources override earlier ones:
//! defaults, then the config file, then command-line flags.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dna_core::geometry::GeometryConfig;
use dna_core::losses::LossWeights;
use dna_core::networks::{CriticConfig, DnaConfig};
use dna_core::training::{AdamConfig, Phase, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub size: usize,
    pub views: usize,
    /// Degrees.
    pub span: f64,
    pub branches: usize,
    pub unet_width: usize,
    pub unet_groups: usize,
    /// Critic widths are the paper's divided by this.
    pub critic_scale: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub critic_updates: usize,
    pub max_iterations: u64,
    pub pretrain_iterations: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub lambda_q: f64,
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub lambda_gp: f64,
}

pub const KEYS: &[&str] = &[
    "size",
    "views",
    "span",
    "branches",
    "unet_width",
    "unet_groups",
    "critic_scale",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "critic_updates",
    "max_iterations",
    "pretrain_iterations",
    "seed",
    "checkpoint_every",
    "lambda_q",
    "lambda_p",
    "lambda_r",
    "lambda_gp",
];

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        TrainSettings {
            size: 64,
            views: 16,
            span: 180.0,
            branches: 4,
            unet_width: 12,
            unet_groups: 4,
            critic_scale: 8,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            critic_updates: t.critic_updates_per_gen,
            max_iterations: t.max_iterations,
            pretrain_iterations: 0,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            lambda_q: w.lambda_q,
            lambda_p: w.lambda_p,
            lambda_r: w.lambda_r,
            lambda_gp: w.lambda_gp,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| anyhow!("{} = {:?}: {}", key, v, e))
}

impl TrainSettings {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "size" => self.size = num(key, v)?,
            "views" => self.views = num(key, v)?,
            "span" => self.span = num(key, v)?,
            "branches" => self.branches = num(key, v)?,
            "unet_width" => self.unet_width = num(key, v)?,
            "unet_groups" => self.unet_groups = num(key, v)?,
            "critic_scale" => self.critic_scale = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "critic_updates" => self.critic_updates = num(key, v)?,
            "max_iterations" => self.max_iterations = num(key, v)?,
            "pretrain_iterations" => self.pretrain_iterations = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "lambda_q" => self.lambda_q = num(key, v)?,
            "lambda_p" => self.lambda_p = num(key, v)?,
            "lambda_r" => self.lambda_r = num(key, v)?,
            "lambda_gp" => self.lambda_gp = num(key, v)?,
            _ => bail!("unknown config key {:?} (known: {})", key, KEYS.join(", ")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected key = value, found {:?}",
                    origin,
                    i + 1,
                    raw
                )
            })?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("{}:{}", origin, i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `KEY=VALUE` overrides from the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, found {:?}", p))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key in [`KEYS`] order, in the format [`apply_text`](Self::apply_text) reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            writeln!(s, "{} = {}", k, v).unwrap();
        }
        s
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "size" => self.size.to_string(),
                    "views" => self.views.to_string(),
                    "span" => self.span.to_string(),
                    "branches" => self.branches.to_string(),
                    "unet_width" => self.unet_width.to_string(),
                    "unet_groups" => self.unet_groups.to_string(),
                    "critic_scale" => self.critic_scale.to_string(),
                    "batch_size" => self.batch_size.to_string(),
                    "lr" => self.lr.to_string(),
                    "beta1" => self.beta1.to_string(),
                    "beta2" => self.beta2.to_string(),
                    "adam_eps" => self.adam_eps.to_string(),
                    "critic_updates" => self.critic_updates.to_string(),
                    "max_iterations" => self.max_iterations.to_string(),
                    "pretrain_iterations" => self.pretrain_iterations.to_string(),
                    "seed" => self.seed.to_string(),
                    "checkpoint_every" => self.checkpoint_every.to_string(),
                    "lambda_q" => self.lambda_q.to_string(),
                    "lambda_p" => self.lambda_p.to_string(),
                    "lambda_r" => self.lambda_r.to_string(),
                    "lambda_gp" => self.lambda_gp.to_string(),
                    _ => unreachable!(),
                };
                (k.to_string(), v)
            })
            .collect()
    }

    pub fn geometry(&self) -> Result<GeometryConfig> {
        Ok(GeometryConfig::new(self.size, self.views)?.with_span(self.span.to_radians())?)
    }

    pub fn model(&self) -> Result<DnaConfig> {
        let mut cfg = DnaConfig::desk(self.geometry()?);
        cfg.branches = self.branches;
        cfg.unet_width = self.unet_width;
        cfg.unet_groups = self.unet_groups;
        cfg.critic = CriticConfig::scaled(self.size, self.critic_scale);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            critic_updates_per_gen: self.critic_updates,
            max_iterations: self.max_iterations,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            loss_weights: LossWeights {
                lambda_q: self.lambda_q,
                lambda_p: self.lambda_p,
                lambda_r: self.lambda_r,
                lambda_gp: self.lambda_gp,
            },
            phase: Phase::Finetune,
        }
    }
}
