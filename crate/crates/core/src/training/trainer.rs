//! Alternating critic / generator updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use crate::data_io::Dataset;
use crate::error::{DnaError, Result};
use crate::geometry::Projector;
use crate::losses::{
    adversarial_grad, adversarial_loss_g, critic_objective, generator_objective, interpolate,
    mse_grad, mse_loss, penalty_at, sample_mix, sinogram_consistency, ssim, ssim_grad,
    GeneratorTerms, LossWeights,
};
use crate::networks::{DnaConfig, DnaModel, DnaParams, GenOutput};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub critic_updates_per_gen: usize,
    pub max_iterations: u64,
    pub seed: u64,
    /// Checkpoint period in generator iterations; 0 keeps only the first
    /// and last.
    pub checkpoint_every: u64,
    pub loss_weights: LossWeights,
    pub phase: Phase,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            adam: AdamConfig::default(),
            critic_updates_per_gen: 4,
            max_iterations: 2000,
            seed: 0,
            checkpoint_every: 500,
            loss_weights: LossWeights::default(),
            phase: Phase::Finetune,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DnaError::Config("batch_size must be >= 1".into()));
        }
        if self.critic_updates_per_gen == 0 {
            return Err(DnaError::Config(
                "critic_updates_per_gen must be >= 1".into(),
            ));
        }
        self.adam.validate()?;
        self.loss_weights.validate()
    }
}

/// One line of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub critic_loss: f64,
    pub gen_total: f64,
    pub terms: GeneratorTerms,
    pub gp: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "iteration,critic_loss,gen_total,mse1,mse2,ssim1,ssim2,sino1,sino2,adv1,adv2,gp";

impl LossRow {
    pub fn csv(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.critic_loss,
            self.gen_total,
            t.mse1,
            t.mse2,
            t.ssim1,
            t.ssim2,
            t.sino1,
            t.sino2,
            t.adv1,
            t.adv2,
            self.gp
        )
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: DnaParams,
    pub gen_opt: AdamState,
    pub critic_opt: AdamState,
    /// Completed generator iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn fresh(params: DnaParams) -> Self {
        TrainState {
            params,
            gen_opt: AdamState::new(),
            critic_opt: AdamState::new(),
            iteration: 0,
        }
    }
}

/// Optimizer owner for one dataset. Randomness for iteration `k` derives
/// from `(seed, k)` alone, so a resumed run replays the same draws.
pub struct Trainer<'a> {
    model: DnaModel,
    projector: Projector,
    data: &'a Dataset,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dna: &DnaConfig,
        config: TrainConfig,
        data: &'a Dataset,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(DnaError::Config("training dataset is empty".into()));
        }
        if data.geometry != dna.geometry {
            return Err(DnaError::Config(format!(
                "dataset geometry {:?} differs from model geometry {:?}",
                data.geometry, dna.geometry
            )));
        }
        Ok(Trainer {
            model: DnaModel::new(dna)?,
            projector: Projector::new(&dna.geometry)?,
            data,
            config,
            state,
        })
    }

    pub fn model(&self) -> &DnaModel {
        &self.model
    }

    fn iteration_rng(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(k.wrapping_add(1) << 1);
        rng
    }

    /// Items of batch number `t` in the endless stream of seeded epochs.
    pub fn batch_indices(&self, t: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.config.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for p in t * b..(t + 1) * b {
            let epoch = p / n;
            if cached.as_ref().map_or(true, |(e, _)| *e != epoch) {
                cached = Some((
                    epoch,
                    self.data.epoch_order(self.config.seed ^ 0x5eed, epoch),
                ));
            }
            out.push(cached.as_ref().unwrap().1[(p % n) as usize]);
        }
        out
    }

    /// One critic update on the given items. Returns the critic objective
    /// and the gradient penalty, both before the update.
    pub fn critic_step<R: Rng>(&mut self, idx: &[usize], rng: &mut R) -> Result<(f64, f64)> {
        let (real, sino) = self.data.batch(idx)?;
        let out = self.model.forward(&self.state.params.generator, &sino)?;
        let lambda_gp = self.config.loss_weights.lambda_gp;
        let critic = &mut self.state.params.critic;
        critic.zero_grads();
        let b = real.dim(0);
        let mut score = |x: &Tensor, w: Real| -> Result<Tensor> {
            let (s, cache) = critic.forward_cached(x)?;
            critic.backward(&cache, &Tensor::full(&[b], w / b as Real))?;
            Ok(s)
        };
        let s_real = score(&real, -2.0)?;
        let s1 = score(&out.g1, 1.0)?;
        let s2 = score(&out.g2, 1.0)?;
        // the fake side of each interpolate is G1 or G2 at random
        let picks: Vec<Tensor> = (0..b)
            .map(|i| {
                if rng.gen::<bool>() {
                    out.g1.batch_item(i)
                } else {
                    out.g2.batch_item(i)
                }
            })
            .collect();
        let fake = Tensor::concat_batch(&picks.iter().collect::<Vec<_>>())?;
        let points = interpolate(&real, &fake, &sample_mix(b, rng))?;
        let pen = penalty_at(critic, &points)?;
        pen.accumulate(critic, lambda_gp)?;
        let loss = critic_objective(&s_real, &s1, &s2, pen.value, lambda_gp);
        if !loss.is_finite() {
            return Err(DnaError::NonFinite(format!(
                "critic loss {} (gp {})",
                loss, pen.value
            )));
        }
        adam_step(critic, &mut self.state.critic_opt, &self.config.adam)?;
        Ok((loss, pen.value))
    }

    /// Loss terms of both generators on one batch, with the cotangents of
    /// the total objective with respect to G1 and G2.
    fn generator_terms(
        &self,
        out: &GenOutput,
        real: &Tensor,
        sino: &Tensor,
    ) -> Result<(GeneratorTerms, Tensor, Tensor)> {
        let w = self.config.loss_weights;
        let critic = &self.state.params.critic;
        let one = |img: &Tensor| -> Result<(f64, f64, f64, f64, Tensor)> {
            let mse = mse_loss(img, real)?;
            let mut d = mse_grad(img, real)?;
            let s = ssim(img, real, 1.0)?;
            d.axpy(-(w.lambda_p as Real), &ssim_grad(img, real, 1.0)?);
            let (sino_loss, d_sino) = sinogram_consistency(img, sino, &self.projector)?;
            d.axpy(w.lambda_r as Real, &d_sino);
            let (scores, cache) = critic.forward_cached(img)?;
            let adv = adversarial_loss_g(&scores);
            let (d_adv, _) = critic.backward_input(&cache, &adversarial_grad(&scores))?;
            d.axpy(w.lambda_q as Real, &d_adv);
            Ok((mse, s, sino_loss, adv, d))
        };
        let (mse1, ssim1, sino1, adv1, d1) = one(&out.g1)?;
        let (mse2, ssim2, sino2, adv2, d2) = one(&out.g2)?;
        Ok((
            GeneratorTerms {
                mse1,
                mse2,
                ssim1,
                ssim2,
                sino1,
                sino2,
                adv1,
                adv2,
            },
            d1,
            d2,
        ))
    }

    /// One joint update of both generators. Returns the terms before it.
    pub fn generator_step(&mut self, idx: &[usize]) -> Result<(GeneratorTerms, f64)> {
        let (real, sino) = self.data.batch(idx)?;
        let (out, cache) = self
            .model
            .forward_cached(&self.state.params.generator, &sino)?;
        let (terms, d1, d2) = self.generator_terms(&out, &real, &sino)?;
        let total = generator_objective(&terms, &self.config.loss_weights);
        if !total.is_finite() {
            return Err(DnaError::NonFinite(format!(
                "generator loss {} ({:?})",
                total, terms
            )));
        }
        let gen = &mut self.state.params.generator;
        gen.zero_grads();
        self.model.backward(gen, &cache, &d1, &d2)?;
        adam_step(gen, &mut self.state.gen_opt, &self.config.adam)?;
        Ok((terms, total))
    }

    /// Critic updates followed by one generator update.
    pub fn step(&mut self) -> Result<LossRow> {
        let k = self.state.iteration;
        let per = self.config.critic_updates_per_gen as u64;
        let mut rng = self.iteration_rng(k);
        let (mut critic_loss, mut gp) = (0.0, 0.0);
        for j in 0..per {
            let idx = self.batch_indices(k * (per + 1) + j);
            (critic_loss, gp) = self.critic_step(&idx, &mut rng)?;
        }
        let idx = self.batch_indices(k * (per + 1) + per);
        let (terms, gen_total) = self.generator_step(&idx)?;
        self.state.iteration += 1;
        Ok(LossRow {
            iteration: k,
            critic_loss,
            gen_total,
            terms,
            gp,
        })
    }

    /// Generator terms and objective over `data` without updating anything.
    pub fn evaluate(&self, data: &Dataset) -> Result<(GeneratorTerms, f64)> {
        evaluate_generator(
            &self.model,
            &self.state.params,
            data,
            &self.config.loss_weights,
            self.config.batch_size,
        )
    }
}

/// Item-weighted average of the generator terms over a whole dataset.
pub fn evaluate_generator(
    model: &DnaModel,
    params: &DnaParams,
    data: &Dataset,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<(GeneratorTerms, f64)> {
    let projector = Projector::new(model.geometry())?;
    let mut acc = GeneratorTerms::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (real, sino) = data.batch(chunk)?;
        let out = model.forward(&params.generator, &sino)?;
        let f = chunk.len() as f64 / data.len() as f64;
        for (img, slot) in [(&out.g1, 0), (&out.g2, 1)] {
            let mse = mse_loss(img, &real)? * f;
            let s = ssim(img, &real, 1.0)? * f;
            let sl = sinogram_consistency(img, &sino, &projector)?.0 * f;
            let adv = adversarial_loss_g(&params.critic.forward(img)?) * f;
            if slot == 0 {
                acc.mse1 += mse;
                acc.ssim1 += s;
                acc.sino1 += sl;
                acc.adv1 += adv;
            } else {
                acc.mse2 += mse;
                acc.ssim2 += s;
                acc.sino2 += sl;
                acc.adv2 += adv;
            }
        }
    }
    Ok((acc, generator_objective(&acc, weights)))
}
