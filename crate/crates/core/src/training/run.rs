//! Runs on disk: loss curves, checkpoints, the run manifest and the
//! pretrain / finetune schedule.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::trainer::{LossRow, Phase, TrainConfig, TrainState, Trainer, LOSS_CSV_HEADER};
use crate::data_io::Dataset;
use crate::error::{DnaError, Result};
use crate::geometry::GeometryConfig;
use crate::networks::checkpoint::{self, params_from_named, params_to_named};
use crate::networks::{DnaConfig, DnaParams};
use crate::tensor::{Real, Tensor};

pub const LOSSES_FILE: &str = "losses.csv";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.dna";

pub fn checkpoint_file(iteration: u64) -> String {
    format!("ckpt_{:06}.dna", iteration)
}

/// Parameters, both optimizer states and the iteration counter.
pub fn save_state(path: &Path, state: &TrainState, geo: &GeometryConfig) -> Result<()> {
    let mut named = params_to_named(&state.params, geo);
    state
        .gen_opt
        .export("adam.gen", &state.params.generator, &mut named);
    state
        .critic_opt
        .export("adam.critic", &state.params.critic, &mut named);
    named.insert(
        "meta.iteration".into(),
        Tensor::from_vec(&[1], vec![state.iteration as Real]).unwrap(),
    );
    checkpoint::save(path, &named)
}

/// Reads a [`save_state`] checkpoint. Plain parameter checkpoints load
/// with fresh optimizers at iteration 0.
pub fn load_state(path: &Path) -> Result<(TrainState, GeometryConfig)> {
    let named = checkpoint::load(path)?;
    let (params, geo) = params_from_named(&named)?;
    let mut state = TrainState::fresh(params);
    if let Some(it) = named.get("meta.iteration") {
        state.iteration = it.data()[0] as u64;
        state.gen_opt = AdamState::import("adam.gen", &state.params.generator, &named)?;
        state.critic_opt = AdamState::import("adam.critic", &state.params.critic, &named)?;
    }
    Ok((state, geo))
}

/// Where a run's parameters come from.
#[derive(Clone, Debug)]
pub enum Start {
    /// `DnaParams::init` seeded with the run seed.
    Fresh,
    /// Given parameters with fresh optimizers.
    Params(DnaParams),
    /// A [`save_state`] checkpoint; training continues from its iteration.
    Resume(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub corpus: String,
    pub corpus_hash: String,
    pub images: usize,
    pub start_iteration: u64,
    pub end_iteration: u64,
    pub losses: String,
    pub checkpoints: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub model: DnaConfig,
    pub phases: Vec<(TrainConfig, PhaseRecord)>,
    /// Front-end settings that produced this run, as `key = value` pairs.
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| DnaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DnaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub rows: Vec<LossRow>,
    pub record: PhaseRecord,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| DnaError::io(path, e))
}

/// Loss-curve lines already on disk for iterations before `upto`.
fn kept_lines(path: &Path, upto: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = io(path, std::fs::read_to_string(path))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|k| k.parse::<u64>().ok())
                .map_or(false, |k| k < upto)
        })
        .map(str::to_string)
        .collect())
}

/// Trains on `data` until `config.max_iterations` generator iterations
/// have run, writing `losses.csv`, periodic checkpoints and the manifest
/// into `out_dir`. A non-finite loss stops the run after dumping the
/// current state to `diagnostic.dna`.
pub fn train_loop(
    data: &Dataset,
    corpus: &str,
    dna: &DnaConfig,
    config: &TrainConfig,
    out_dir: &Path,
    start: Start,
) -> Result<TrainOutcome> {
    config.validate()?;
    io(out_dir, std::fs::create_dir_all(out_dir))?;
    let state = match start {
        Start::Fresh => TrainState::fresh(DnaParams::init(
            dna,
            &mut ChaCha8Rng::seed_from_u64(config.seed),
        )?),
        Start::Params(p) => TrainState::fresh(p),
        Start::Resume(path) => {
            let (state, geo) = load_state(&path)?;
            if geo != dna.geometry {
                return Err(DnaError::Config(format!(
                    "checkpoint {} has geometry {:?}, run expects {:?}",
                    path.display(),
                    geo,
                    dna.geometry
                )));
            }
            state
        }
    };
    let first = state.iteration;
    let mut trainer = Trainer::new(dna, config.clone(), data, state)?;

    let losses_path = out_dir.join(LOSSES_FILE);
    let mut lines = kept_lines(&losses_path, first)?;
    let mut record = PhaseRecord {
        phase: config.phase,
        corpus: corpus.to_string(),
        corpus_hash: data.hash(),
        images: data.len(),
        start_iteration: first,
        end_iteration: first,
        losses: LOSSES_FILE.into(),
        checkpoints: Vec::new(),
    };
    let checkpoint = |state: &TrainState, record: &mut PhaseRecord| -> Result<()> {
        let name = checkpoint_file(state.iteration);
        save_state(&out_dir.join(&name), state, &dna.geometry)?;
        record.checkpoints.push(name);
        Ok(())
    };
    checkpoint(&trainer.state, &mut record)?;

    let mut rows = Vec::new();
    let mut failure = None;
    while trainer.state.iteration < config.max_iterations {
        match trainer.step() {
            Ok(row) => {
                lines.push(row.csv());
                rows.push(row);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
        let k = trainer.state.iteration;
        if (config.checkpoint_every > 0 && k % config.checkpoint_every == 0)
            || k == config.max_iterations
        {
            checkpoint(&trainer.state, &mut record)?;
        }
    }
    record.end_iteration = trainer.state.iteration;

    let mut f = io(&losses_path, std::fs::File::create(&losses_path))?;
    let mut text = String::from(LOSS_CSV_HEADER);
    text.push('\n');
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    io(&losses_path, f.write_all(text.as_bytes()))?;

    if let Some(e) = failure {
        let path = out_dir.join(DIAGNOSTIC_FILE);
        save_state(&path, &trainer.state, &dna.geometry)?;
        log::error!(
            "training stopped at iteration {}: {}; state dumped to {}",
            record.end_iteration,
            e,
            path.display()
        );
        return Err(e);
    }
    RunManifest {
        seed: config.seed,
        model: dna.clone(),
        phases: vec![(config.clone(), record.clone())],
        settings: BTreeMap::new(),
    }
    .save(&out_dir.join(MANIFEST_FILE))?;
    Ok(TrainOutcome {
        state: trainer.state,
        rows,
        record,
    })
}

/// Trains on the natural-image corpus for `pretrain_iterations` (skipped
/// when 0) into `out_dir/pretrain`, then resets both optimizers and
/// finetunes on the CT corpus into `out_dir`.
pub fn pretrain_then_finetune(
    natural: (&str, &Dataset),
    ct: (&str, &Dataset),
    dna: &DnaConfig,
    pretrain_iterations: u64,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if natural.1.is_empty() && pretrain_iterations > 0 {
        return Err(DnaError::Config("pretraining corpus is empty".into()));
    }
    let mut phases = Vec::new();
    let start = if pretrain_iterations > 0 {
        let pre_cfg = TrainConfig {
            max_iterations: pretrain_iterations,
            phase: Phase::Pretrain,
            ..config.clone()
        };
        let pre = train_loop(
            natural.1,
            natural.0,
            dna,
            &pre_cfg,
            &out_dir.join("pretrain"),
            Start::Fresh,
        )?;
        let mut rec = pre.record;
        rec.losses = format!("pretrain/{}", rec.losses);
        rec.checkpoints = rec
            .checkpoints
            .iter()
            .map(|c| format!("pretrain/{}", c))
            .collect();
        log::info!(
            "pretraining done after {} iterations; switching to {}",
            rec.end_iteration,
            ct.0
        );
        phases.push((pre_cfg, rec));
        Start::Params(pre.state.params)
    } else {
        Start::Fresh
    };
    let fine_cfg = TrainConfig {
        phase: Phase::Finetune,
        ..config.clone()
    };
    let fine = train_loop(ct.1, ct.0, dna, &fine_cfg, out_dir, start)?;
    phases.push((fine_cfg, fine.record.clone()));
    RunManifest {
        seed: config.seed,
        model: dna.clone(),
        phases,
        settings: BTreeMap::new(),
    }
    .save(&out_dir.join(MANIFEST_FILE))?;
    Ok(fine)
}
