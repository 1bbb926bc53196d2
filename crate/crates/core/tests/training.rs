use std::path::Path;

use dna_core::data_io::{render_phantom, Dataset, EllipsePhantomSpec};
use dna_core::geometry::GeometryConfig;
use dna_core::networks::{CriticConfig, DnaConfig, DnaModel, DnaParams};
use dna_core::params::Parameters;
use dna_core::training::*;
use dna_core::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn phantoms(count: usize, n: usize, views: usize, seed: u64) -> Dataset {
    let geo = GeometryConfig::new(n, views).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|i| render_phantom(&EllipsePhantomSpec::random(i as u64, &mut rng), n).unwrap())
        .collect();
    Dataset::from_images(
        (0..count).map(|i| format!("p{}", i)).collect(),
        images,
        &geo,
    )
    .unwrap()
}

fn tiny_model(geo: &GeometryConfig) -> DnaConfig {
    let mut cfg = DnaConfig::desk(geo.clone());
    cfg.branches = 2;
    cfg.unet_width = 4;
    cfg.unet_groups = 2;
    cfg.critic = CriticConfig::scaled(geo.image_size, 16);
    cfg
}

fn tiny_train(iterations: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        critic_updates_per_gen: 2,
        max_iterations: iterations,
        seed,
        checkpoint_every: 2,
        ..Default::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn snapshot(p: &dyn Parameters) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| {
        let mut c = t.clone();
        c.clear_grad();
        out.push((name.to_string(), c));
    });
    out
}

#[test]
fn zero_iterations_write_the_initial_checkpoint_only() {
    let data = phantoms(4, 32, 4, 0);
    let dna = tiny_model(&data.geometry);
    let dir = tempfile::tempdir().unwrap();
    let out = train_loop(
        &data,
        "phantoms",
        &dna,
        &tiny_train(0, 1),
        dir.path(),
        Start::Fresh,
    )
    .unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.record.checkpoints, vec![checkpoint_file(0)]);
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, vec!["ckpt_000000.dna", LOSSES_FILE, MANIFEST_FILE]);
    let csv = std::fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap();
    assert_eq!(csv, format!("{}\n", LOSS_CSV_HEADER));
}

#[test]
fn identical_runs_are_byte_identical() {
    let data = phantoms(5, 32, 4, 0);
    let dna = tiny_model(&data.geometry);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        train_loop(
            &data,
            "phantoms",
            &dna,
            &tiny_train(4, 3),
            d.path(),
            Start::Fresh,
        )
        .unwrap();
    }
    for f in [
        LOSSES_FILE,
        "ckpt_000002.dna",
        "ckpt_000004.dna",
        MANIFEST_FILE,
    ] {
        assert_eq!(
            read(&a.path().join(f)),
            read(&b.path().join(f)),
            "{} differs",
            f
        );
    }
    let csv = std::fs::read_to_string(a.path().join(LOSSES_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().next().unwrap(), LOSS_CSV_HEADER);
}

// checkpoints hold f32, so a 64-bit run cannot resume bit for bit
#[cfg(not(feature = "f64"))]
#[test]
fn resuming_reproduces_the_remaining_losses() {
    let data = phantoms(5, 32, 4, 0);
    let dna = tiny_model(&data.geometry);
    let full = tempfile::tempdir().unwrap();
    train_loop(
        &data,
        "phantoms",
        &dna,
        &tiny_train(4, 5),
        full.path(),
        Start::Fresh,
    )
    .unwrap();

    let part = tempfile::tempdir().unwrap();
    train_loop(
        &data,
        "phantoms",
        &dna,
        &tiny_train(2, 5),
        part.path(),
        Start::Fresh,
    )
    .unwrap();
    let resumed = train_loop(
        &data,
        "phantoms",
        &dna,
        &tiny_train(4, 5),
        part.path(),
        Start::Resume(part.path().join(checkpoint_file(2))),
    )
    .unwrap();
    assert_eq!(resumed.rows.first().unwrap().iteration, 2);
    assert_eq!(
        read(&full.path().join(LOSSES_FILE)),
        read(&part.path().join(LOSSES_FILE))
    );
    assert_eq!(
        read(&full.path().join(checkpoint_file(4))),
        read(&part.path().join(checkpoint_file(4)))
    );
}

#[test]
fn critic_and_generator_steps_touch_disjoint_parameters() {
    let data = phantoms(4, 32, 4, 1);
    let dna = tiny_model(&data.geometry);
    let params = DnaParams::init(&dna, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut tr = Trainer::new(&dna, tiny_train(1, 0), &data, TrainState::fresh(params)).unwrap();

    let gen0 = snapshot(&tr.state.params.generator);
    let critic0 = snapshot(&tr.state.params.critic);
    tr.critic_step(&[0, 1, 2], &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(snapshot(&tr.state.params.generator), gen0);
    assert_ne!(snapshot(&tr.state.params.critic), critic0);

    let critic1 = snapshot(&tr.state.params.critic);
    tr.generator_step(&[1, 2, 3]).unwrap();
    assert_eq!(snapshot(&tr.state.params.critic), critic1);
    // every generator tensor moves
    for ((name, before), (_, after)) in gen0.iter().zip(snapshot(&tr.state.params.generator)) {
        assert!(
            before.max_abs_diff(&after) > 0.0,
            "{} was not updated",
            name
        );
    }
}

#[test]
fn non_finite_loss_stops_with_a_diagnostic_dump() {
    let mut data = phantoms(4, 32, 4, 0);
    for s in &mut data.sinograms {
        s.data_mut()[5] = Real::NAN;
    }
    let dna = tiny_model(&data.geometry);
    let dir = tempfile::tempdir().unwrap();
    let err = train_loop(
        &data,
        "phantoms",
        &dna,
        &tiny_train(3, 0),
        dir.path(),
        Start::Fresh,
    )
    .err()
    .expect("training on NaN data must fail");
    assert!(matches!(err, dna_core::DnaError::NonFinite(_)), "{}", err);
    assert!(dir.path().join(DIAGNOSTIC_FILE).exists());
}

#[test]
fn zero_pretraining_is_plain_training() {
    let ct = phantoms(5, 32, 4, 0);
    let natural = phantoms(3, 32, 4, 9);
    let dna = tiny_model(&ct.geometry);
    let cfg = tiny_train(2, 4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_loop(&ct, "ct", &dna, &cfg, a.path(), Start::Fresh).unwrap();
    pretrain_then_finetune(("natural", &natural), ("ct", &ct), &dna, 0, &cfg, b.path()).unwrap();
    for f in [LOSSES_FILE, "ckpt_000002.dna"] {
        assert_eq!(
            read(&a.path().join(f)),
            read(&b.path().join(f)),
            "{} differs",
            f
        );
    }
    assert!(!b.path().join("pretrain").exists());
}

#[test]
fn pretraining_is_logged_and_resets_the_optimizers() {
    let ct = phantoms(5, 32, 4, 0);
    let natural = phantoms(3, 32, 4, 9);
    let dna = tiny_model(&ct.geometry);
    let dir = tempfile::tempdir().unwrap();
    pretrain_then_finetune(
        ("natural", &natural),
        ("ct", &ct),
        &dna,
        2,
        &tiny_train(1, 4),
        dir.path(),
    )
    .unwrap();
    let m = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.phases.len(), 2);
    let (pre, fine) = (&m.phases[0], &m.phases[1]);
    assert_eq!(
        (pre.0.phase, pre.1.corpus.as_str()),
        (Phase::Pretrain, "natural")
    );
    assert_eq!(
        (fine.0.phase, fine.1.corpus.as_str()),
        (Phase::Finetune, "ct")
    );
    assert_eq!(pre.1.corpus_hash, natural.hash());
    assert_eq!(pre.1.end_iteration, 2);

    let (pre_end, _) = load_state(&dir.path().join("pretrain").join(checkpoint_file(2))).unwrap();
    let (fine_start, _) = load_state(&dir.path().join(checkpoint_file(0))).unwrap();
    assert_eq!(pre_end.gen_opt.step, 2);
    assert_eq!(
        (fine_start.gen_opt.step, fine_start.critic_opt.step),
        (0, 0)
    );
    assert_eq!(fine_start.iteration, 0);
    // the finetune phase starts from the pretrained weights
    assert_eq!(snapshot(&fine_start.params), snapshot(&pre_end.params));
}

fn generator_mse(dna: &DnaConfig, params: &DnaParams, data: &Dataset) -> f64 {
    let model = DnaModel::new(dna).unwrap();
    let (t, _) = evaluate_generator(&model, params, data, &Default::default(), 10).unwrap();
    t.mse1 + t.mse2
}

#[test]
fn fifty_iterations_lower_the_generator_mse() {
    let data = phantoms(20, 32, 16, 11);
    let dna = DnaConfig::desk(data.geometry.clone());
    let mut gains = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig {
            max_iterations: 50,
            checkpoint_every: 0,
            seed,
            ..Default::default()
        };
        let start = DnaParams::init(&dna, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let before = generator_mse(&dna, &start, &data);
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(
            &data,
            "phantoms",
            &dna,
            &cfg,
            dir.path(),
            Start::Params(start),
        )
        .unwrap();
        gains.push(before - generator_mse(&dna, &out.state.params, &data));
    }
    gains.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(gains[1] > 0.0, "median MSE change {:?}", gains);
}
