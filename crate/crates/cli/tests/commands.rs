use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dna_core::data_io::{
    load_raw_image, load_raw_sinogram, render_phantom, save_raw_image, EllipsePhantomSpec,
};
use dna_core::geometry::GeometryConfig;
use dna_core::metrics::{psnr, MetricsReport};
use dna_core::networks::checkpoint::save_params;
use dna_core::networks::{DnaConfig, DnaParams};
use dna_core::training::RunManifest;
use dna_core::Tensor;

fn dna(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dna"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dna")
}

fn ok(args: &[&str]) {
    let o = dna(args);
    assert!(
        o.status.success(),
        "dna {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Exits nonzero and reports on stderr.
fn fails(args: &[&str]) -> String {
    let o = dna(args);
    assert!(!o.status.success(), "dna {:?} unexpectedly succeeded", args);
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(!err.trim().is_empty());
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn disk(n: usize) -> Tensor {
    render_phantom(&EllipsePhantomSpec::disk(0.6, 0.8), n).unwrap()
}

#[test]
fn phantom_counts_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, empty) = (
        t.path().join("a"),
        t.path().join("b"),
        t.path().join("empty"),
    );
    ok(&[
        "phantom",
        "--count",
        "0",
        "--size",
        "32",
        "--out-dir",
        s(&empty),
    ]);
    assert_eq!(listing(&empty), vec!["manifest.json"]);

    for d in [&a, &b] {
        ok(&[
            "phantom",
            "--count",
            "5",
            "--size",
            "32",
            "--seed",
            "3",
            "--out-dir",
            s(d),
        ]);
    }
    let files = listing(&a);
    assert_eq!(files.iter().filter(|f| f.ends_with(".raw")).count(), 5);
    assert_eq!(files.iter().filter(|f| f.ends_with(".pgm")).count(), 5);
    for f in &files {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{}",
            f
        );
    }
}

#[test]
fn phantom_reports_unwritable_paths() {
    let t = tempfile::tempdir().unwrap();
    let blocker = t.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = fails(&[
        "phantom",
        "--count",
        "1",
        "--out-dir",
        s(&blocker.join("sub")),
    ]);
    assert!(err.contains("file"), "{}", err);
}

#[test]
fn project_disk_and_zero_image() {
    let t = tempfile::tempdir().unwrap();
    let img = t.path().join("disk.raw");
    save_raw_image(&img, &disk(32)).unwrap();
    let out = t.path().join("disk.sin");
    ok(&["project", "--views", "8", "--in", s(&img), "--out", s(&out)]);
    let sino = load_raw_sinogram(&out).unwrap();
    assert_eq!(sino.shape(), &[1, 1, 8, 32]);
    // the rasterised rim is stair-stepped, so bins near the edge move with the angle
    let d = sino.data();
    let peak = d[..32].iter().fold(0.0f64, |m, &v| m.max(v as f64));
    let sum0: f64 = d[..32].iter().map(|&v| v as f64).sum();
    for r in 1..8 {
        let row = &d[r * 32..(r + 1) * 32];
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        assert!(
            (sum - sum0).abs() <= 0.01 * sum0,
            "row {} mass {} vs {}",
            r,
            sum,
            sum0
        );
        for (x, y) in row.iter().zip(&d[..32]) {
            assert!(((x - y) as f64).abs() <= 0.1 * peak, "row {} differs", r);
        }
    }

    let zero = t.path().join("zero.raw");
    save_raw_image(&zero, &Tensor::zeros(&[1, 1, 32, 32])).unwrap();
    ok(&[
        "project",
        "--views",
        "8",
        "--in",
        s(&zero),
        "--out",
        s(&out),
    ]);
    assert!(load_raw_sinogram(&out)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    fails(&[
        "project",
        "--views",
        "8",
        "--in",
        s(&t.path().join("missing.raw")),
        "--out",
        s(&out),
    ]);
}

#[test]
fn fbp_writes_raw_and_pgm_and_rejects_a_size_mismatch() {
    let t = tempfile::tempdir().unwrap();
    let img = t.path().join("disk.raw");
    save_raw_image(&img, &disk(32)).unwrap();
    let sino = t.path().join("disk.sin");
    ok(&[
        "project",
        "--views",
        "90",
        "--in",
        s(&img),
        "--out",
        s(&sino),
    ]);
    let out = t.path().join("rec.raw");
    ok(&["fbp", "--in", s(&sino), "--out", s(&out), "--size", "32"]);
    assert!(t.path().join("rec.pgm").exists());
    assert_eq!(load_raw_image(&out).unwrap().shape(), &[1, 1, 32, 32]);
    let err = fails(&["fbp", "--in", s(&sino), "--out", s(&out), "--size", "64"]);
    assert!(err.contains("--size 64"), "{}", err);
}

#[test]
fn project_then_fbp_round_trip_at_180_views() {
    let t = tempfile::tempdir().unwrap();
    let truth = disk(64);
    let img = t.path().join("disk.raw");
    save_raw_image(&img, &truth).unwrap();
    let (sino, out) = (t.path().join("disk.sin"), t.path().join("rec.raw"));
    ok(&[
        "project",
        "--views",
        "180",
        "--in",
        s(&img),
        "--out",
        s(&sino),
    ]);
    ok(&["fbp", "--in", s(&sino), "--out", s(&out)]);
    let p = psnr(&load_raw_image(&out).unwrap(), &truth, 1.0).unwrap();
    assert!(p >= 25.0, "round trip {:.2} dB", p);
}

fn identity_checkpoint(dir: &Path, n: usize, views: usize) -> PathBuf {
    let geo = GeometryConfig::new(n, views).unwrap();
    let cfg = DnaConfig::desk(geo.clone());
    let path = dir.join("identity.dna");
    save_params(&path, &DnaParams::identity(&cfg).unwrap(), &geo).unwrap();
    path
}

#[test]
fn reconstruct_identity_checkpoint_matches_fbp() {
    let t = tempfile::tempdir().unwrap();
    let img = t.path().join("disk.raw");
    save_raw_image(&img, &disk(32)).unwrap();
    let sino = t.path().join("disk.sin");
    ok(&[
        "project",
        "--views",
        "16",
        "--in",
        s(&img),
        "--out",
        s(&sino),
    ]);
    let ckpt = identity_checkpoint(t.path(), 32, 16);

    let outdir = t.path().join("rec");
    std::fs::create_dir(&outdir).unwrap();
    let out = outdir.join("g2.raw");
    ok(&[
        "reconstruct",
        "--checkpoint",
        s(&ckpt),
        "--in",
        s(&sino),
        "--out",
        s(&out),
        "--emit-intermediate",
    ]);
    assert_eq!(listing(&outdir), vec!["g2.raw", "g2_fbp.raw", "g2_g1.raw"]);

    let fbp = t.path().join("fbp.raw");
    ok(&["fbp", "--in", s(&sino), "--out", s(&fbp)]);
    let want = load_raw_image(&fbp).unwrap();
    for f in ["g2.raw", "g2_fbp.raw", "g2_g1.raw"] {
        assert_eq!(
            load_raw_image(&outdir.join(f)).unwrap().data(),
            want.data(),
            "{}",
            f
        );
    }

    let plain = t.path().join("plain.raw");
    ok(&[
        "reconstruct",
        "--checkpoint",
        s(&ckpt),
        "--in",
        s(&sino),
        "--out",
        s(&plain),
    ]);
    assert!(!t.path().join("plain_fbp.raw").exists());

    fails(&[
        "reconstruct",
        "--checkpoint",
        s(&t.path().join("nope.dna")),
        "--in",
        s(&sino),
        "--out",
        s(&plain),
    ]);
    let other = identity_checkpoint(&t.path().join("rec"), 32, 8);
    let err = fails(&[
        "reconstruct",
        "--checkpoint",
        s(&other),
        "--in",
        s(&sino),
        "--out",
        s(&plain),
    ]);
    assert!(err.contains("8 views"), "{}", err);
}

#[test]
fn eval_identical_offset_and_unmatched() {
    let t = tempfile::tempdir().unwrap();
    let (pred, truth) = (t.path().join("pred"), t.path().join("truth"));
    std::fs::create_dir(&pred).unwrap();
    std::fs::create_dir(&truth).unwrap();
    let img = disk(16);
    save_raw_image(&truth.join("a.raw"), &img).unwrap();
    save_raw_image(&pred.join("a.raw"), &img).unwrap();
    let mut shifted = img.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 0.1);
    save_raw_image(&truth.join("b.raw"), &img).unwrap();
    save_raw_image(&pred.join("b.raw"), &shifted).unwrap();

    let report = t.path().join("report.csv");
    ok(&[
        "eval",
        "--pred-dir",
        s(&pred),
        "--truth-dir",
        s(&truth),
        "--out",
        s(&report),
    ]);
    let r = MetricsReport::from_csv(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!((r.rows[0].ssim, r.rows[0].rmse), (1.0, 0.0));
    assert!(
        (r.rows[1].psnr_db - 20.0).abs() < 1e-3,
        "{}",
        r.rows[1].psnr_db
    );

    save_raw_image(&pred.join("c.raw"), &img).unwrap();
    let err = fails(&[
        "eval",
        "--pred-dir",
        s(&pred),
        "--truth-dir",
        s(&truth),
        "--out",
        s(&report),
    ]);
    assert!(err.contains("c.raw"), "{}", err);
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(
        &p,
        "# smoke configuration\nsize = 32\nviews = 4\nbranches = 2\nunet_width = 4\nunet_groups = 2\n\
         critic_scale = 16\nbatch_size = 3\ncritic_updates = 2\ncheckpoint_every = 2\n",
    )
    .unwrap();
    p
}

#[test]
fn train_zero_iterations_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&[
        "phantom",
        "--count",
        "6",
        "--size",
        "32",
        "--seed",
        "1",
        "--out-dir",
        s(&data),
    ]);
    let cfg = tiny_config(t.path());

    let zero = t.path().join("zero");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&zero),
        "--max-iterations",
        "0",
    ]);
    let files = listing(&zero);
    assert_eq!(
        files,
        vec![
            "ckpt_000000.dna",
            "effective_config.txt",
            "losses.csv",
            "run_manifest.json"
        ]
    );
    let eff = std::fs::read_to_string(zero.join("effective_config.txt")).unwrap();
    assert!(
        eff.contains("max_iterations = 0") && eff.contains("size = 32"),
        "{}",
        eff
    );
    let manifest = RunManifest::load(&zero.join("run_manifest.json")).unwrap();
    assert_eq!(manifest.settings.get("size").map(String::as_str), Some("32"));
    assert_eq!(manifest.settings.len(), eff.lines().count());

    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--data-dir",
            s(&data),
            "--out-dir",
            s(d),
            "--max-iterations",
            "2",
            "--set",
            "seed=5",
        ]);
    }
    for f in ["losses.csv", "ckpt_000002.dna", "run_manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{}",
            f
        );
    }
    let header = std::fs::read_to_string(a.join("losses.csv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "iteration,critic_loss,gen_total,mse1,mse2,ssim1,ssim2,sino1,sino2,adv1,adv2,gp"
    );
}

#[test]
fn train_rejects_bad_configuration() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&[
        "phantom",
        "--count",
        "3",
        "--size",
        "32",
        "--out-dir",
        s(&data),
    ]);
    let cfg = tiny_config(t.path());
    let out = s(&t.path().join("o")).to_string();
    let err = fails(&[
        "train",
        "--config",
        s(&cfg),
        "--data-dir",
        s(&data),
        "--out-dir",
        &out,
        "--set",
        "lerning_rate=1",
    ]);
    assert!(err.contains("lerning_rate"), "{}", err);
    let bad = t.path().join("bad.cfg");
    std::fs::write(&bad, "size = 32\nfoo = 1\n").unwrap();
    let err = fails(&[
        "train",
        "--config",
        s(&bad),
        "--data-dir",
        s(&data),
        "--out-dir",
        &out,
    ]);
    assert!(err.contains("foo"), "{}", err);
    // size 64 model against 32-pixel phantoms
    let err = fails(&[
        "train",
        "--data-dir",
        s(&data),
        "--out-dir",
        &out,
        "--max-iterations",
        "0",
    ]);
    assert!(err.contains("32"), "{}", err);
    fails(&[
        "train",
        "--config",
        s(&cfg),
        "--data-dir",
        s(&data),
        "--out-dir",
        &out,
        "--set",
        "pretrain_iterations=2",
    ]);
}
