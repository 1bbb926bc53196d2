//! The `dna` command: phantom simulation, projection, FBP, training,
//! reconstruction and evaluation.

pub mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use dna_core::backprojection::fbp_reconstruct;
use dna_core::data_io::{
    build_dataset, load_image_corpus, load_pgm, load_raw_image, load_raw_sinogram,
    normalize_and_mask, render_phantom, save_pgm, save_raw_image, save_raw_sinogram, Dataset,
    DatasetManifest, EllipsePhantomSpec, Role,
};
use dna_core::geometry::{radon_forward, GeometryConfig};
use dna_core::metrics::{MetricsReport, MetricsRow};
use dna_core::networks::checkpoint::load_params;
use dna_core::networks::{config_for, DnaModel};
use dna_core::training::{pretrain_then_finetune, train_loop, RunManifest, Start, MANIFEST_FILE};
use dna_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::TrainSettings;

pub const PHANTOM_MANIFEST: &str = "manifest.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";

#[derive(Debug, Parser)]
#[command(
    name = "dna",
    version,
    about = "Few-view CT reconstruction with a dual network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render random ellipse phantoms as RAW images, PGM previews and a manifest.
    Phantom(PhantomArgs),
    /// Simulate a parallel-beam sinogram from an image (or every image in a directory).
    Project(ProjectArgs),
    /// Filtered backprojection of a sinogram.
    Fbp(FbpArgs),
    /// Train, optionally pretraining on a natural-image corpus first.
    Train(TrainArgs),
    /// Run a trained checkpoint on a sinogram (or every sinogram in a directory).
    Reconstruct(ReconstructArgs),
    /// Compare predicted images against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// View count recorded in the manifest geometry.
    #[arg(long, default_value_t = 16)]
    pub views: usize,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub views: usize,
    /// Angular span in degrees.
    #[arg(long, default_value_t = 180.0)]
    pub span: f64,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FbpArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// RAW output; a PGM preview is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Expected image size; must match the sinogram's detector count.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 180.0)]
    pub span: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` file; see `config::KEYS`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding a phantom `manifest.json`, or PGM/RAW images.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Natural-image corpus for pretraining.
    #[arg(long)]
    pub pretrain_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long)]
    pub pretrain_iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue the finetune phase from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Further `KEY=VALUE` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the FBP and first-network images.
    #[arg(long)]
    pub emit_intermediate: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub truth_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a),
        Command::Project(a) => cmd_project(&a),
        Command::Fbp(a) => cmd_fbp(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// Sorted `*.raw` files of `dir`.
fn raw_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map_or(false, |e| e.eq_ignore_ascii_case("raw"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

pub fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let geo = GeometryConfig::new(a.size, a.views)?;
    create_dir(&a.out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut manifest = DatasetManifest::new(geo);
    for i in 0..a.count {
        let spec = EllipsePhantomSpec::random(i as u64, &mut rng);
        let img = render_phantom(&spec, a.size)?;
        let name = format!("phantom_{:04}", i);
        save_raw_image(&a.out_dir.join(format!("{}.raw", name)), &img)?;
        save_pgm(&a.out_dir.join(format!("{}.pgm", name)), &img)?;
        manifest.push(format!("{}.raw", name), Role::Train);
    }
    manifest.save(&a.out_dir.join(PHANTOM_MANIFEST))?;
    log::info!("wrote {} phantoms to {}", a.count, a.out_dir.display());
    Ok(())
}

/// RAW images are taken as they are; PGM images are normalised at their own size.
fn read_image(path: &Path) -> Result<Tensor> {
    let is_pgm = path
        .extension()
        .map_or(false, |e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let raw = load_pgm(path)?;
        ensure!(
            raw.dim(0) == raw.dim(1),
            "{}: image is {}x{}, expected square",
            path.display(),
            raw.dim(0),
            raw.dim(1)
        );
        Ok(normalize_and_mask(&raw, raw.dim(0))?)
    } else {
        Ok(load_raw_image(path)?)
    }
}

pub fn cmd_project(a: &ProjectArgs) -> Result<()> {
    let project = |input: &Path, out: &Path| -> Result<()> {
        let img = read_image(input)?;
        let (h, w) = (img.dim(2), img.dim(3));
        ensure!(
            h == w,
            "{}: image is {}x{}, expected square",
            input.display(),
            h,
            w
        );
        let geo = GeometryConfig::new(w, a.views)?.with_span(a.span.to_radians())?;
        let sino = radon_forward(&img, &geo)?;
        parent_dir(out)?;
        save_raw_sinogram(out, &sino)?;
        Ok(())
    };
    if a.input.is_dir() {
        create_dir(&a.out)?;
        for p in raw_files(&a.input)? {
            project(&p, &a.out.join(file_name(&p)))?;
        }
        Ok(())
    } else {
        project(&a.input, &a.out)
    }
}

pub fn cmd_fbp(a: &FbpArgs) -> Result<()> {
    let sino = load_raw_sinogram(&a.input)?;
    let (views, detectors) = (sino.dim(2), sino.dim(3));
    if let Some(n) = a.size {
        ensure!(
            n == detectors,
            "{} has {} detector bins, which does not match --size {}",
            a.input.display(),
            detectors,
            n
        );
    }
    let geo = GeometryConfig::new(detectors, views)?.with_span(a.span.to_radians())?;
    let img = fbp_reconstruct(&sino, &geo)?;
    parent_dir(&a.out)?;
    save_raw_image(&a.out, &img)?;
    save_pgm(&a.out.with_extension("pgm"), &img)?;
    Ok(())
}

/// A phantom directory with `manifest.json`, otherwise every image in it.
fn load_ct_corpus(dir: &Path, geo: &GeometryConfig) -> Result<Dataset> {
    let manifest_path = dir.join(PHANTOM_MANIFEST);
    if manifest_path.exists() {
        let mut m = DatasetManifest::load(&manifest_path)?;
        ensure!(
            m.geometry.image_size == geo.image_size,
            "{} holds {}x{} images but the run is configured for size {}",
            manifest_path.display(),
            m.geometry.image_size,
            m.geometry.image_size,
            geo.image_size
        );
        // sinograms follow the run's view count
        m.geometry = geo.clone();
        Ok(build_dataset(&m, dir, Role::Train)?)
    } else {
        let (ids, images) = load_image_corpus(dir, geo.image_size)?;
        ensure!(
            !ids.is_empty(),
            "{} holds no .pgm or .raw images",
            dir.display()
        );
        Ok(Dataset::from_images(ids, images, geo)?)
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut s = TrainSettings::default();
    if let Some(c) = &a.config {
        s.apply_file(c)?;
    }
    if let Some(k) = a.max_iterations {
        s.max_iterations = k;
    }
    if let Some(k) = a.pretrain_iterations {
        s.pretrain_iterations = k;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    s.apply_overrides(&a.overrides)?;

    let dna = s.model()?;
    let cfg = s.train();
    cfg.validate()?;
    create_dir(&a.out_dir)?;
    let effective = a.out_dir.join(EFFECTIVE_CONFIG_FILE);
    std::fs::write(&effective, s.to_text())
        .with_context(|| format!("writing {}", effective.display()))?;

    let ct = load_ct_corpus(&a.data_dir, &dna.geometry)
        .with_context(|| format!("loading {}", a.data_dir.display()))?;
    let ct_name = a.data_dir.display().to_string();
    log::info!("training on {} images from {}", ct.len(), ct_name);

    if let Some(ckpt) = &a.resume {
        train_loop(
            &ct,
            &ct_name,
            &dna,
            &cfg,
            &a.out_dir,
            Start::Resume(ckpt.clone()),
        )?;
        return record_settings(&a.out_dir, &s);
    }
    let (natural, natural_name) = match (&a.pretrain_dir, s.pretrain_iterations) {
        (Some(dir), k) if k > 0 => {
            let (ids, images) = load_image_corpus(dir, s.size)?;
            ensure!(
                !ids.is_empty(),
                "{} holds no .pgm or .raw images",
                dir.display()
            );
            (
                Dataset::from_images(ids, images, &dna.geometry)?,
                dir.display().to_string(),
            )
        }
        (None, k) if k > 0 => bail!("pretrain_iterations = {} needs --pretrain-dir", k),
        _ => (
            Dataset::from_images(Vec::new(), Vec::new(), &dna.geometry)?,
            String::new(),
        ),
    };
    pretrain_then_finetune(
        (&natural_name, &natural),
        (&ct_name, &ct),
        &dna,
        s.pretrain_iterations,
        &cfg,
        &a.out_dir,
    )?;
    record_settings(&a.out_dir, &s)
}

/// Copies the effective settings into the run manifest.
fn record_settings(out_dir: &Path, s: &TrainSettings) -> Result<()> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut m = RunManifest::load(&path)?;
    m.settings = s.pairs().into_iter().collect();
    m.save(&path)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(e) => format!("{}{}.{}", stem, suffix, e.to_string_lossy()),
        None => format!("{}{}", stem, suffix),
    };
    path.with_file_name(name)
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let (params, geo) = load_params(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let model = DnaModel::new(&config_for(&params, &geo)?)?;
    let run = |input: &Path, out: &Path, fbp: &Path, g1: &Path| -> Result<()> {
        let sino = load_raw_sinogram(input)?;
        ensure!(
            (sino.dim(2), sino.dim(3)) == (geo.num_views, geo.image_size),
            "{} is a {}x{} sinogram but the checkpoint expects {} views x {} bins",
            input.display(),
            sino.dim(2),
            sino.dim(3),
            geo.num_views,
            geo.image_size
        );
        let o = model.forward(&params.generator, &sino)?;
        save_raw_image(out, &o.g2)?;
        if a.emit_intermediate {
            save_raw_image(fbp, &o.fbp)?;
            save_raw_image(g1, &o.g1)?;
        }
        Ok(())
    };
    if a.input.is_dir() {
        create_dir(&a.out)?;
        if a.emit_intermediate {
            create_dir(&a.out.join("fbp"))?;
            create_dir(&a.out.join("g1"))?;
        }
        let files = raw_files(&a.input)?;
        ensure!(
            !files.is_empty(),
            "{} holds no .raw sinograms",
            a.input.display()
        );
        for p in files {
            let name = file_name(&p);
            run(
                &p,
                &a.out.join(&name),
                &a.out.join("fbp").join(&name),
                &a.out.join("g1").join(&name),
            )?;
        }
    } else {
        parent_dir(&a.out)?;
        run(
            &a.input,
            &a.out,
            &with_suffix(&a.out, "_fbp"),
            &with_suffix(&a.out, "_g1"),
        )?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = raw_files(&a.pred_dir)?;
    let truth = raw_files(&a.truth_dir)?;
    let names = |v: &[PathBuf]| v.iter().map(|p| file_name(p)).collect::<Vec<_>>();
    let (pn, tn) = (names(&pred), names(&truth));
    let only_pred: Vec<_> = pn.iter().filter(|n| !tn.contains(n)).cloned().collect();
    let only_truth: Vec<_> = tn.iter().filter(|n| !pn.contains(n)).cloned().collect();
    if !only_pred.is_empty() || !only_truth.is_empty() {
        bail!(
            "unmatched files; only in {}: [{}]; only in {}: [{}]",
            a.pred_dir.display(),
            only_pred.join(", "),
            a.truth_dir.display(),
            only_truth.join(", ")
        );
    }
    ensure!(
        !pn.is_empty(),
        "{} holds no .raw images",
        a.pred_dir.display()
    );
    let mut report = MetricsReport::default();
    for name in &pn {
        let p = load_raw_image(&a.pred_dir.join(name))?;
        let t = load_raw_image(&a.truth_dir.join(name))?;
        ensure!(
            p.shape() == t.shape(),
            "{}: shapes {:?} and {:?} differ",
            name,
            p.shape(),
            t.shape()
        );
        report.push(MetricsRow::compute(name, &p, &t)?);
    }
    parent_dir(&a.out)?;
    std::fs::write(&a.out, report.to_csv())
        .with_context(|| format!("writing {}", a.out.display()))?;
    let ((s, sd), (p, pd)) = (report.ssim(), report.psnr());
    log::info!(
        "{} images: ssim {:.4}±{:.4}, psnr {:.3}±{:.3} dB",
        pn.len(),
        s,
        sd,
        p,
        pd
    );
    Ok(())
}
