use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::formats::{load_pgm, load_raw_image};
use super::phantom::normalize_and_mask;
use crate::error::{DnaError, Result};
use crate::geometry::{circle_mask, GeometryConfig, Projector};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub geometry: GeometryConfig,
    /// How pixel values were brought into `[0, 1]`.
    pub normalization: String,
}

pub const PER_IMAGE_MINMAX: &str = "per-image min-max inside the circle mask";

impl DatasetManifest {
    pub fn new(geometry: GeometryConfig) -> Self {
        DatasetManifest {
            entries: Vec::new(),
            geometry,
            normalization: PER_IMAGE_MINMAX.into(),
        }
    }

    pub fn push(&mut self, path: impl Into<PathBuf>, role: Role) {
        self.entries.push(ManifestEntry {
            path: path.into(),
            role,
        });
    }

    /// Geometry is valid and no path is listed twice (so roles are disjoint).
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(DnaError::Config(format!(
                    "{} is listed more than once",
                    e.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| DnaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DnaError::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Checks the image invariants: `[1, 1, n, n]`, values in `[0, 1]`, zero
/// outside the circle.
pub fn check_image(img: &Tensor, n: usize) -> Result<()> {
    img.expect_shape("image", &[1, 1, n, n])?;
    img.check_finite("image")?;
    if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(DnaError::Config("image values must lie in [0, 1]".into()));
    }
    if &circle_mask(img) != img {
        return Err(DnaError::Config(
            "image is nonzero outside the circle mask".into(),
        ));
    }
    Ok(())
}

/// Reads an image file as an `n x n` tensor. PGM input goes through
/// [`normalize_and_mask`]; RAW input must already satisfy the image invariants.
pub fn load_image(path: &Path, n: usize) -> Result<Tensor> {
    let is_pgm = path
        .extension()
        .map_or(false, |e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        normalize_and_mask(&load_pgm(path)?, n)
    } else {
        let img = load_raw_image(path)?;
        check_image(&img, n).map_err(|e| DnaError::Config(format!("{}: {}", path.display(), e)))?;
        Ok(img)
    }
}

/// Images paired with their simulated sinograms.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub sinograms: Vec<Tensor>,
    pub geometry: GeometryConfig,
}

impl Dataset {
    pub fn from_images(
        ids: Vec<String>,
        images: Vec<Tensor>,
        geo: &GeometryConfig,
    ) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(DnaError::Config("one id per image is required".into()));
        }
        let projector = Projector::new(geo)?;
        let mut sinograms = Vec::with_capacity(images.len());
        for img in &images {
            check_image(img, geo.image_size)?;
            sinograms.push(projector.forward(img)?);
        }
        Ok(Dataset {
            ids,
            images,
            sinograms,
            geometry: geo.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Seeded permutation for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Stacks the listed items into image and sinogram batches.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &self.images[i]).collect();
        let sinos: Vec<&Tensor> = idx.iter().map(|&i| &self.sinograms[i]).collect();
        Ok((Tensor::concat_batch(&imgs)?, Tensor::concat_batch(&sinos)?))
    }

    /// SHA-256 over ids and image bytes, as lowercase hex.
    pub fn hash(&self) -> String {
        corpus_hash(&self.ids, &self.images)
    }
}

pub fn corpus_hash(ids: &[String], images: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for (id, img) in ids.iter().zip(images) {
        h.update(id.as_bytes());
        h.update([0u8]);
        for &v in img.data() {
            h.update((v as f32).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

/// Loads the manifest entries with the given role. Unreadable entries are
/// skipped with a warning; more than 10% skipped is an error.
pub fn build_dataset(manifest: &DatasetManifest, base: &Path, role: Role) -> Result<Dataset> {
    manifest.validate()?;
    let n = manifest.geometry.image_size;
    let (mut ids, mut images, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
    let entries: Vec<_> = manifest.entries.iter().filter(|e| e.role == role).collect();
    for e in &entries {
        let path = base.join(&e.path);
        match load_image(&path, n) {
            Ok(img) => {
                ids.push(e.path.to_string_lossy().into_owned());
                images.push(img);
            }
            Err(err) => {
                log::warn!("skipping {}: {}", path.display(), err);
                skipped.push(err);
            }
        }
    }
    if skipped.len() * 10 > entries.len() {
        return Err(DnaError::Config(format!(
            "{} of {} {:?} entries could not be read; first error: {}",
            skipped.len(),
            entries.len(),
            role,
            skipped[0]
        )));
    }
    Dataset::from_images(ids, images, &manifest.geometry)
}

/// Every `.pgm` or `.raw` file in `dir`, sorted by name and normalised to
/// `n x n`. RAW files must already satisfy the image invariants.
pub fn load_image_corpus(dir: &Path, n: usize) -> Result<(Vec<String>, Vec<Tensor>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DnaError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map_or(false, |e| {
                e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("raw")
            })
        })
        .collect();
    paths.sort();
    let mut ids = Vec::new();
    let mut images = Vec::new();
    for p in paths {
        images.push(load_image(&p, n)?);
        ids.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    Ok((ids, images))
}
