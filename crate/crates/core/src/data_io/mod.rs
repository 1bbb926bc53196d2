//! Phantoms, natural-image ingestion and on-disk formats.

mod dataset;
mod formats;
mod phantom;

pub use dataset::{
    build_dataset, check_image, corpus_hash, load_image, load_image_corpus, Dataset,
    DatasetManifest, ManifestEntry, Role,
};
pub use formats::{
    decode_pgm, decode_raw, encode_pgm, encode_raw, load_pgm, load_raw, load_raw_image,
    load_raw_sinogram, save_pgm, save_raw, save_raw_image, save_raw_sinogram, RawKind,
    RAW_IMAGE_MAGIC, RAW_SINOGRAM_MAGIC,
};
pub use phantom::{
    normalize_and_mask, render_phantom, resize_bilinear, Ellipse, EllipsePhantomSpec,
};
