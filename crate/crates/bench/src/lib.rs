//! Fixed inputs for the benchmarks.

use dna_core::data_io::{render_phantom, EllipsePhantomSpec};
use dna_core::geometry::{radon_forward, GeometryConfig};
use dna_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A batch of random phantoms and their sinograms.
pub fn phantom_batch(
    n: usize,
    views: usize,
    batch: usize,
    seed: u64,
) -> (GeometryConfig, Tensor, Tensor) {
    let geo = GeometryConfig::new(n, views).expect("valid geometry");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<Tensor> = (0..batch)
        .map(|i| {
            render_phantom(&EllipsePhantomSpec::random(i as u64, &mut rng), n).expect("phantom")
        })
        .collect();
    let imgs = Tensor::concat_batch(&items.iter().collect::<Vec<_>>()).expect("same shapes");
    let sinos = radon_forward(&imgs, &geo).expect("projection");
    (geo, imgs, sinos)
}
