//! Shared fixtures for the benchmarks.

use ape_core::phantom::generate_phantom;
use ape_core::{EmbeddingMap, PhantomSpec, Volume};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn phantom_volume(seed: u64) -> Volume {
    generate_phantom(&PhantomSpec::default(), seed).expect("default spec is valid").volume
}

pub fn random_map(shape: [usize; 3], seed: u64) -> EmbeddingMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array4::from_shape_simple_fn((3, shape[0], shape[1], shape[2]), || rng.random::<f32>());
    EmbeddingMap::new(data, [2.0, 2.0, 3.0], [0.0; 3]).expect("3 channels")
}
