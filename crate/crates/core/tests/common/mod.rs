#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retina_core::dataset::{generate, Dataset, DatasetConfig, DatasetVariant, MnistSet};
use retina_core::glimpse::init_lattice;
use retina_core::model::{ModelDims, ModelParams, Variant};
use retina_core::Window;

/// MNIST stand-in: each class is a bright bar at its own column with its
/// own length, plus a little per-image jitter.
pub fn fake_mnist(count: usize) -> MnistSet {
    let mut pixels = vec![0u8; count * 784];
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 10;
        labels.push(class as u8);
        let img = &mut pixels[i * 784..(i + 1) * 784];
        let col = 4 + 2 * class + (i / 10) % 2;
        for row in 4..(8 + 2 * class) {
            img[row * 28 + col] = 255;
            img[row * 28 + col + 1] = 180;
        }
    }
    MnistSet {
        rows: 28,
        cols: 28,
        pixels,
        labels,
    }
}

pub fn fake_dataset(variant: DatasetVariant, n: u32, seed: u64) -> Dataset {
    let config = DatasetConfig::new(variant, n, seed);
    let examples = generate(&fake_mnist(200), &config).unwrap();
    Dataset { config, examples }
}

pub fn model(variant: Variant, grid_side: usize, hidden: usize, seed: u64) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 4.0 * (grid_side.max(2) - 1) as f32;
    let lattice = init_lattice(grid_side, span, 2.0).unwrap();
    let dims = ModelDims {
        kernels: grid_side * grid_side,
        hidden,
        classes: 10,
    };
    ModelParams::init(dims, variant, Window::Full, lattice, &mut rng).unwrap()
}
