use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DatasetConfig, DatasetVariant, Example, MnistSet};
use crate::error::{Error, Result};

/// Side length of the square digit fragments used as clutter.
pub const DISTRACTOR_PATCH: usize = 8;

const SCALE_RETRIES: usize = 16;
const DISTRACTOR_SOURCE_RETRIES: usize = 1024;

/// A generated scene plus the generator's bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub example: Example,
    pub source_index: usize,
    pub distractors: usize,
    /// Top-left `(x, y)` of the target digit on the canvas.
    pub target_origin: (usize, usize),
    /// Side length of the (square) target digit after rescaling.
    pub target_size: usize,
}

/// Bilinear resize of a square `src` to `size x size`, sampling at pixel centers.
pub fn resize_bilinear(src: &Array2<f32>, size: usize) -> Array2<f32> {
    let (rows, cols) = src.dim();
    let sy = rows as f32 / size as f32;
    let sx = cols as f32 / size as f32;
    Array2::from_shape_fn((size, size), |(i, j)| {
        let y = ((i as f32 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f32);
        let x = ((j as f32 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f32);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let x1 = (x0 + 1).min(cols - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn substream(seed: u64, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Deterministic scene `index` of the dataset described by `config`.
///
/// Every scene draws from its own counted ChaCha substream, so scenes can
/// be produced in any order or in parallel.
pub fn synthesize_scene(mnist: &MnistSet, config: &DatasetConfig, index: u32) -> Result<Scene> {
    config.validate()?;
    if index >= config.num_examples {
        return Err(Error::invalid(format!(
            "example index {index} out of range for {} examples",
            config.num_examples
        )));
    }
    if mnist.is_empty() {
        return Err(Error::invalid("MNIST source is empty"));
    }
    if mnist.rows < DISTRACTOR_PATCH || mnist.cols < DISTRACTOR_PATCH {
        return Err(Error::invalid("MNIST digits smaller than the distractor patch"));
    }
    let height = config.height as usize;
    let width = config.width as usize;
    let mut rng = substream(config.seed, index);

    let source_index = rng.random_range(0..mnist.len());
    let label = mnist.labels[source_index];
    let digit = mnist.image::<f32>(source_index);

    let target = match config.variant {
        DatasetVariant::Fixed => digit,
        DatasetVariant::VariableSize => {
            let (lo, hi) = config.scale;
            let mut size = None;
            for _ in 0..SCALE_RETRIES {
                let factor: f32 = if lo < hi { rng.random_range(lo..=hi) } else { lo };
                let s = ((mnist.rows as f32 * factor).round() as usize).max(1);
                if s <= height.min(width) {
                    size = Some(s);
                    break;
                }
            }
            let size = size.ok_or_else(|| {
                Error::invalid(format!(
                    "no digit scale in {lo}..={hi} fits a {height}x{width} canvas after {SCALE_RETRIES} draws"
                ))
            })?;
            if size == mnist.rows {
                digit
            } else {
                resize_bilinear(&digit, size)
            }
        }
    };
    let (th, tw) = target.dim();
    if th > height || tw > width {
        return Err(Error::invalid("target digit larger than the canvas"));
    }
    let tx = rng.random_range(0..=width - tw);
    let ty = rng.random_range(0..=height - th);

    let mut canvas = vec![0f32; height * width];
    let (dlo, dhi) = config.distractors;
    let distractors = rng.random_range(dlo as usize..=dhi as usize);
    for _ in 0..distractors {
        let mut src = None;
        for _ in 0..DISTRACTOR_SOURCE_RETRIES {
            let j = rng.random_range(0..mnist.len());
            if mnist.labels[j] != label {
                src = Some(j);
                break;
            }
        }
        let Some(src) = src else {
            return Err(Error::invalid("MNIST source has no digits of another class"));
        };
        let raw = mnist.raw(src);
        let oy = rng.random_range(0..=mnist.rows - DISTRACTOR_PATCH);
        let ox = rng.random_range(0..=mnist.cols - DISTRACTOR_PATCH);
        // patch center is uniform over the canvas; edges are clipped
        let half = (DISTRACTOR_PATCH / 2) as isize;
        let py = rng.random_range(0..height) as isize - half;
        let px = rng.random_range(0..width) as isize - half;
        for r in 0..DISTRACTOR_PATCH {
            let y = py + r as isize;
            if y < 0 || y >= height as isize {
                continue;
            }
            for c in 0..DISTRACTOR_PATCH {
                let x = px + c as isize;
                if x < 0 || x >= width as isize {
                    continue;
                }
                let v = raw[(oy + r) * mnist.cols + ox + c] as f32 / 255.0;
                let cell = &mut canvas[y as usize * width + x as usize];
                *cell = cell.max(v);
            }
        }
    }
    for r in 0..th {
        for c in 0..tw {
            let cell = &mut canvas[(ty + r) * width + tx + c];
            *cell = cell.max(target[[r, c]]);
        }
    }
    let pixels = canvas
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();

    Ok(Scene {
        example: Example {
            pixels,
            label,
            index,
        },
        source_index,
        distractors,
        target_origin: (tx, ty),
        target_size: th,
    })
}

pub fn synthesize_example(mnist: &MnistSet, config: &DatasetConfig, index: u32) -> Result<Example> {
    synthesize_scene(mnist, config, index).map(|s| s.example)
}

/// All `config.num_examples` scenes, generated in parallel on the current
/// rayon pool. Output order is the index order.
pub fn generate(mnist: &MnistSet, config: &DatasetConfig) -> Result<Vec<Example>> {
    config.validate()?;
    (0..config.num_examples)
        .into_par_iter()
        .map(|i| synthesize_example(mnist, config, i))
        .collect()
}
