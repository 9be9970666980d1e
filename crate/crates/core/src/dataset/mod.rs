//! MNIST ingestion and cluttered visual-search scenes.

mod file;
mod idx;
mod synth;

pub use file::{decode_dataset, encode_dataset, load_dataset, read_dataset, write_dataset, DatasetReader, DATASET_MAGIC};
pub use idx::{encode_idx_images, encode_idx_labels, load_mnist_idx, MnistSet, IMAGES_MAGIC, LABELS_MAGIC};
pub use synth::{generate, resize_bilinear, synthesize_example, synthesize_scene, Scene, DISTRACTOR_PATCH};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::real::Real;

/// Scene family: fixed-size digits, or digits rescaled per example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetVariant {
    Fixed,
    VariableSize,
}

impl DatasetVariant {
    pub fn code(self) -> u32 {
        match self {
            DatasetVariant::Fixed => 1,
            DatasetVariant::VariableSize => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DatasetVariant::Fixed),
            2 => Some(DatasetVariant::VariableSize),
            _ => None,
        }
    }

    pub fn default_scale(self) -> (f32, f32) {
        match self {
            DatasetVariant::Fixed => (1.0, 1.0),
            DatasetVariant::VariableSize => (0.33, 3.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Standard MNIST file names for this split.
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub variant: DatasetVariant,
    pub num_examples: u32,
    /// Inclusive distractor count range.
    pub distractors: (u8, u8),
    /// Inclusive digit rescale range.
    pub scale: (f32, f32),
    pub seed: u64,
    pub height: u16,
    pub width: u16,
    /// Not persisted in dataset files.
    pub source_split: Split,
}

impl DatasetConfig {
    /// 100x100 scenes with 0..=20 distractors and the variant's scale range.
    pub fn new(variant: DatasetVariant, num_examples: u32, seed: u64) -> Self {
        Self {
            variant,
            num_examples,
            distractors: (0, 20),
            scale: variant.default_scale(),
            seed,
            height: 100,
            width: 100,
            source_split: Split::Train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dlo, dhi) = self.distractors;
        if dlo > dhi || dhi > 20 {
            return Err(Error::invalid(format!(
                "distractor range {dlo}..={dhi} must lie within 0..=20"
            )));
        }
        let (slo, shi) = self.scale;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::invalid(format!("invalid scale range {slo}..={shi}")));
        }
        if self.variant == DatasetVariant::Fixed && (slo, shi) != (1.0, 1.0) {
            return Err(Error::invalid("fixed-size scenes require scale range 1..=1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        Ok(())
    }

    pub fn pixels_per_example(&self) -> usize {
        self.height as usize * self.width as usize
    }
}

/// One scene: 8-bit quantized pixels (`round(255 p)`) plus the target class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Row-major `height x width`.
    pub pixels: Vec<u8>,
    pub label: u8,
    /// Position within its dataset; with the dataset seed this names the
    /// generator substream that produced it.
    pub index: u32,
}

impl Example {
    /// Dequantized image with values in `[0, 1]`.
    pub fn image<F: Real>(&self, height: usize, width: usize) -> Array2<F> {
        let scale = F::one() / F::lit(255.0);
        Array2::from_shape_fn((height, width), |(n, m)| {
            F::lit(self.pixels[n * width + m] as f64) * scale
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.config.height as usize, self.config.width as usize)
    }

    /// First `n` examples (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Dataset {
        let mut config = self.config.clone();
        let examples: Vec<_> = self.examples.iter().take(n).cloned().collect();
        config.num_examples = examples.len() as u32;
        Dataset { config, examples }
    }
}
