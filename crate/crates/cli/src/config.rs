//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then an optional preset, then a
//! config file, then command-line flags. Every layer goes through
//! [`RunConfig::set`], so the file format and the flags accept the same
//! spellings.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use retina_core::dataset::{DatasetConfig, DatasetVariant, Split};
use retina_core::training::TrainConfig;
use retina_core::{Variant, Window};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 10k train / 2k test scenes, 10 epochs, snapshots every 500 steps.
    Desk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_variant: DatasetVariant,
    /// `None` takes the split's default size.
    pub n: Option<u32>,
    pub data_seed: u64,
    pub split: Split,
    pub distractors: (u8, u8),
    pub mnist_dir: PathBuf,

    pub train: TrainConfig,
    pub window: Window,
    pub hidden: usize,
    pub grid_side: usize,
    pub lattice_spacing: f64,
    pub sigma0: f64,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Write `epoch_NNN.ckpt` every this many epochs.
    pub checkpoint_every: usize,

    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,

    pub preset: Option<Preset>,
    /// Keys set by a preset, file or flag rather than left at the default.
    explicit: BTreeSet<String>,
}

pub const KEYS: &[&str] = &[
    "dataset_variant",
    "n",
    "data_seed",
    "split",
    "distractors_min",
    "distractors_max",
    "mnist_dir",
    "model_variant",
    "glimpses",
    "batch_size",
    "epochs",
    "seed",
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "grad_clip",
    "lattice_lr_scale",
    "snapshot_every",
    "window",
    "hidden",
    "grid_side",
    "lattice_spacing",
    "sigma0",
    "train_limit",
    "test_limit",
    "checkpoint_every",
    "data",
    "test_data",
    "out",
    "threads",
];

const PATH_KEYS: &[&str] = &["mnist_dir", "data", "test_data", "out"];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_variant: DatasetVariant::Fixed,
            n: None,
            data_seed: 0,
            split: Split::Train,
            distractors: (0, 20),
            mnist_dir: PathBuf::from("data/mnist"),
            train: TrainConfig::default(),
            window: Window::Full,
            hidden: 512,
            grid_side: 12,
            lattice_spacing: 4.0,
            sigma0: 2.0,
            train_limit: None,
            test_limit: None,
            checkpoint_every: 10,
            data: None,
            test_data: None,
            out: None,
            threads: None,
            preset: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, CliError> {
    if value == "none" || value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

pub fn parse_dataset_variant(s: &str) -> Result<DatasetVariant, String> {
    match s {
        "1" => Ok(DatasetVariant::Fixed),
        "2" => Ok(DatasetVariant::VariableSize),
        _ => Err(format!("unknown dataset variant `{s}` (expected 1 or 2)")),
    }
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train or test)")),
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

impl RunConfig {
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn apply_preset(&mut self, preset: Preset) -> Result<(), CliError> {
        self.preset = Some(preset);
        match preset {
            Preset::Desk => {
                for (k, v) in [
                    ("epochs", "10"),
                    ("snapshot_every", "500"),
                    ("train_limit", "10000"),
                    ("test_limit", "2000"),
                ] {
                    self.set(k, v)?;
                }
            }
        }
        Ok(())
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected `key = value`", path.display(), lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let value = if PATH_KEYS.contains(&key) && Path::new(value).is_relative() {
                base.join(value).to_string_lossy().into_owned()
            } else {
                value.to_string()
            };
            self.set(key, &value)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "dataset_variant" => {
                self.dataset_variant = parse_dataset_variant(value).map_err(CliError::Usage)?
            }
            "n" => self.n = parse_opt(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "split" => self.split = parse_split(value).map_err(CliError::Usage)?,
            "distractors_min" => self.distractors.0 = parse(key, value)?,
            "distractors_max" => self.distractors.1 = parse(key, value)?,
            "mnist_dir" => self.mnist_dir = PathBuf::from(value),
            "model_variant" => t.variant = parse_variant(value).map_err(CliError::Usage)?,
            "glimpses" => t.glimpses = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse_opt(key, value)?,
            "lattice_lr_scale" => t.lattice_lr_scale = parse(key, value)?,
            "snapshot_every" => t.snapshot_every = parse_opt(key, value)?,
            "window" => {
                self.window = match value {
                    "full" => Window::Full,
                    _ => Window::Sigmas(parse(key, value)?),
                }
            }
            "hidden" => self.hidden = parse(key, value)?,
            "grid_side" => self.grid_side = parse(key, value)?,
            "lattice_spacing" => self.lattice_spacing = parse(key, value)?,
            "sigma0" => self.sigma0 = parse(key, value)?,
            "train_limit" => self.train_limit = parse_opt(key, value)?,
            "test_limit" => self.test_limit = parse_opt(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "test_data" => self.test_data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "threads" => self.threads = parse_opt(key, value)?,
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown config key `{key}` (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Number of scenes `generate` writes.
    pub fn example_count(&self) -> u32 {
        self.n.unwrap_or(match (self.preset, self.split) {
            (Some(Preset::Desk), Split::Train) => 10_000,
            (Some(Preset::Desk), Split::Test) => 2_000,
            (None, Split::Train) => 60_000,
            (None, Split::Test) => 10_000,
        })
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let mut c = DatasetConfig::new(self.dataset_variant, self.example_count(), self.data_seed);
        c.distractors = self.distractors;
        c.source_split = self.split;
        c
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string())
        };
        Some(match key {
            "dataset_variant" => self.dataset_variant.code().to_string(),
            "n" => self.n.map_or_else(|| "auto".to_string(), |n| n.to_string()),
            "data_seed" => self.data_seed.to_string(),
            "split" => split_name(self.split).to_string(),
            "distractors_min" => self.distractors.0.to_string(),
            "distractors_max" => self.distractors.1.to_string(),
            "mnist_dir" => self.mnist_dir.display().to_string(),
            "model_variant" => t.variant.to_string(),
            "glimpses" => t.glimpses.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "grad_clip" => opt_str(&t.grad_clip),
            "lattice_lr_scale" => t.lattice_lr_scale.to_string(),
            "snapshot_every" => opt_str(&t.snapshot_every),
            "window" => match self.window {
                Window::Full => "full".to_string(),
                Window::Sigmas(n) => n.to_string(),
            },
            "hidden" => self.hidden.to_string(),
            "grid_side" => self.grid_side.to_string(),
            "lattice_spacing" => self.lattice_spacing.to_string(),
            "sigma0" => self.sigma0.to_string(),
            "train_limit" => opt_str(&self.train_limit),
            "test_limit" => opt_str(&self.test_limit),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "data" => path(&self.data),
            "test_data" => path(&self.test_data),
            "out" => path(&self.out),
            "threads" => self.threads.map_or_else(|| "auto".to_string(), |n| n.to_string()),
            _ => return None,
        })
    }

    /// Every key, in a form [`RunConfig::apply_file`] reads back.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("known key");
            if value == "none" && PATH_KEYS.contains(key) {
                out.push_str(&format!("# {key} =\n"));
            } else {
                out.push_str(&format!("{key} = {value}\n"));
            }
        }
        out
    }
}
