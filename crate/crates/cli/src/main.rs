//! `rlat`: generate cluttered scenes, train and evaluate retinal-lattice
//! attention models, verify gradients and export lattice analyses.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_dataset_variant, parse_split, parse_variant, Preset, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "rlat", version, about = "Recurrent attention with a learnable retinal sampling lattice")]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Named settings applied before the config file.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Worker threads (falls back to RLAT_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a cluttered-MNIST dataset file.
    Generate(GenerateArgs),
    /// Train a model, writing checkpoints, metrics and lattice snapshots.
    Train(TrainArgs),
    /// Per-timestep classification error of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Export lattice statistics and attention rollouts.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

fn dataset_variant_arg(s: &str) -> Result<String, String> {
    parse_dataset_variant(s).map(|_| s.to_string())
}

fn split_arg(s: &str) -> Result<String, String> {
    parse_split(s).map(|_| s.to_string())
}

fn variant_arg(s: &str) -> Result<String, String> {
    parse_variant(s).map(|_| s.to_string())
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Scene family: 1 (fixed-size digits) or 2 (rescaled digits).
    #[arg(long, value_parser = dataset_variant_arg)]
    variant: Option<String>,
    /// Number of scenes [default: the MNIST split size, or the preset's].
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// MNIST split the digits are drawn from: train or test.
    #[arg(long, value_parser = split_arg)]
    split: Option<String>,
    #[arg(long)]
    distractors_min: Option<u8>,
    #[arg(long)]
    distractors_max: Option<u8>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// fixed, translate or translate-zoom.
    #[arg(long, value_parser = variant_arg)]
    variant: Option<String>,
    /// Training dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation dataset file, scored after every epoch.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    glimpses: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Learning-rate multiplier for lattice offsets and widths.
    #[arg(long)]
    lattice_lr_scale: Option<f64>,
    /// Global gradient-norm bound, or `none`.
    #[arg(long)]
    grad_clip: Option<String>,
    /// Lattice snapshot cadence in steps, or `auto` for every 5% of the run.
    #[arg(long)]
    snapshot_every: Option<String>,
    /// Epochs between periodic checkpoints.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Sampling window: `full` or a number of standard deviations.
    #[arg(long)]
    window: Option<String>,
    /// Hidden units per recurrent layer.
    #[arg(long)]
    hidden: Option<usize>,
    /// Kernels per lattice side.
    #[arg(long)]
    grid_side: Option<usize>,
    /// Use only the first N training scenes.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N evaluation scenes.
    #[arg(long)]
    test_limit: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a checkpoint whose variant differs from --variant.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Glimpses per episode [default: the checkpoint's].
    #[arg(long)]
    glimpses: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    /// CSV destination for the per-timestep errors.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt an analytic gradient on purpose.
    #[arg(long, value_enum, hide = true)]
    fault: Option<commands::FaultArg>,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Sampling interval and kernel width against eccentricity.
    Curves {
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-glimpse frames and control trace for one scene.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scene selector, `idx:N`.
        #[arg(long, default_value = "idx:0")]
        image: String,
        #[arg(long)]
        glimpses: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn overrides(pairs: &mut Vec<(&'static str, String)>, key: &'static str, value: Option<impl ToString>) {
    if let Some(v) = value {
        pairs.push((key, v.to_string()));
    }
}

fn path_string(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn build_config(cli: &Cli, flags: Vec<(&'static str, String)>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = cli.preset {
        cfg.apply_preset(p)?;
    }
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    if let Some(n) = cli.threads {
        cfg.set("threads", &n.to_string())?;
    } else if !cfg.is_explicit("threads") {
        if let Ok(v) = std::env::var("RLAT_THREADS") {
            cfg.set("threads", &v)
                .map_err(|_| CliError::Usage(format!("RLAT_THREADS must be a thread count, got `{v}`")))?;
        }
    }
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::Usage("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut flags = Vec::new();
    match &cli.command {
        Command::Generate(a) => {
            overrides(&mut flags, "dataset_variant", a.variant.as_ref());
            overrides(&mut flags, "n", a.n);
            overrides(&mut flags, "data_seed", a.seed);
            overrides(&mut flags, "split", a.split.as_ref());
            overrides(&mut flags, "distractors_min", a.distractors_min);
            overrides(&mut flags, "distractors_max", a.distractors_max);
            overrides(&mut flags, "mnist_dir", path_string(a.mnist_dir.clone()));
            overrides(&mut flags, "out", path_string(a.out.clone()));
            let cfg = build_config(&cli, flags)?;
            commands::generate(&cfg)
        }
        Command::Train(a) => {
            overrides(&mut flags, "model_variant", a.variant.as_ref());
            overrides(&mut flags, "data", path_string(a.data.clone()));
            overrides(&mut flags, "test_data", path_string(a.test_data.clone()));
            overrides(&mut flags, "glimpses", a.glimpses);
            overrides(&mut flags, "epochs", a.epochs);
            overrides(&mut flags, "batch_size", a.batch_size);
            overrides(&mut flags, "learning_rate", a.lr);
            overrides(&mut flags, "seed", a.seed);
            overrides(&mut flags, "lattice_lr_scale", a.lattice_lr_scale);
            overrides(&mut flags, "grad_clip", a.grad_clip.as_ref());
            overrides(&mut flags, "snapshot_every", a.snapshot_every.as_ref());
            overrides(&mut flags, "checkpoint_every", a.checkpoint_every);
            overrides(&mut flags, "window", a.window.as_ref());
            overrides(&mut flags, "hidden", a.hidden);
            overrides(&mut flags, "grid_side", a.grid_side);
            overrides(&mut flags, "train_limit", a.train_limit);
            overrides(&mut flags, "test_limit", a.test_limit);
            overrides(&mut flags, "out", path_string(a.out.clone()));
            let cfg = build_config(&cli, flags)?;
            commands::train(cfg, a.resume.as_deref(), a.force)
        }
        Command::Eval(a) => {
            build_config(&cli, flags)?;
            commands::eval(&a.ckpt, &a.data, a.glimpses, a.limit, a.out.as_deref())
        }
        Command::Gradcheck(a) => {
            build_config(&cli, flags)?;
            commands::gradcheck(a.trials, a.seed, a.fault)
        }
        Command::Analyze(AnalyzeCommand::Curves { ckpt, out }) => {
            build_config(&cli, flags)?;
            commands::curves(ckpt, out)
        }
        Command::Analyze(AnalyzeCommand::Rollout {
            ckpt,
            data,
            image,
            glimpses,
            out,
        }) => {
            build_config(&cli, flags)?;
            commands::rollout(ckpt, data, image, *glimpses, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
