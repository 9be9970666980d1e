use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use retina_core::analysis::{curves_csv, curves_svg, lattice_stats, rollout_csv, rollout_frame_svg, write_snapshot};
use retina_core::dataset::{generate as synthesize, load_dataset, load_mnist_idx, write_dataset, Dataset};
use retina_core::glimpse::init_lattice;
use retina_core::model::{unroll, ModelDims, ModelParams};
use retina_core::training::gradcheck::{run_gradcheck, Fault, GradcheckConfig};
use retina_core::training::{
    evaluate, load_checkpoint, save_checkpoint, train as run_training, Checkpoint, EpochRecord, MetricsLog,
    OptimizerState, TrainObserver,
};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FaultArg {
    Sigma,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = required(&cfg.out, "--out (dataset file to write)")?;
    let dataset_cfg = cfg.dataset_config();
    dataset_cfg.validate()?;
    let (images, labels) = dataset_cfg.source_split.file_names();
    let (images, labels) = (cfg.mnist_dir.join(images), cfg.mnist_dir.join(labels));
    let missing: Vec<String> = [&images, &labels]
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingMnist {
            dir: cfg.mnist_dir.display().to_string(),
            missing: missing.join(", "),
        });
    }
    if dataset_cfg.num_examples == 0 {
        eprintln!("warning: --n 0 writes an empty dataset");
    }
    let mnist = load_mnist_idx(&images, &labels)?;
    let examples = synthesize(&mnist, &dataset_cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_dataset(out, &dataset_cfg, &examples)?;
    println!(
        "wrote {} scenes (dataset variant {}, seed {}, split {}) to {}",
        examples.len(),
        dataset_cfg.variant.code(),
        dataset_cfg.seed,
        cfg.get("split").unwrap(),
        out.display()
    );
    println!("sha256 {}", sha256_file(out)?);
    Ok(())
}

struct RunObserver {
    out: PathBuf,
    snapshots: PathBuf,
    metrics: File,
    height: usize,
    width: usize,
    glimpses: usize,
    checkpoint_every: usize,
    config: retina_core::training::TrainConfig,
}

impl TrainObserver<f32> for RunObserver {
    fn on_snapshot(&mut self, step: u64, params: &ModelParams<f32>) -> retina_core::Result<()> {
        write_snapshot(&self.snapshots, &params.lattice, step, self.height, self.width)?;
        Ok(())
    }

    fn on_batch(&mut self, step: u64, loss: f64) {
        if step % 50 == 0 {
            eprintln!("step {step} loss {loss:.4}");
        }
    }

    fn on_epoch(
        &mut self,
        record: &EpochRecord,
        params: &ModelParams<f32>,
        opt: &OptimizerState<f32>,
    ) -> retina_core::Result<()> {
        let row = MetricsLog::csv_row(record, self.glimpses);
        let path = self.out.join("metrics.csv");
        writeln!(self.metrics, "{row}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| retina_core::Error::Io { path, source: e })?;
        let errors: Vec<String> = record.eval_error.iter().map(|e| format!("{e:.4}")).collect();
        println!(
            "epoch {} step {} train_loss {:.4} eval_error [{}] {:.0}s",
            record.epoch,
            record.step,
            record.train_loss,
            errors.join(", "),
            record.wall_seconds
        );
        if self.checkpoint_every > 0 && record.epoch % self.checkpoint_every == 0 {
            let ckpt = Checkpoint {
                params: params.clone(),
                opt: opt.clone(),
                config: self.config.clone(),
            };
            save_checkpoint(self.out.join(format!("epoch_{:03}.ckpt", record.epoch)), &ckpt)?;
        }
        Ok(())
    }
}

fn load_limited(path: &Path, limit: Option<usize>) -> Result<Dataset, CliError> {
    let data = load_dataset(path)?;
    Ok(match limit {
        Some(n) => data.truncated(n),
        None => data,
    })
}

pub fn train(mut cfg: RunConfig, resume: Option<&Path>, force: bool) -> Result<(), CliError> {
    let data_path = required(&cfg.data, "--data (training dataset file)")?.to_path_buf();
    let out = required(&cfg.out, "--out (run directory)")?.to_path_buf();
    cfg.train.validate()?;
    let train_set = load_limited(&data_path, cfg.train_limit)?;
    if train_set.is_empty() {
        return Err(CliError::Input(format!("{}: dataset is empty", data_path.display())));
    }
    let test_set = match &cfg.test_data {
        Some(p) => Some(load_limited(p, cfg.test_limit)?),
        None => None,
    };

    let (params, opt) = match resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            if cfg.is_explicit("model_variant") {
                ckpt = ckpt.expect_variant(cfg.train.variant, force)?;
            }
            let (epochs, snapshot_every) = (cfg.train.epochs, cfg.train.snapshot_every);
            let ignored: Vec<&str> = ["glimpses", "batch_size", "seed", "learning_rate", "lattice_lr_scale", "grad_clip"]
                .into_iter()
                .filter(|k| cfg.is_explicit(k))
                .collect();
            if !ignored.is_empty() {
                eprintln!(
                    "warning: resuming uses the checkpoint's training settings; ignoring {}",
                    ignored.join(", ")
                );
            }
            cfg.train = ckpt.config.clone();
            if cfg.is_explicit("epochs") {
                cfg.train.epochs = epochs;
            }
            if cfg.is_explicit("snapshot_every") {
                cfg.train.snapshot_every = snapshot_every;
            }
            println!("resuming from {} at step {}", path.display(), ckpt.opt.step);
            (ckpt.params, Some(ckpt.opt))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            rng.set_stream(u64::MAX);
            let span = (cfg.lattice_spacing * (cfg.grid_side.max(2) - 1) as f64) as f32;
            let lattice = init_lattice(cfg.grid_side, span, cfg.sigma0 as f32)?;
            let dims = ModelDims {
                kernels: lattice.len(),
                hidden: cfg.hidden,
                classes: ModelDims::FULL.classes,
            };
            let params = ModelParams::init(dims, cfg.train.variant, cfg.window, lattice, &mut rng)?;
            (params, None)
        }
    };

    create_dir(&out)?;
    let snapshots = out.join("snapshots");
    create_dir(&snapshots)?;
    write_text(&out.join("config.txt"), &cfg.render())?;
    let metrics_path = out.join("metrics.csv");
    let fresh_metrics = resume.is_none() || !metrics_path.is_file();
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_metrics)
        .truncate(fresh_metrics)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    if fresh_metrics {
        writeln!(metrics, "{}", MetricsLog::csv_header(cfg.train.glimpses)).map_err(|e| io_err(&metrics_path, e))?;
    }

    if opt.is_none() {
        let initial = Checkpoint {
            opt: OptimizerState::new(&params),
            params: params.clone(),
            config: cfg.train.clone(),
        };
        save_checkpoint(out.join("initial.ckpt"), &initial)?;
    }
    if cfg.train.epochs == 0 {
        println!("epochs = 0: wrote {}", out.join("initial.ckpt").display());
        return Ok(());
    }

    let (height, width) = train_set.dims();
    let mut observer = RunObserver {
        out: out.clone(),
        snapshots,
        metrics,
        height,
        width,
        glimpses: cfg.train.glimpses,
        checkpoint_every: cfg.checkpoint_every,
        config: cfg.train.clone(),
    };
    println!(
        "training {} on {} scenes ({} epochs, batch {}, {} glimpses)",
        cfg.train.variant,
        train_set.len(),
        cfg.train.epochs,
        cfg.train.batch_size,
        cfg.train.glimpses
    );
    let (params, opt, _log) = run_training(params, opt, &train_set, test_set.as_ref(), &cfg.train, &mut observer)?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(
        &final_path,
        &Checkpoint {
            params,
            opt,
            config: cfg.train.clone(),
        },
    )?;
    println!("final checkpoint {} sha256 {}", final_path.display(), sha256_file(&final_path)?);
    Ok(())
}

pub fn eval(
    ckpt_path: &Path,
    data_path: &Path,
    glimpses: Option<usize>,
    limit: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = load_limited(data_path, limit)?;
    let glimpses = glimpses.unwrap_or(ckpt.config.glimpses);
    let errors = evaluate(&ckpt.params, &data, glimpses)?;
    let mut csv = String::from("t,error\n");
    for (t, e) in errors.iter().enumerate() {
        csv.push_str(&format!("{},{e}\n", t + 1));
    }
    print!("{csv}");
    let headline = errors[glimpses - 1];
    println!(
        "headline error (t={glimpses}, {} scenes, variant {}): {:.2}%",
        data.len(),
        ckpt.variant(),
        headline * 100.0
    );
    if let Some(path) = out {
        write_text(path, &csv)?;
    }
    Ok(())
}

pub fn gradcheck(trials: usize, seed: u64, fault: Option<FaultArg>) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let config = GradcheckConfig {
        trials,
        seed,
        fault: match fault {
            Some(FaultArg::Sigma) => Fault::SigmaGradient,
            None => Fault::None,
        },
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&config);
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|b| b.block.as_str()).collect();
        Err(CliError::Verification(format!(
            "gradient check failed for: {}",
            if names.is_empty() { "frozen lattice".to_string() } else { names.join(", ") }
        )))
    }
}

pub fn curves(ckpt_path: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let stats = lattice_stats(&ckpt.params.lattice)?;
    create_dir(out)?;
    write_text(&out.join("curves.csv"), &curves_csv(&stats))?;
    let title = format!("{} lattice, step {}", ckpt.variant(), ckpt.opt.step);
    write_text(&out.join("curves.svg"), &curves_svg(&stats, &title))?;
    println!("rho(eccentricity, interval) = {:.4}", stats.rho_interval);
    println!("rho(eccentricity, sigma) = {:.4}", stats.rho_sigma);
    println!("wrote {} and {}", out.join("curves.csv").display(), out.join("curves.svg").display());
    Ok(())
}

fn parse_image_selector(s: &str) -> Result<usize, CliError> {
    s.strip_prefix("idx:")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| CliError::Usage(format!("invalid --image `{s}` (expected idx:N)")))
}

pub fn rollout(
    ckpt_path: &Path,
    data_path: &Path,
    image: &str,
    glimpses: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let index = parse_image_selector(image)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = load_dataset(data_path)?;
    let example = data.examples.get(index).ok_or_else(|| {
        CliError::Input(format!("{}: no scene {index} ({} scenes)", data_path.display(), data.len()))
    })?;
    let (height, width) = data.dims();
    let pixels = example.image::<f32>(height, width);
    let glimpses = glimpses.unwrap_or(ckpt.config.glimpses);
    if glimpses == 0 {
        return Err(CliError::Usage("--glimpses must be at least 1".into()));
    }
    let trace = unroll(&ckpt.params, pixels.view(), glimpses)?;
    create_dir(out)?;
    write_text(&out.join("rollout.csv"), &rollout_csv(&trace, example.label as usize)?)?;
    for (t, step) in trace.steps.iter().enumerate() {
        let caption = format!(
            "scene {index}, glimpse {} of {glimpses}, label {}, predicted {}",
            t + 1,
            example.label,
            step.predicted
        );
        let svg = rollout_frame_svg(pixels.view(), &ckpt.params.lattice, &step.control, &caption)?;
        write_text(&out.join(format!("frame_{:02}.svg", t + 1)), &svg)?;
    }
    println!(
        "scene {index}: label {}, predictions {:?}; wrote {} frames to {}",
        example.label,
        trace.steps.iter().map(|s| s.predicted).collect::<Vec<_>>(),
        trace.len(),
        out.display()
    );
    Ok(())
}
