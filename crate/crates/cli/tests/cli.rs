mod common;

use std::fs;

use common::*;
use retina_core::training::load_checkpoint;

fn train_tiny(dir: &std::path::Path, data: &std::path::Path, out: &str, extra: &[&str]) -> std::process::Output {
    let out = dir.join(out);
    let mut args = vec!["train", "--data", path_str(data), "--out", path_str(&out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn help_documents_every_subcommand() {
    for (sub, flag) in [
        ("generate", "--mnist-dir"),
        ("train", "--lattice-lr-scale"),
        ("eval", "--ckpt"),
        ("gradcheck", "--trials"),
        ("analyze", "rollout"),
    ] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub} --help");
        assert!(stdout(&o).contains(flag), "{sub} --help lacks {flag}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["generate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_variant_lists_the_valid_ones() {
    let o = run(&["train", "--variant", "zoom", "--data", "x.bin"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for v in ["fixed", "translate", "translate-zoom"] {
        assert!(err.contains(v), "{err}");
    }
}

#[test]
fn missing_mnist_gives_download_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "generate",
        "--mnist-dir",
        path_str(dir.path()),
        "--n",
        "3",
        "--out",
        path_str(&dir.path().join("d.bin")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
    assert!(err.contains("Download"), "{err}");
}

#[test]
fn generate_is_deterministic_and_warns_on_empty() {
    let dir = tempfile::tempdir().unwrap();
    let a = fake_dataset(dir.path(), "a.bin", "2", 12, 7);
    let b = fake_dataset(dir.path(), "b.bin", "2", 12, 7);
    let c = fake_dataset(dir.path(), "c.bin", "2", 12, 8);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let empty = dir.path().join("empty.bin");
    let o = run(&[
        "generate",
        "--n",
        "0",
        "--mnist-dir",
        path_str(&dir.path().join("mnist")),
        "--out",
        path_str(&empty),
    ]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
    assert!(retina_core::dataset::load_dataset(&empty).unwrap().is_empty());
}

#[test]
fn config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    fake_dataset(dir.path(), "unused.bin", "1", 1, 0);
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "n = 5\ndata_seed = 3\nmnist_dir = mnist\nout = from_file.bin\n").unwrap();
    let o = run(&["generate", "--config", path_str(&cfg), "--n", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = retina_core::dataset::load_dataset(dir.path().join("from_file.bin")).unwrap();
    assert_eq!(d.len(), 4);
    assert_eq!(d.config.seed, 3);

    fs::write(&cfg, "n = 5\nnumber = 2\n").unwrap();
    let o = run(&["generate", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key `number`"));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = fake_dataset(dir.path(), "d1.bin", "1", 8, 1);
    let o = train_tiny(dir.path(), &data, "run", &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = dir.path().join("run");
    assert!(run_dir.join("initial.ckpt").is_file());
    assert!(!run_dir.join("final.ckpt").exists());
    let ckpt = load_checkpoint(run_dir.join("initial.ckpt")).unwrap();
    assert_eq!(ckpt.opt.step, 0);
    assert_eq!(ckpt.params.lattice.len(), 9);
}

fn metrics_without_wall_time(path: &std::path::Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = fake_dataset(dir.path(), "d1.bin", "1", 24, 1);
    let common = ["--epochs", "3", "--checkpoint-every", "1", "--variant", "translate-zoom", "--seed", "5"];
    let o = train_tiny(dir.path(), &data, "full", &common);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = train_tiny(dir.path(), &data, "part", &["--epochs", "1", "--variant", "translate-zoom", "--seed", "5", "--checkpoint-every", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let part = dir.path().join("part");
    let resume = part.join("epoch_001.ckpt");
    let o = train_tiny(
        dir.path(),
        &data,
        "part",
        &["--epochs", "3", "--checkpoint-every", "1", "--resume", path_str(&resume)],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let full = dir.path().join("full");
    assert_eq!(
        fs::read(full.join("final.ckpt")).unwrap(),
        fs::read(part.join("final.ckpt")).unwrap()
    );
    assert_eq!(
        metrics_without_wall_time(&full.join("metrics.csv")),
        metrics_without_wall_time(&part.join("metrics.csv"))
    );
}

#[test]
fn resume_refuses_a_different_variant_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let data = fake_dataset(dir.path(), "d1.bin", "1", 8, 1);
    let o = train_tiny(dir.path(), &data, "run", &["--epochs", "0", "--variant", "fixed"]);
    assert!(o.status.success());
    let ckpt = dir.path().join("run/initial.ckpt");
    let resume = ["--epochs", "1", "--variant", "translate-zoom", "--resume", path_str(&ckpt)];
    let o = train_tiny(dir.path(), &data, "again", &resume);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("variant mismatch"), "{}", stderr(&o));

    let mut forced = resume.to_vec();
    forced.push("--force");
    let o = train_tiny(dir.path(), &data, "again", &forced);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn fixed_lattice_training_leaves_the_lattice_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = fake_dataset(dir.path(), "d1.bin", "1", 16, 1);
    let o = train_tiny(dir.path(), &data, "run", &["--epochs", "2", "--variant", "fixed"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let initial = load_checkpoint(dir.path().join("run/initial.ckpt")).unwrap();
    let last = load_checkpoint(dir.path().join("run/final.ckpt")).unwrap();
    assert_eq!(initial.params.lattice, last.params.lattice);
    assert_ne!(initial.params.w_in, last.params.w_in);
}

#[test]
fn eval_prints_what_it_writes() {
    let dir = tempfile::tempdir().unwrap();
    let data = fake_dataset(dir.path(), "d1.bin", "1", 20, 1);
    let o = train_tiny(dir.path(), &data, "run", &["--epochs", "1"]);
    assert!(o.status.success());
    let csv = dir.path().join("eval.csv");
    let o = run(&[
        "eval",
        "--ckpt",
        path_str(&dir.path().join("run/final.ckpt")),
        "--data",
        path_str(&data),
        "--out",
        path_str(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = fs::read_to_string(&csv).unwrap();
    assert!(stdout(&o).starts_with(&written));
    assert_eq!(written.lines().count(), 5);
    assert!(stdout(&o).contains("headline error (t=4"));
}

#[test]
fn gradcheck_passes_and_names_a_broken_sigma_gradient() {
    let o = run(&["gradcheck", "--trials", "3", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let again = run(&["gradcheck", "--trials", "3", "--seed", "3"]);
    assert_eq!(stdout(&o), stdout(&again));

    let o = run(&["gradcheck", "--trials", "3", "--fault", "sigma"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("log_sigma"), "{}", stderr(&o));
}

#[test]
fn analyze_writes_curves_and_rollouts() {
    let dir = tempfile::tempdir().unwrap();
    let data = fake_dataset(dir.path(), "d2.bin", "2", 6, 4);
    let o = train_tiny(dir.path(), &data, "run", &["--epochs", "1", "--variant", "translate"]);
    assert!(o.status.success());
    let ckpt = dir.path().join("run/final.ckpt");

    let curves = dir.path().join("curves");
    let o = run(&["analyze", "curves", "--ckpt", path_str(&ckpt), "--out", path_str(&curves)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rho(eccentricity, interval)"));
    assert_eq!(fs::read_to_string(curves.join("curves.csv")).unwrap().lines().count(), 10);
    assert!(fs::read_to_string(curves.join("curves.svg")).unwrap().contains("rho(ecc, sigma)"));

    let roll = dir.path().join("roll");
    let o = run(&[
        "analyze",
        "rollout",
        "--ckpt",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--image",
        "idx:5",
        "--out",
        path_str(&roll),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(roll.join("rollout.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(3), Some("1"), "translate-only zoom must be 1: {line}");
    }
    for t in 1..=4 {
        assert!(roll.join(format!("frame_{t:02}.svg")).is_file());
    }

    let o = run(&["analyze", "rollout", "--ckpt", path_str(&ckpt), "--data", path_str(&data), "--image", "idx:6", "--out", path_str(&roll)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn nonexistent_checkpoint_is_a_clean_input_error() {
    let o = run(&["analyze", "curves", "--ckpt", "/nonexistent/final.ckpt", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: /nonexistent/final.ckpt"), "{}", stderr(&o));
}

#[test]
fn snapshots_cover_start_and_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = fake_dataset(dir.path(), "d1.bin", "1", 16, 1);
    let o = train_tiny(dir.path(), &data, "run", &["--epochs", "2", "--snapshot-every", "3"]);
    assert!(o.status.success());
    let mut names: Vec<String> = fs::read_dir(dir.path().join("run/snapshots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    assert_eq!(names, ["lattice_000000.csv", "lattice_000003.csv", "lattice_000004.csv"]);
}
