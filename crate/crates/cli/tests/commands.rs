use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cknet_core::checkpoint::Checkpoint;
use cknet_core::dataset::{self, Dataset};
use cknet_core::evalreport;
use cknet_core::koopman::{parse_spectrum_csv, C64};
use cknet_core::training::parse_log_csv;

fn cknet(args: &[&str]) -> (i32, String, String) {
    cknet_env(args, &[])
}

fn cknet_env(args: &[&str], env: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cknet"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("data_{seed}"));
    let (code, _, err) = cknet(&[
        "gen", "--system", "mountain_car", "--episodes", "3", "--steps", "12", "--policy", "sinusoid",
        "--seed", &seed.to_string(), "--out", s(&out), "--height", "8", "--width", "8", "--channels", "2",
    ]);
    assert_eq!(code, 0, "{err}");
    out
}

const TINY_CONFIG: &str = "\
latent_dim = 3
channels = 2
out_channels = 2
horizon_recon = 3
horizon_linear = 3
horizon_pred = 3
conv_channels = 2,2
hidden = 8
batch_size = 2
learning_rate = 1e-3
rank_interval = 2
";

fn write_config(dir: &Path, name: &str, epochs: usize) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{TINY_CONFIG}epochs = {epochs}\n")).unwrap();
    path
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_listed_episodes_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_small(tmp.path(), 7);
    let manifest = Dataset::read_manifest(&a).unwrap();
    assert_eq!(manifest.episodes.len(), 3);
    for e in &manifest.episodes {
        let dir = dataset::episode_dir(&a, e.id);
        assert!(dir.join("actions.csv").exists() && dir.join("states.csv").exists());
        assert!(dir.join(evalreport::frame_file_name(e.length - 1)).exists());
    }
    let b_root = tmp.path().join("again");
    fs::create_dir(&b_root).unwrap();
    let b = gen_small(&b_root, 7);
    assert_eq!(files_under(&a), files_under(&b));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let (code, _, _) = cknet(&["gen", "--system", "mountain_car", "--episodes", "0", "--steps", "5", "--out", s(&out)]);
    assert_eq!(code, 2);
    let (code, _, err) = cknet(&["gen", "--system", "pendulum", "--episodes", "1", "--steps", "5", "--out", s(&out)]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = cknet(&["gen", "--system", "mountain_car", "--episodes", "1", "--steps", "5", "--policy", "greedy", "--out", s(&out)]);
    assert_eq!(code, 2);
    let (code, _, _) = cknet(&["frobnicate"]);
    assert_eq!(code, 2);
    let (code, _, err) = cknet_env(
        &["gen", "--system", "mountain_car", "--episodes", "1", "--steps", "5", "--out", s(&out)],
        &[("CKNET_THREADS", "zero")],
    );
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("CKNET_THREADS"));
    let (code, _, _) = cknet_env(
        &["gen", "--system", "mountain_car", "--episodes", "1", "--steps", "5", "--out", s(&out)],
        &[("CKNET_THREADS", "1")],
    );
    assert_eq!(code, 0);
}

#[test]
fn runtime_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let (code, _, err) = cknet(&["gen", "--system", "mountain_car", "--episodes", "1", "--steps", "5", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code, 1, "{err}");
    let (code, _, err) = cknet(&["spectrum", "--checkpoint", s(&tmp.path().join("missing.ckpt")), "--out", s(&tmp.path().join("x.csv"))]);
    assert_eq!(code, 1);
    assert!(err.contains("missing.ckpt"));
    let (code, _, _) = cknet(&["eval", "--checkpoint", s(&blocker), "--data", s(tmp.path()), "--horizon", "3", "--out", s(&tmp.path().join("e"))]);
    assert_eq!(code, 1);
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path(), 1);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "latent_dim = 3\nbatch_size = lots\n").unwrap();
    let (code, _, err) = cknet(&[
        "train", "--data", s(&data), "--config", s(&cfg), "--out-checkpoint", s(&tmp.path().join("m.ckpt")),
        "--log", s(&tmp.path().join("log.csv")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("batch_size"), "{err}");
}

#[test]
fn train_eval_predict_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path(), 3);
    let ckpt = tmp.path().join("m.ckpt");
    let log = tmp.path().join("log.csv");
    let cfg4 = write_config(tmp.path(), "four.cfg", 4);
    let (code, stdout, err) = cknet(&["train", "--data", s(&data), "--config", s(&cfg4), "--out-checkpoint", s(&ckpt), "--log", s(&log)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("controllability rank"));
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.epoch, 4);
    let full = parse_log_csv(&fs::read_to_string(&log).unwrap()).unwrap();
    assert_eq!(full.len(), 4);

    // two epochs, then resume to four
    let cfg2 = write_config(tmp.path(), "two.cfg", 2);
    let half = tmp.path().join("half.ckpt");
    let (code, _, err) = cknet(&["train", "--data", s(&data), "--config", s(&cfg2), "--out-checkpoint", s(&half), "--log", s(&tmp.path().join("a.csv"))]);
    assert_eq!(code, 0, "{err}");
    let resumed = tmp.path().join("resumed.ckpt");
    let (code, _, err) = cknet(&[
        "train", "--data", s(&data), "--config", s(&cfg4), "--out-checkpoint", s(&resumed), "--log",
        s(&tmp.path().join("b.csv")), "--resume", s(&half),
    ]);
    assert_eq!(code, 0, "{err}");
    let first = parse_log_csv(&fs::read_to_string(tmp.path().join("a.csv")).unwrap()).unwrap();
    let second = parse_log_csv(&fs::read_to_string(tmp.path().join("b.csv")).unwrap()).unwrap();
    assert_eq!(second[0].epoch, 2);
    let joined: Vec<_> = first.into_iter().chain(second).collect();
    assert_eq!(joined, full);
    assert_eq!(fs::read(&resumed).unwrap(), fs::read(&ckpt).unwrap());

    let eval_dir = tmp.path().join("eval");
    let (code, _, err) = cknet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--horizon", "6", "--out", s(&eval_dir)]);
    assert_eq!(code, 0, "{err}");
    let (mae, mse) = evalreport::parse_curves_csv(&fs::read_to_string(eval_dir.join("curves.csv")).unwrap()).unwrap();
    assert_eq!((mae.len(), mse.len()), (6, 6));
    assert!(eval_dir.join("mae.svg").exists());

    let pred = tmp.path().join("pred");
    let (code, stdout, err) = cknet(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--episode", "1", "--horizon", "0", "--out", s(&pred)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("wrote 1 frames"));
    assert_eq!(evalreport::read_frame_series(&pred).unwrap().len(), 1);
    let (code, _, _) = cknet(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--episode", "9", "--horizon", "2", "--out", s(&pred)]);
    assert_eq!(code, 2);

    // a dataset with a different stack depth is incompatible
    let other = tmp.path().join("other");
    let (code, _, _) = cknet(&[
        "gen", "--system", "mountain_car", "--episodes", "1", "--steps", "8", "--out", s(&other), "--height", "8",
        "--width", "8", "--channels", "3",
    ]);
    assert_eq!(code, 0);
    let (code, _, err) = cknet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&other), "--horizon", "2", "--out", s(&eval_dir)]);
    assert_eq!(code, 1);
    assert!(err.contains("incompatible"), "{err}");
}

#[test]
fn edmd_spectrum_matches_analytic_eigenvalues() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("lin");
    let (code, _, err) = cknet(&["gen", "--system", "linear_ref", "--episodes", "4", "--steps", "100", "--seed", "2", "--out", s(&data)]);
    assert_eq!(code, 0, "{err}");
    let fit_dir = tmp.path().join("fit");
    let (code, _, err) = cknet(&["edmd", "--data-vector", s(&data), "--dictionary", "identity", "--out", s(&fit_dir)]);
    assert_eq!(code, 0, "{err}");
    let csv = tmp.path().join("spec.csv");
    let (code, stdout, err) = cknet(&["spectrum", "--checkpoint", s(&fit_dir.join("model.ckpt")), "--out", s(&csv)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("rank 2 of 2"), "{stdout}");
    let rows = parse_spectrum_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    let dt = 0.05;
    let expected = [C64::new(-0.3, 2.0), C64::new(-0.3, -2.0)];
    for (row, lam) in rows.iter().zip(expected) {
        assert!((row.mu - (lam * dt).exp()).norm() < 1e-8, "{:?}", row.mu);
        assert!((row.lambda - lam).norm() < 1e-6);
    }

    for dict in ["monomial:2", "hermite:2", "rbf:5:0.5"] {
        let (code, _, err) = cknet(&["edmd", "--data-vector", s(&data), "--dictionary", dict, "--out", s(&tmp.path().join(dict.replace(':', "_")))]);
        assert_eq!(code, 0, "{dict}: {err}");
    }
    let (code, _, _) = cknet(&["edmd", "--data-vector", s(&data), "--dictionary", "fourier:3", "--out", s(&fit_dir)]);
    assert_eq!(code, 2);
}
