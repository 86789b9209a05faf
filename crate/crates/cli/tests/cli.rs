use std::path::Path;
use std::process::{Command, Output};

fn foton(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foton")).args(args).output().unwrap()
}

fn synthetic_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        format!(
            "# small run\nname = syn\nrule = foton\ndataset = synthetic\nhidden = 16,16\nepochs = 2\nbatch_size = 64\nlr = 0.05\n{extra}"
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn verify_passes() {
    let out = foton(&["verify"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn train_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    let out = foton(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--align-sweep", "1", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let jsonl = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().filter(|l| l.contains("\"event\":\"epoch\"")).count(), 3);
    assert!(jsonl.contains("\"event\":\"alignment\""));
    assert!(out_dir.join("summary.csv").exists());
    assert!(out_dir.join("checkpoint.ckpt").exists());
    let saved = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(saved.contains("seed = 3"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = synthetic_config(dir.path(), "colour = blue\n");
    assert_eq!(foton(&["train", "--config", &bad]).status.code(), Some(2));
    assert_eq!(foton(&["train", "--preset", "foton-mnist-7hl"]).status.code(), Some(2));
    assert_eq!(foton(&["train", "--preset", "foton-mnist-1hl", "--ortho-rate", "0"]).status.code(), Some(2));
    let missing = foton(&["train", "--preset", "bp-cifar10-1hl", "--data-dir", "/nonexistent/cifar"]);
    assert_eq!(missing.status.code(), Some(3));
    let cfg = synthetic_config(dir.path(), "rule = bp\ninit = gaussian\northo_rate = never\nloss = mse\nlr = 1e30\n");
    assert_eq!(foton(&["train", "--config", &cfg]).status.code(), Some(4));
}

#[test]
fn ablate_writes_one_directory_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "");
    let out_dir = dir.path().join("grid");
    let out = foton(&[
        "ablate", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--axis", "feedback", "--values", "1", "10", "never",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for v in ["1", "10", "never"] {
        assert!(out_dir.join(format!("f_refresh-{v}/metrics.jsonl")).exists());
    }
    assert_eq!(std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap().lines().count(), 4);
}

#[test]
fn presets_are_listed() {
    let out = foton(&["presets"]);
    assert!(String::from_utf8_lossy(&out.stdout).lines().any(|l| l == "foton-mnist-1hl"));
}
