use std::path::Path;
use std::process::{Command, Output};

fn cromac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cromac")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "total_steps = 300\nT_r = 100\nbatch_size = 4\nbuffer_capacity = 32\nexplore_anneal_steps = 100\n";

fn train_tiny(dir: &Path, method: &str) -> std::path::PathBuf {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join(method);
    let o = cromac(&["train", "--env", "hallway-2x2", "--config", cfg.to_str().unwrap(), "--seed", "1", "--method", method, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("trained hallway-2x2"));
    out.join("checkpoint.bin")
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cromac(&[]).status.code(), Some(2));
    assert_eq!(cromac(&["verify", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(cromac(&["eval", "--checkpoint", "/nonexistent/ckpt.bin"]).status.code(), Some(2));
    assert_eq!(cromac(&["train", "--env", "smac", "--out", "/tmp/unused"]).status.code(), Some(2));
    assert_eq!(cromac(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_prints_pass() {
    let o = cromac(&["verify", "--suite", "poe", "--cases", "50"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("PASS poe"));
}

#[test]
fn train_eval_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "cromac");
    for f in ["metrics.csv", "manifest.json", "checkpoint.bin"] {
        assert!(ckpt.with_file_name(f).exists(), "{f} missing");
    }
    let lat = dir.path().join("latents.csv");
    let o = cromac(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--attack", "fgsm", "--epsilon", "0.3", "--episodes", "4", "--seeds", "0,1",
        "--latents", lat.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("seed 0: win rate") && text.contains("seed 1: win rate"));
    assert!(text.contains("fgsm eps=0.3"));
    assert!(std::fs::read_to_string(&lat).unwrap().lines().count() > 1);

    let o = cromac(&["table1", "--checkpoint", ckpt.to_str().unwrap(), "--env", "hallway-2x2", "--episodes", "2", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].split(',').count(), 9);
    assert!(rows[1].starts_with("mean,") && rows[2].starts_with("std,"));

    let o = cromac(&["table1", "--checkpoint", ckpt.to_str().unwrap(), "--env", "hallway-4x5x6", "--episodes", "2", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_naming_another_env_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "env = hallway-4x5x6\n").unwrap();
    let o = cromac(&["train", "--env", "hallway-2x2", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
