use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dat_core::checkpoint::save_oracle_checkpoint;

fn dat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", out.to_str().unwrap(), "--sessions", "2", "--frames", "150"];
    args.extend_from_slice(&["--feature-dims", "3,4,2,3,5"]);
    args.extend_from_slice(extra);
    dat(&args)
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&synth(&a, &["--seed", "4"])), 0);
    assert_eq!(code(&synth(&b, &["--seed", "4"])), 0);
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta.len(), 2 * 13);
    assert_eq!(ta, tb);
    let c = dir.path().join("c");
    synth(&c, &["--seed", "5"]);
    assert_ne!(tree_bytes(&c), ta);
}

#[test]
fn oracle_checkpoint_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &[]);
    let ckpt = dir.path().join("oracle.json");
    save_oracle_checkpoint(&ckpt).unwrap();
    let report = dir.path().join("r.csv");
    let o = dat(&["eval", "--data", data.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean_ccc 1.000000"));
    assert_eq!(fs::read_to_string(report).unwrap(), "session_id,ccc\nsynth_0000,1\nsynth_0001,1\n");
}

#[test]
fn train_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &[]);
    let run = dir.path().join("run");
    let o = dat(&[
        "train", "--data", data.to_str().unwrap(), "--val", data.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--epochs", "1", "--set", "d=8", "--set", "heads=2", "--set", "core_len=16", "--set", "context_len=4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("# train config"), "{stdout}");
    assert!(stdout.contains("#   d = 8"), "{stdout}");
    for f in ["config.txt", "history.csv", "best.json", "best.bin", "last.json", "last.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let pred = dir.path().join("p.csv");
    let o = dat(&[
        "predict", "--session", data.join("synth_0001").to_str().unwrap(), "--ckpt", run.join("best.json").to_str().unwrap(),
        "--out", pred.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame_index,prediction"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (i, v) = l.split_once(',').unwrap();
            (i.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 150);
    assert!(rows.iter().enumerate().all(|(k, (i, v))| k == *i && (0.0..=1.0).contains(v)));
}

#[test]
fn gradcheck_passes() {
    let o = dat(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max rel err"));
}

#[test]
fn exit_codes() {
    let o = dat(&["train", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[usage]"));
    assert_eq!(code(&dat(&["synth", "--out", "/tmp/x", "--frames", "nope"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &[]);
    let o = dat(&["train", "--data", data.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap(), "--set", "colour=red"]);
    assert_eq!(code(&o), 1);

    fs::write(data.join("synth_0000/target/clip.datf"), b"DATF").unwrap();
    let ckpt = dir.path().join("oracle.json");
    save_oracle_checkpoint(&ckpt).unwrap();
    let o = dat(&["eval", "--data", data.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[data]") && err.contains("clip"), "{err}");

    let o = dat(&["eval", "--data", data.to_str().unwrap(), "--ckpt", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
