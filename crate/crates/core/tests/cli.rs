use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn retiflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retiflow"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = retiflow(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));

    let o = retiflow(&["synth", "--count", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));

    let o = retiflow(&["synth", "--out", "d", "--gaussian-sigma", "-1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gaussian_sigma"));
    assert!(!tmp.path().join("d").exists(), "nothing written before validation");

    let o = retiflow(&["synth", "--out", "d", "--config", "missing.cfg"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = retiflow(&["eval", "--ref", "nope.png", "--test", "nope.png"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error "));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    for dir in ["a", "b"] {
        let o = retiflow(
            &["synth", "--out", dir, "--count", "2", "--seed", "5", "--height", "16", "--width", "20"],
            tmp.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = tree_bytes(&tmp.path().join("a"));
    assert_eq!(a.len(), 14);
    assert!(a.iter().any(|(n, _)| n.ends_with("manifest.txt")));
    assert_eq!(a, tree_bytes(&tmp.path().join("b")));
}

#[test]
fn config_file_fills_absent_flags() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.cfg"), "# synth defaults\ncount=3\nheight=12\nwidth = 12\n").unwrap();
    let o = retiflow(&["synth", "--out", "d", "--config", "c.cfg", "--count", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("pairs=1"));
    let manifest = fs::read_to_string(tmp.path().join("d/0/manifest.txt")).unwrap();
    assert!(manifest.contains("height=12"));
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = |args: &[&str]| {
        let o = retiflow(args, tmp.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    ok(&["synth", "--out", "pairs", "--count", "2", "--height", "16", "--width", "16"]);
    let small = ["--iters", "3", "--batch", "2", "--patch", "12", "--hidden", "2", "--depth", "1", "--embed-dim", "2"];
    let mut crfi = vec!["train-crfi", "--pairs", "pairs", "--out", "m/crfi.ckpt"];
    crfi.extend(small);
    ok(&crfi);
    let loss = fs::read_to_string(tmp.path().join("m/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("iter,cfm_loss,consistency_loss"));
    assert_eq!(loss.lines().count(), 4);
    let mut crfr = vec!["train-crfr", "--pairs", "pairs", "--out", "m/crfr.ckpt", "--loss-csv", "m/crfr.csv"];
    crfr.extend(small);
    ok(&crfr);
    let loss = fs::read_to_string(tmp.path().join("m/crfr.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("iter,cfm_loss,consistency_loss,content_loss"));

    let out = ok(&["decompose", "--in", "pairs/0/low.png", "--out-dir", "dec"]);
    assert!(out.contains("objective="));
    assert!(tmp.path().join("dec/low_L.png").exists() && tmp.path().join("dec/low_R.png").exists());
    ok(&["denoise", "--ckpt", "m/crfr.ckpt", "--in", "dec/low_R.png", "--out", "dn.png"]);

    let args = [
        "enhance", "--crfi", "m/crfi.ckpt", "--crfr", "m/crfr.ckpt", "--in", "pairs/0/low.png", "--out", "e.png",
        "--t-end", "1.2", "--steps", "4", "--emit-all", "seq",
    ];
    ok(&args);
    let times = fs::read_to_string(tmp.path().join("seq/times.csv")).unwrap();
    assert_eq!(times.lines().count(), 6);
    assert!(tmp.path().join("seq/step_004.png").exists());

    let out = ok(&["eval", "--ref", "pairs/0/normal.png", "--test", "e.png"]);
    assert!(out.starts_with("psnr=") && out.contains(" ssim="));
    ok(&["eval-seq", "--ref", "pairs/0/normal.png", "--dir", "seq", "--out", "seq.csv"]);
    let csv = fs::read_to_string(tmp.path().join("seq.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,t,psnr_db,ssim"));
    assert!(csv.lines().nth(5).unwrap().starts_with("4,1.2"));
    ok(&["fuse", "--dir", "seq", "--out", "fused.png"]);

    let o = retiflow(&["denoise", "--ckpt", "m/crfi.ckpt", "--in", "dec/low_R.png", "--out", "x.png"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_and_selftest_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let o = retiflow(&["gradcheck"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("check=crfr_loss")));
    let o = retiflow(&["selftest", "--workers", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| !l.starts_with("fail")));
}
