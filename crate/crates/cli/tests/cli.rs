use std::path::Path;
use std::process::{Command, Output};

fn rscd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rscd")).args(args).output().expect("spawn rscd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--tiny", "--iters", "4", "--samples", "4", "--batch", "2", "--out", out];
    args.extend_from_slice(extra);
    let o = rscd(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train_tiny(&a, &["--seed", "5"]);
    train_tiny(&b, &["--seed", "5"]);
    for f in ["checkpoint.uckp", "trace.tsv", "metrics.csv", "config.json", "manifest.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    for f in ["checkpoint.uckp", "trace.tsv", "metrics.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let trace = std::fs::read_to_string(a.join("trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
}

#[test]
fn semantic_task_respects_class_count() {
    let tmp = tempfile::tempdir().unwrap();
    train_tiny(tmp.path(), &["--task", "scd", "--classes", "3"]);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg.pointer("/model/task/kind").and_then(|v| v.as_str()), Some("scd"), "{cfg}");
    assert_eq!(cfg.pointer("/model/task/classes").and_then(|v| v.as_u64()), Some(3), "{cfg}");
    let metrics = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert!(metrics.contains("sek"), "{metrics}");
}

#[test]
fn eval_formats_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    train_tiny(tmp.path(), &[]);
    let ck = tmp.path().join("checkpoint.uckp");
    let ck = ck.to_str().unwrap();

    let csv = rscd(&["eval", "--checkpoint", ck, "--samples", "4", "--format", "csv"]);
    assert_eq!(code(&csv), 0, "{}", stderr(&csv));
    let text = stdout(&csv);
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.contains(','), "{header}");
    assert!(text.contains(",f1,"), "{text}");

    let table = rscd(&["eval", "--checkpoint", ck, "--samples", "4", "--format", "table"]);
    assert_eq!(code(&table), 0);
    assert!(stdout(&table).contains("f1"));
    assert_ne!(stdout(&table), text);

    let empty = rscd(&["eval", "--checkpoint", ck, "--samples", "0"]);
    assert_eq!(code(&empty), 2, "{}", stderr(&empty));

    let mismatch = rscd(&["eval", "--checkpoint", ck, "--samples", "4", "--task", "scd"]);
    assert_eq!(code(&mismatch), 2, "{}", stderr(&mismatch));
    assert!(stderr(&mismatch).contains("usage"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let o = rscd(&["eval", "--checkpoint", "/nonexistent/x.uckp"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn unknown_ablation_axis_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rscd(&["ablate", "--axis", "bogus", "--tiny", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_canary_names_the_op() {
    let ok = rscd(&["gradcheck", "--filter", "conv"]);
    assert_eq!(code(&ok), 0, "{}{}", stdout(&ok), stderr(&ok));
    assert!(stdout(&ok).contains("PASS"));

    let bad = rscd(&["gradcheck", "--filter", "conv", "--inject-conv-sign-flip"]);
    assert_eq!(code(&bad), 1);
    let err = stderr(&bad);
    assert!(err.contains("gradient check failed") && err.contains("conv"), "{err}");
}

#[test]
fn export_features_writes_matching_pgms() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = rscd(&["export-features", "--samples", "2", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let (w, h) = (f[1], f[2]);
        let pgm = std::fs::read(f[4]).unwrap();
        let head = format!("P5\n{w} {h}\n255\n");
        assert!(pgm.starts_with(head.as_bytes()), "stage {}", f[0]);
        let n: usize = w.parse::<usize>().unwrap() * h.parse::<usize>().unwrap();
        assert_eq!(pgm.len(), head.len() + n);
    }
    assert!(tmp.path().join("manifest.json").is_file());

    let bad = rscd(&["export-features", "--stage", "5", "--out", out]);
    assert_eq!(code(&bad), 2, "{}", stderr(&bad));
}
