use std::process::{Command, Output};

fn hyneter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyneter"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn params_prints_three_counts_and_two_ratios() {
    let o = hyneter(&["params", "--variants", "1.0,plus,max"]);
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("count ")).count(), 3, "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("ratio ")).count(), 2, "{out}");
    assert!(out.contains("count hyneter-1.0 backbone=23918976"), "{out}");
    // the plus ratio misses its band, so the command reports a failed check
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn params_max_only_passes() {
    let o = hyneter(&["params", "--variants", "1.0,max"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn gradcheck_micro_seed_7() {
    let o = hyneter(&["gradcheck", "--model", "micro", "--seed", "7"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    let worst: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("worst_rel_error "))
        .expect("worst error line")
        .parse()
        .unwrap();
    assert!(worst <= 1e-3);
}

#[test]
fn sweep_delta_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.csv");
    let o = hyneter(&[
        "sweep",
        "--factor",
        "delta",
        "--values",
        "1.0,1.5,2.0,2.5",
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "2",
        "--samples",
        "12",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("delta,1.000000,") && lines[4].starts_with("delta,2.500000,"));
}

#[test]
fn forward_audit_passes_on_micro() {
    let o = hyneter(&["forward", "--model", "micro", "--batch", "2"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("stage4 [2, 128, 1, 1]"), "{out}");
}

#[test]
fn build_prints_config_and_count() {
    let o = hyneter(&["build", "--model", "micro"]);
    let out = stdout(&o);
    assert!(o.status.success());
    assert!(out.contains("\"d\": 16") && out.contains("params "), "{out}");
}

#[test]
fn train_writes_checkpoint_that_forward_loads() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = hyneter(&["train", "--steps", "2", "--samples", "12", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("step,loss,"));
    let o = hyneter(&["forward", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
}

#[test]
fn config_file_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"variant":"micro","windw":3}"#).unwrap();
    let o = hyneter(&["build", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("windw"));
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    for args in [&["frobnicate"][..], &["params", "--bogus"][..]] {
        let o = hyneter(args);
        assert!(!o.status.success());
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    }
}
