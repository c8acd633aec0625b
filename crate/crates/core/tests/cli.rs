//! The `ktn` binary: determinism, exit codes and help text.

mod common;

use std::path::Path;
use std::process::{Command, Output};

fn ktn(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ktn"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("KTN_WORKSPACE")
        .output()
        .unwrap()
}

fn setup(root: &Path, ws: &str) -> std::path::PathBuf {
    let mnist = root.join("mnist");
    if !mnist.exists() {
        common::write_fake_mnist(&mnist, 40, 10);
    }
    let cfg = root.join(format!("{ws}.toml"));
    std::fs::write(&cfg, common::tiny_config_toml(&mnist, &root.join(ws))).unwrap();
    cfg
}

#[test]
fn build_dataset_is_byte_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = setup(tmp.path(), "a");
    let b = setup(tmp.path(), "b");
    let out = ktn(&["build-dataset", "--seed", "7"], &a);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed = 7"));
    let out = ktn(&["build-dataset", "--seed", "7", "--threads", "1"], &b);
    assert!(out.status.success());
    let sa = common::snapshot(&tmp.path().join("a"));
    let sb = common::snapshot(&tmp.path().join("b"));
    assert!(!sa.is_empty());
    assert_eq!(sa, sb);
    let c = setup(tmp.path(), "c");
    ktn(&["build-dataset", "--seed", "8"], &c);
    assert_ne!(sa, common::snapshot(&tmp.path().join("c")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "ws");
    assert_eq!(
        ktn(&["eval", "--method", "projected"], &cfg).status.code(),
        Some(2)
    );
    assert_eq!(
        ktn(&["eval", "--method", "fancy"], &cfg).status.code(),
        Some(1)
    );
    assert_eq!(ktn(&["no-such-command"], &cfg).status.code(), Some(1));
    assert_eq!(
        ktn(&["build-dataset", "--lr", "-1"], &cfg).status.code(),
        Some(1)
    );

    assert_eq!(ktn(&["build-dataset"], &cfg).status.code(), Some(0));
    assert_eq!(
        ktn(&["train-source", "--model", "a"], &cfg).status.code(),
        Some(0)
    );
    let out = ktn(&["eval", "--method", "projected"], &cfg);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("projected: mean accuracy"));
    // gates cannot pass on a partial report
    assert_eq!(ktn(&["report", "--gate"], &cfg).status.code(), Some(3));
    assert_eq!(ktn(&["report"], &cfg).status.code(), Some(0));
}

#[test]
fn help_lists_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_ktn"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "--epochs",
        "[default: 40]",
        "--lr ",
        "[default: 0.001]",
        "[default: 0.0005]",
        "[default: 64]",
        "[default: 65.5]",
        "[default: 80]",
        "[default: 0.01]",
        "[default: 20]",
        "[default: 0.1]",
        "KTN_WORKSPACE",
    ] {
        assert!(text.contains(needle), "help lacks {needle}:\n{text}");
    }
    for sub in [
        "build-dataset",
        "train-source",
        "cache-targets",
        "train-ktn",
        "eval",
        "transfer-eval",
        "gradcheck",
        "report",
    ] {
        assert!(text.contains(sub));
    }
}
