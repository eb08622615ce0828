#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn fenkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fenkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("FENKIT_CACHE_DIR")
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn fenkit")
}

/// Runs a command that must succeed and returns its stdout.
pub fn fenkit_ok(dir: &Path, args: &[&str]) -> String {
    let out = fenkit(dir, args);
    assert!(
        out.status.success(),
        "fenkit {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A small planted-channel workspace: `net.json`, `ds.json`, `table.json`.
pub fn planted_workspace(dir: &Path) {
    fenkit_ok(dir, &["make-toy-net", "--name", "planted", "--seed", "3", "--out", "net.json"]);
    fenkit_ok(
        dir,
        &["make-dataset", "--preset", "planted", "--seed", "3", "--n-train", "160", "--n-test", "60", "--out", "ds.json"],
    );
    fenkit_ok(
        dir,
        &[
            "characterize", "--netspec", "net.json", "--dataset", "ds.json", "--m-list", "1,2", "--d-list", "2,4,16",
            "--per-channel", "--epochs", "20", "--out", "table.json",
        ],
    );
}
