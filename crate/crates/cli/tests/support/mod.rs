#![allow(dead_code)]

#[path = "../../../core/tests/support/fixture.rs"]
pub mod fixture;
#[path = "../../../core/tests/support/gradcheck.rs"]
pub mod gradcheck;
pub mod planted;

use std::path::Path;
use std::process::{Command, Output};

/// Run the built binary with `args`.
pub fn deltafix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltafix"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = deltafix(args);
    assert!(
        out.status.success(),
        "deltafix {args:?} exited {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
