#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn voxreg(args: &[&str], envs: &[(&str, &str)], cwd: &Path) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_voxreg"));
    cmd.args(args).current_dir(cwd).env_remove("VOXREG_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let Output { status, stdout, stderr } = cmd.output().expect("binary runs");
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

/// Runs and insists on success.
pub fn ok(args: &[&str], envs: &[(&str, &str)], cwd: &Path) -> Run {
    let r = voxreg(args, envs, cwd);
    assert_eq!(r.code, 0, "voxreg {args:?} failed:\n{}\n{}", r.stdout, r.stderr);
    r
}

pub fn synth(cwd: &Path, out: &str, n: usize, extent: usize, seed: u64) -> PathBuf {
    let n = format!("n_subjects={n}");
    let e = format!("extent={extent}");
    let s = seed.to_string();
    ok(
        &["synth", "--out", out, "--seed", &s, "--config", &n, "--config", &e],
        &[],
        cwd,
    );
    cwd.join(out)
}

/// SHA-256 of every file under `dir`, keyed by relative path, skipping
/// names in `skip`.
pub fn tree_digest(dir: &Path, skip: &[&str]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            if skip.contains(&name.as_str()) {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), hex));
            }
        }
    }
    out.sort();
    out
}

pub fn metric(text: &str, key: &str) -> Option<f64> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .map(|v| v.parse().unwrap())
}
