//! The `run_config.txt` written into every output directory: the working
//! directory and argument vector that produced it, followed by the resolved
//! settings. `voxreg rerun` replays the recorded arguments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

pub const RUN_CONFIG_FILE: &str = "run_config.txt";
const HEADER: &str = "# voxreg run configuration";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cwd: PathBuf,
    pub argv: Vec<String>,
    /// Resolved `key=value` settings, informational only.
    pub settings: String,
}

impl RunConfig {
    /// Records `argv` (without the program name) as run from the current
    /// working directory.
    pub fn capture(argv: &[String], settings: String) -> anyhow::Result<Self> {
        let cwd = std::env::current_dir().context("cannot determine the working directory")?;
        Ok(RunConfig {
            cwd,
            argv: argv.to_vec(),
            settings,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\ncwd={}\n", self.cwd.display());
        for a in &self.argv {
            let _ = writeln!(s, "argv={a}");
        }
        s.push_str("# resolved settings\n");
        s.push_str(&self.settings);
        if !s.ends_with('\n') {
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, voxreg::Error> {
        let bad = |m: String| voxreg::Error::Config(format!("run configuration: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header line".into()));
        }
        let mut cwd = None;
        let mut argv = Vec::new();
        let mut settings = String::new();
        let mut in_settings = false;
        for line in lines {
            if in_settings {
                settings.push_str(line);
                settings.push('\n');
            } else if line == "# resolved settings" {
                in_settings = true;
            } else if let Some(v) = line.strip_prefix("cwd=") {
                cwd = Some(PathBuf::from(v));
            } else if let Some(v) = line.strip_prefix("argv=") {
                argv.push(v.to_string());
            } else {
                return Err(bad(format!("unexpected line {line:?}")));
            }
        }
        Ok(RunConfig {
            cwd: cwd.ok_or_else(|| bad("missing cwd line".into()))?,
            argv,
            settings,
        })
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_text()).map_err(|e| voxreg::Error::Io { path, source: e })?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(RUN_CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| voxreg::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(Self::parse(&text)?)
    }

    /// The recorded arguments with the value of `--out` replaced.
    pub fn argv_with_out(&self, out: &Path) -> Vec<String> {
        let mut argv = self.argv.clone();
        let out = out.display().to_string();
        let mut i = 0;
        while i < argv.len() {
            if argv[i] == "--out" && i + 1 < argv.len() {
                argv[i + 1] = out.clone();
                i += 1;
            } else if argv[i].starts_with("--out=") {
                argv[i] = format!("--out={out}");
            }
            i += 1;
        }
        argv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunConfig {
        RunConfig {
            cwd: PathBuf::from("/work"),
            argv: vec![
                "train".into(),
                "--out".into(),
                "runs/a".into(),
                "--config".into(),
                "patience=2".into(),
            ],
            settings: "learning_rate=3e-5\npatience=2\n".into(),
        }
    }

    #[test]
    fn text_round_trip() {
        let rc = sample();
        assert_eq!(RunConfig::parse(&rc.to_text()).unwrap(), rc);
    }

    #[test]
    fn out_is_replaced() {
        let argv = sample().argv_with_out(Path::new("/tmp/b"));
        assert_eq!(argv[2], "/tmp/b");
        assert_eq!(argv[4], "patience=2");
    }

    #[test]
    fn rejects_foreign_text() {
        assert!(RunConfig::parse("hello\n").is_err());
        assert!(RunConfig::parse(&format!("{HEADER}\nargv=x\n")).is_err());
    }
}
