use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use stylenet::{Error, Result};

/// Record of one invocation: the resolved flags, seed, timing and the files
/// written. `command` re-runs the invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    pub flags: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub started: f64,
    pub finished: f64,
    pub artifacts: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn new(subcommand: &str, flags: Vec<(String, String)>, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            flags,
            seed,
            started: now(),
            finished: 0.0,
            artifacts: Vec::new(),
        }
    }

    /// Shell-ready command line reproducing the run.
    pub fn command(&self) -> String {
        let mut parts = vec!["stylenet".to_string(), self.subcommand.clone()];
        for (k, v) in &self.flags {
            match v.as_str() {
                "true" => parts.push(format!("--{k}")),
                "false" => {}
                _ => {
                    parts.push(format!("--{k}"));
                    parts.push(v.clone());
                }
            }
        }
        parts.join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "subcommand={}\ncommand={}\n",
            self.subcommand,
            self.command()
        );
        for (k, v) in &self.flags {
            out += &format!("flag.{k}={v}\n");
        }
        if let Some(s) = self.seed {
            out += &format!("seed={s}\n");
        }
        out += &format!(
            "started={:.3}\nfinished={:.3}\n",
            self.started, self.finished
        );
        for a in &self.artifacts {
            out += &format!("artifact={}\n", a.display());
        }
        out
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished = now();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_rebuilds_flags() {
        let m = RunManifest::new(
            "synth",
            vec![
                ("out".into(), "d".into()),
                ("paired".into(), "true".into()),
                ("verbose".into(), "false".into()),
            ],
            Some(3),
        );
        assert_eq!(m.command(), "stylenet synth --out d --paired");
        assert!(m.to_text().contains("flag.out=d\n"));
    }
}
