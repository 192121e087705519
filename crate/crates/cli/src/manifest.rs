use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Record of one command run, written next to its primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 over the command, its arguments (output path and `--force`
    /// aside) and every config file read.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub thread_cap: Option<usize>,
    pub summary: Value,
}

/// Collects what a manifest needs while a command runs.
pub struct Recorder {
    command: String,
    args: Vec<String>,
    configs: Vec<(String, Value)>,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
    thread_cap: Option<usize>,
    started: SystemTime,
    clock: Instant,
}

impl Recorder {
    pub fn new(command: &str, thread_cap: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            configs: Vec::new(),
            seed: None,
            outputs: Vec::new(),
            thread_cap,
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn config(&mut self, label: &str, value: Value) {
        self.configs.push((label.to_string(), value));
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        let mut args = self.args.iter();
        while let Some(a) = args.next() {
            match a.as_str() {
                "--force" => continue,
                "--out" => {
                    args.next();
                    continue;
                }
                _ => {}
            }
            h.update([0u8]);
            h.update(a.as_bytes());
        }
        for (label, v) in &self.configs {
            h.update([1u8]);
            h.update(label.as_bytes());
            h.update(v.to_string().as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Write `<anchor>.<label>.manifest.json` and return its path.
    pub fn finish(self, anchor: &Path, label: &str, summary: Value) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            config_hash: self.config_hash(),
            command: self.command,
            args: self.args,
            seed: self.seed,
            git_describe: env!("RCM_GIT_DESCRIBE").to_string(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
            thread_cap: self.thread_cap,
            summary,
        };
        let path = manifest_path(anchor, label);
        let text = serde_json::to_string_pretty(&manifest).map_err(rcm_core::Error::from)?;
        std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

pub fn manifest_path(anchor: &Path, label: &str) -> PathBuf {
    if anchor.is_dir() {
        return anchor.join(format!("{label}.manifest.json"));
    }
    let mut s = anchor.as_os_str().to_owned();
    s.push(format!(".{label}.manifest.json"));
    PathBuf::from(s)
}

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(rcm_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
