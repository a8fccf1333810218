use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use vandisc_core::ControlProblem;

#[derive(Debug, Serialize)]
pub struct ExperimentManifest<'a, F: Serialize> {
    pub subcommand: &'a str,
    pub flags: &'a F,
    pub problem: &'a str,
    pub problem_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub tool_version: &'static str,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

/// SHA-256 of the canonical config text.
pub fn problem_hash(problem: &ControlProblem) -> String {
    hex::encode(Sha256::digest(problem.to_config_text().as_bytes()))
}

/// Collects output files written under one directory.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        fs::write(self.path(name), text + "\n")
    }

    pub fn create(&mut self, name: &str) -> std::io::Result<std::io::BufWriter<fs::File>> {
        Ok(std::io::BufWriter::new(fs::File::create(self.path(name))?))
    }

    pub fn finish(self) -> (PathBuf, Vec<String>) {
        (self.dir, self.files)
    }
}
