//! Result files and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use scenario_vi::error::StageExt;
use scenario_vi::Result;

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

/// One manifest per run. Everything except `duration_ms` is a function of
/// the inputs and the seed.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    config: serde_json::Value,
    seed: u64,
    version: &'static str,
    duration_ms: u128,
    outputs: Vec<FileDigest>,
}

pub struct Run {
    dir: PathBuf,
    subcommand: &'static str,
    started: Instant,
    files: Vec<String>,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

impl Run {
    pub fn start(dir: &Path, subcommand: &'static str) -> Result<Self> {
        fs::create_dir_all(dir).stage("output")?;
        Ok(Run {
            dir: dir.to_path_buf(),
            subcommand,
            started: Instant::now(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `value` as `name` and returns the text.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<String> {
        let text = to_json(value).stage("output")?;
        fs::write(self.path(name), &text).stage("output")?;
        self.files.push(name.to_string());
        Ok(text)
    }

    /// Registers a file written by `write` at `self.path(name)`.
    pub fn file(&mut self, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        write(&self.path(name)).stage("output")?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn finish<C: Serialize>(self, config: &C, seed: u64) -> Result<()> {
        let outputs = self
            .files
            .iter()
            .map(|name| {
                let bytes = fs::read(self.path(name))?;
                Ok(FileDigest {
                    path: name.clone(),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                })
            })
            .collect::<Result<Vec<_>>>()
            .stage("output")?;
        let manifest = Manifest {
            subcommand: self.subcommand,
            config: serde_json::to_value(config).stage("output")?,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            duration_ms: self.started.elapsed().as_millis(),
            outputs,
        };
        let name = format!("{}.manifest.json", self.subcommand);
        fs::write(self.path(&name), to_json(&manifest)?).stage("output")?;
        Ok(())
    }
}
