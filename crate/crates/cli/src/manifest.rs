use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    format_version: u8,
    seed: u64,
    config_hash: String,
    config: &'a ExperimentConfig,
    wall_time_s: f64,
    inputs: &'a [FileHash],
    outputs: &'a [FileHash],
    /// Hash over the output hashes, in order.
    content_hash: String,
}

/// Tracks the files a command reads and writes.
pub struct Run<'a> {
    command: &'a str,
    cfg: &'a ExperimentConfig,
    start: Instant,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

impl<'a> Run<'a> {
    pub fn start(command: &'a str, cfg: &'a ExperimentConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
        Ok(Self {
            command,
            cfg,
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Reads an input file and records its hash.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        self.inputs.push(FileHash {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.cfg.out(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        log::info!("wrote {}", path.display());
        self.outputs.push(FileHash {
            path: path.clone(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Writes `<command>.manifest.json` and the effective `config.json`.
    pub fn finish(self) -> Result<(), CliError> {
        let cfg_json = serde_json::to_string_pretty(self.cfg).map_err(|e| CliError::Usage(e.to_string()))? + "\n";
        let cfg_path = self.cfg.out("config.json");
        std::fs::write(&cfg_path, &cfg_json).map_err(|e| io_err(&cfg_path, e))?;
        let joined: String = self.outputs.iter().map(|f| f.sha256.as_str()).collect();
        let m = Manifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            format_version: self.cfg.format_version,
            seed: self.cfg.seed,
            config_hash: sha256_hex(cfg_json.as_bytes()),
            config: self.cfg,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            inputs: &self.inputs,
            outputs: &self.outputs,
            content_hash: sha256_hex(joined.as_bytes()),
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Usage(e.to_string()))? + "\n";
        let path = self.cfg.out(&format!("{}.manifest.json", self.command));
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
