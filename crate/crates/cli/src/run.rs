//! Run directories and their manifests.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    scenario_hash: String,
    seed: u64,
    files: Vec<String>,
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    bytes: u64,
    sha256: String,
}

/// Holds only what determines the outputs, so reruns with the same inputs
/// produce the same bytes.
#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    scenario_hash: &'a str,
    seed: u64,
    files: Vec<FileEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunDir {
    /// `explicit` is used as is; otherwise a fresh `<command>-<timestamp>`
    /// directory is created under `parent`.
    pub fn create(
        parent: &Path,
        explicit: Option<&Path>,
        command: &str,
        scenario_hash: String,
        seed: u64,
    ) -> std::io::Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S").to_string();
                let mut p = parent.join(format!("{command}-{stamp}"));
                let mut i = 1;
                while p.exists() {
                    p = parent.join(format!("{command}-{stamp}-{i}"));
                    i += 1;
                }
                p
            }
        };
        std::fs::create_dir_all(&path)?;
        Ok(Self { path, command: command.to_string(), scenario_hash, seed, files: Vec::new() })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(self.file(name), text)
    }

    /// Registers files written by a library call.
    pub fn record(&mut self, paths: &[PathBuf]) {
        for p in paths {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                self.file(name);
            }
        }
    }

    pub fn finish(mut self) -> std::io::Result<PathBuf> {
        self.files.sort();
        let files = self
            .files
            .iter()
            .map(|name| {
                let bytes = std::fs::read(self.path.join(name))?;
                Ok(FileEntry { name: name.clone(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) })
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        let manifest = Manifest {
            tool: "zonemarket",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            scenario_hash: &self.scenario_hash,
            seed: self.seed,
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(self.path.join(MANIFEST_FILE), text)?;
        Ok(self.path)
    }
}
