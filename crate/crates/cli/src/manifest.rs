//! Run manifest: resolved settings, input and output digests, timings.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Every setting the command used, as `key=value` strings.
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock seconds per phase. The only field that varies between
    /// identical runs.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn digest(path: &Path) -> anyhow::Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path).with_context(|| format!("digesting {}", path.display()))?,
    })
}

/// Accumulates a manifest while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                tool: format!("asp {}", env!("CARGO_PKG_VERSION")),
                command: command.to_string(),
                config: BTreeMap::new(),
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.inputs.push(digest(path)?);
        Ok(())
    }

    /// Digests every regular file directly inside `dir`, by name, except
    /// an existing `manifest.json`.
    pub fn input_dir(&mut self, dir: &Path) -> anyhow::Result<()> {
        for f in dir_files(dir)? {
            self.input(&f)?;
        }
        Ok(())
    }

    /// Output counterpart of [`input_dir`](Self::input_dir).
    pub fn output_dir(&mut self, dir: &Path) -> anyhow::Result<()> {
        for f in dir_files(dir)? {
            self.output(&f)?;
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.outputs.push(digest(path)?);
        Ok(())
    }

    /// Records the seconds elapsed since `since` under `phase`.
    pub fn time(&mut self, phase: &str, since: Instant) {
        self.manifest.timings.insert(phase.to_string(), since.elapsed().as_secs_f64());
    }

    /// Sets the resolved config, stamps the total time and writes the
    /// manifest as pretty JSON.
    pub fn finish(mut self, config: BTreeMap<String, String>, path: &Path) -> anyhow::Result<RunManifest> {
        self.manifest.config = config;
        self.time("total", self.started);
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

fn dir_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();
    Ok(files)
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn read_manifest(path: &Path) -> anyhow::Result<RunManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
