//! Run manifests: what ran, with which resolved settings, on which files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let mut hex = String::with_capacity(64);
        for b in Sha256::digest(&data) {
            let _ = write!(hex, "{b:02x}");
        }
        Ok(Self { path: path.to_path_buf(), sha256: hex, bytes: data.len() as u64 })
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub version: &'static str,
    /// Every setting after defaults, config file and flags were merged.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started: String,
    pub finished: String,
}

pub struct Run {
    subcommand: &'static str,
    started: String,
}

impl Run {
    pub fn start(subcommand: &'static str) -> Self {
        Self { subcommand, started: now() }
    }

    /// Checksums inputs and outputs and writes the manifest to `dest`.
    pub fn finish(
        self,
        dest: &Path,
        config: impl Serialize,
        seed: Option<u64>,
        inputs: &[&Path],
        outputs: &[PathBuf],
    ) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand,
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::to_value(config)?,
            seed,
            inputs: inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
            started: self.started,
            finished: now(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        geomoe::train::write_atomic(dest, &bytes)?;
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// `<file>.manifest.json` beside a file output.
pub fn beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
