use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Everything needed to reproduce a command's outputs. Holds no timestamps,
/// so identical inputs give an identical manifest.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub inputs: BTreeMap<String, String>,
    /// sha256 of each output file, keyed by path relative to the output dir.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            // skip argv[0], which depends on how the binary was invoked
            args: std::env::args().skip(1).collect(),
            seed: None,
            config_hash: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, hash: String) {
        self.inputs.insert(name.into(), hash);
    }

    /// Hashes `files` under `dir` into the outputs table.
    pub fn outputs(&mut self, dir: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let p = dir.join(f);
            let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            self.outputs.insert(f.display().to_string(), vclip::sha256_hex(&bytes));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(vclip::sha256_hex(&bytes))
}
