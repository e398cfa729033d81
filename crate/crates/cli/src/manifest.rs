use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use timekernel::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one run: what was asked for and what came out.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: &'static str,
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seed: Option<u64>,
    /// sha256 of every output file, keyed by file name.
    pub artifacts: BTreeMap<String, String>,
    /// Outputs that carry wall-clock columns and so differ between reruns.
    pub timing_artifacts: Vec<String>,
    pub wall_seconds: f64,
}

/// Output files of a run, in creation order.
#[derive(Debug, Default)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    timing: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            ..Self::default()
        })
    }

    /// Path for a new output file, recorded for hashing.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn timing_file(&mut self, name: &str) -> PathBuf {
        if !self.timing.iter().any(|f| f == name) {
            self.timing.push(name.to_string());
        }
        self.file(name)
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<PathBuf> {
        for name in &self.files {
            manifest
                .artifacts
                .insert(name.clone(), sha256_file(&self.dir.join(name))?);
        }
        manifest.timing_artifacts = self.timing;
        let path = self.dir.join(MANIFEST_FILE);
        write_atomic(
            &path,
            &serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other)?,
        )?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
