//! Run manifests: command, configuration, input hashes, outputs and stats.

use std::collections::BTreeMap;
use std::fs::File;
use std::hash::Hasher;
use std::io::Read;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::archive::INDEX_FILE;
use crate::error::{AppError, Result};

/// 64-bit FNV-1a over a byte stream.
pub fn fnv1a_reader(mut r: impl Read) -> std::io::Result<u64> {
    let mut h = FnvHasher::default();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            return Ok(h.finish());
        }
        h.write(&buf[..n]);
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn hash_file(path: &Path) -> Result<u64> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    fnv1a_reader(f).map_err(|e| AppError::io(path, e))
}

/// Hex FNV-1a of a file, or of a sharded directory's index followed by its
/// shards in index order.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return Ok(format!("{:016x}", hash_file(path)?));
    }
    let index = path.join(INDEX_FILE);
    let map: BTreeMap<String, String> = crate::formats::read_json(&index)?;
    let mut files: Vec<&String> = map.values().collect();
    files.sort();
    files.dedup();
    let mut h = FnvHasher::default();
    h.write(&hash_file(&index)?.to_le_bytes());
    for f in files {
        h.write(&hash_file(&path.join(f))?.to_le_bytes());
    }
    Ok(format!("{:016x}", h.finish()))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input path → FNV-1a.
    pub inputs: BTreeMap<String, String>,
    /// Output path → FNV-1a.
    pub outputs: BTreeMap<String, String>,
    pub stats: serde_json::Value,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Manifest {
            command: command.into(),
            config,
            stats: serde_json::Value::Null,
            ..Default::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        crate::formats::write_json(path, self)?;
        Ok(path.to_path_buf())
    }
}
