//! Tensor archives: an 8-byte little-endian header length, a JSON header and
//! a raw payload, optionally split across shards listed in an index file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crane_core::dtype::DType;
use crane_core::tensor::numel;
use crane_core::{Tensor, TensorMap};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const INDEX_FILE: &str = "archive.index.json";
pub const DEFAULT_SHARD_BUDGET: u64 = 1 << 30;
const METADATA_KEY: &str = "__metadata__";

/// Where a tensor lives inside its shard's payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Tensors in lexicographic name order plus the files they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: TensorMap,
    pub meta: BTreeMap<String, TensorMeta>,
    pub shard_list: Vec<PathBuf>,
}

impl TensorArchive {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

/// Parses one shard held in memory.
pub fn parse_shard(path: &Path, bytes: &[u8]) -> Result<Vec<(String, TensorMeta, Tensor)>> {
    let bad = |reason: String| AppError::format(path, reason);
    if bytes.len() < 8 {
        return Err(bad(format!(
            "{} bytes is too short for a header length",
            bytes.len()
        )));
    }
    let h = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64
        .checked_add(h)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| bad(format!("header length {h} runs past the end of the file")))?
        as usize;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| bad(format!("malformed header: {e}")))?;
    let payload = &bytes[header_end..];
    let mut out = Vec::with_capacity(header.len());
    let mut ranges = Vec::with_capacity(header.len());
    for (name, value) in header {
        if name == METADATA_KEY {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| bad(format!("tensor {name}: malformed entry: {e}")))?;
        let dtype = DType::parse(&entry.dtype).ok_or_else(|| {
            bad(format!(
                "tensor {name}: unsupported dtype {:?}",
                entry.dtype
            ))
        })?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > payload.len() as u64 {
            return Err(bad(format!(
                "tensor {name}: byte range [{begin}, {end}) outside a payload of {} bytes",
                payload.len()
            )));
        }
        let expected = numel(&entry.shape) as u64 * dtype.width() as u64;
        if end - begin != expected {
            return Err(bad(format!(
                "tensor {name}: {} bytes for shape {:?} of {dtype}, expected {expected}",
                end - begin,
                entry.shape
            )));
        }
        ranges.push((begin, end, name.clone()));
        let data = payload[begin as usize..end as usize].to_vec();
        let tensor = Tensor::from_bytes(dtype, entry.shape.clone(), data)?;
        let meta = TensorMeta {
            dtype,
            shape: entry.shape,
            byte_offset: begin,
            byte_length: end - begin,
        };
        out.push((name, meta, tensor));
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(bad(format!(
                "tensors {} and {} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AppError::io(path, e))
}

/// Opens the given shard files as one archive. Duplicate names are an error.
pub fn open_archive(paths: &[PathBuf]) -> Result<TensorArchive> {
    let mut archive = TensorArchive::default();
    for path in paths {
        for (name, meta, tensor) in parse_shard(path, &read(path)?)? {
            if archive.tensors.contains_key(&name) {
                return Err(AppError::format(path, format!("duplicate tensor {name}")));
            }
            archive.meta.insert(name.clone(), meta);
            archive.tensors.insert(name, tensor);
        }
        archive.shard_list.push(path.clone());
    }
    Ok(archive)
}

/// Opens a single shard, a sharded directory, or its index file.
pub fn open_path(path: &Path) -> Result<TensorArchive> {
    let index = if path.is_dir() {
        path.join(INDEX_FILE)
    } else if path.file_name().is_some_and(|n| n == INDEX_FILE) {
        path.to_path_buf()
    } else {
        return open_archive(&[path.to_path_buf()]);
    };
    let dir = index.parent().unwrap_or(Path::new("."));
    let map: BTreeMap<String, String> = serde_json::from_slice(&read(&index)?)
        .map_err(|e| AppError::format(&index, format!("malformed index: {e}")))?;
    let files: BTreeSet<&String> = map.values().collect();
    let shards: Vec<PathBuf> = files.iter().map(|f| dir.join(f)).collect();
    let archive = open_archive(&shards)?;
    for (name, file) in &map {
        if !archive.tensors.contains_key(name) {
            return Err(AppError::format(
                &index,
                format!("tensor {name} is not in {file}"),
            ));
        }
    }
    if let Some(extra) = archive.tensors.keys().find(|n| !map.contains_key(*n)) {
        return Err(AppError::format(
            &index,
            format!("tensor {extra} is missing from the index"),
        ));
    }
    Ok(archive)
}

pub fn read_tensors(path: &Path) -> Result<TensorMap> {
    Ok(open_path(path)?.tensors)
}

/// Serializes one shard with names in lexicographic order.
pub fn encode_shard<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let begin = payload.len() as u64;
        payload.extend_from_slice(t.bytes());
        let entry = HeaderEntry {
            dtype: t.dtype().name().into(),
            shape: t.shape().to_vec(),
            data_offsets: [begin, payload.len() as u64],
        };
        header.insert(name.as_str(), entry);
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Greedy packing in name order: a shard is closed when the next tensor
/// would push its payload past the budget.
pub fn plan_shards(tensors: &TensorMap, budget: u64) -> Result<Vec<Vec<&String>>> {
    if budget == 0 {
        return Err(AppError::Invalid("shard budget must be positive".into()));
    }
    let mut shards: Vec<Vec<&String>> = vec![Vec::new()];
    let mut used = 0u64;
    for (name, t) in tensors {
        let size = t.bytes().len() as u64;
        let current = shards.last_mut().expect("non-empty");
        if !current.is_empty() && used + size > budget {
            shards.push(vec![name]);
            used = size;
        } else {
            current.push(name);
            used += size;
        }
    }
    Ok(shards)
}

pub fn shard_name(i: usize, n: usize) -> String {
    format!("shard-{:05}-of-{:05}.bin", i + 1, n)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    f.write_all(bytes).map_err(|e| AppError::io(path, e))
}

/// Writes `tensors` to `out`. One shard becomes the file `out`; several
/// become a directory `out` holding the shards and [`INDEX_FILE`].
pub fn write_archive(out: &Path, tensors: &TensorMap, budget: u64) -> Result<Vec<PathBuf>> {
    let plan = plan_shards(tensors, budget)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    if plan.len() == 1 {
        if out.is_dir() {
            fs::remove_dir_all(out).map_err(|e| AppError::io(out, e))?;
        }
        write_file(
            out,
            &encode_shard(plan[0].iter().map(|n| (*n, &tensors[*n]))),
        )?;
        return Ok(vec![out.to_path_buf()]);
    }
    if out.is_file() {
        fs::remove_file(out).map_err(|e| AppError::io(out, e))?;
    }
    if out.is_dir() {
        fs::remove_dir_all(out).map_err(|e| AppError::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let mut index = BTreeMap::new();
    let mut paths = Vec::with_capacity(plan.len());
    for (i, names) in plan.iter().enumerate() {
        let file = shard_name(i, plan.len());
        let path = out.join(&file);
        write_file(
            &path,
            &encode_shard(names.iter().map(|n| (*n, &tensors[*n]))),
        )?;
        for n in names {
            index.insert(n.as_str(), file.clone());
        }
        paths.push(path);
    }
    let index_path = out.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    write_file(&index_path, &json)?;
    Ok(paths)
}
