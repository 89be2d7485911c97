//! Calibration JSONL, schema and model JSON, salience tables, projector files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crane_core::calibration::{count_sets, CalibrationExample, SetTag};
use crane_core::dtype::DType;
use crane_core::gsp::{GspProjector, GspProjectorSet};
use crane_core::micro::MicroConfig;
use crane_core::schema::{Layer, ModelSchema};
use crane_core::taylor::{Row, SalienceTable};
use crane_core::{Tensor, TensorMap};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::archive::{read_tensors, write_archive};
use crate::error::{AppError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// One JSON record per non-blank line. Errors name the 1-based line.
pub fn parse_calibration(path: &Path, text: &str) -> Result<Vec<CalibrationExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |reason: String| AppError::format(path, format!("line {}: {reason}", i + 1));
        let ex: CalibrationExample = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        ex.validate().map_err(at)?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(AppError::format(path, "no calibration records"));
    }
    Ok(out)
}

pub fn load_calibration(path: &Path) -> Result<Vec<CalibrationExample>> {
    let examples = parse_calibration(path, &read_text(path)?)?;
    let c = count_sets(&examples);
    log::info!(
        "{}: {} R / {} A / {} F examples",
        path.display(),
        c.r,
        c.a,
        c.f
    );
    Ok(examples)
}

/// Examples of one set, in file order.
pub fn select(examples: Vec<CalibrationExample>, set: SetTag) -> Vec<CalibrationExample> {
    examples.into_iter().filter(|e| e.set == set).collect()
}

/// A preset name or a schema JSON file.
pub fn load_schema(spec: &str) -> Result<ModelSchema> {
    let schema = match ModelSchema::preset(spec) {
        Some(s) => s,
        None => read_json(Path::new(spec))?,
    };
    schema.validate()?;
    Ok(schema)
}

pub fn load_micro_config(path: &Path) -> Result<MicroConfig> {
    let cfg: MicroConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_salience(path: &Path) -> Result<SalienceTable> {
    let mut table: SalienceTable = read_json(path)?;
    table.sort();
    table.validate()?;
    Ok(table)
}

/// Kind × layer grid: one row per table row, one column per layer.
pub fn salience_csv(table: &SalienceTable) -> String {
    let layers: BTreeSet<Layer> = table.entries.iter().map(|e| e.layer).collect();
    let mut rows: Vec<Row> = Vec::new();
    for e in &table.entries {
        if !rows.contains(&e.row) {
            rows.push(e.row);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["kind".to_string()];
    header.extend(layers.iter().map(|l| l.to_string()));
    w.write_record(&header).expect("in-memory write");
    for row in rows {
        let mut rec = vec![row.name().to_string()];
        rec.extend(
            layers
                .iter()
                .map(|&l| table.get(row, l).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn write_salience(path: &Path, table: &SalienceTable) -> Result<PathBuf> {
    write_json(path, table)?;
    let csv_path = path.with_extension("csv");
    write_bytes(&csv_path, salience_csv(table).as_bytes())?;
    Ok(csv_path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSidecar {
    pub tau: f64,
    pub k: f64,
    pub rho: usize,
    pub identity_spaces: BTreeSet<String>,
    pub ranks: BTreeMap<String, usize>,
}

pub fn projector_tensors(set: &GspProjectorSet) -> Result<TensorMap> {
    let mut out = TensorMap::new();
    for (space, p) in &set.projectors {
        let r = p.rank();
        let mut v = vec![0.0; p.dim * r];
        for (j, col) in p.v.iter().enumerate() {
            for (i, x) in col.iter().enumerate() {
                v[i * r + j] = *x;
            }
        }
        out.insert(
            format!("{space}.V"),
            Tensor::from_f64(DType::F64, vec![p.dim, r], &v)?,
        );
        out.insert(
            format!("{space}.sigma"),
            Tensor::from_f64(DType::F64, vec![r], &p.sigma)?,
        );
        out.insert(
            format!("{space}.w"),
            Tensor::from_f64(DType::F64, vec![r], &p.w)?,
        );
    }
    Ok(out)
}

pub fn write_projectors(
    path: &Path,
    set: &GspProjectorSet,
    rho: usize,
    budget: u64,
) -> Result<Vec<PathBuf>> {
    let mut paths = write_archive(path, &projector_tensors(set)?, budget)?;
    let sidecar = ProjectorSidecar {
        tau: set.tau,
        k: set.k,
        rho,
        identity_spaces: set.identity_spaces.clone(),
        ranks: set
            .projectors
            .iter()
            .map(|(s, p)| (s.clone(), p.rank()))
            .collect(),
    };
    let side = sibling(path, ".json");
    write_json(&side, &sidecar)?;
    paths.push(side);
    Ok(paths)
}

pub fn read_projectors(path: &Path) -> Result<(GspProjectorSet, ProjectorSidecar)> {
    let side_path = sibling(path, ".json");
    let side: ProjectorSidecar = read_json(&side_path)?;
    let tensors = read_tensors(path)?;
    let bad = |reason: String| AppError::format(path, reason);
    let mut set = GspProjectorSet {
        tau: side.tau,
        k: side.k,
        identity_spaces: side.identity_spaces.clone(),
        ..Default::default()
    };
    for (space, &rank) in &side.ranks {
        let get = |suffix: &str| {
            tensors
                .get(&format!("{space}.{suffix}"))
                .ok_or_else(|| bad(format!("missing tensor {space}.{suffix}")))
        };
        let (v, sigma, w) = (get("V")?, get("sigma")?, get("w")?);
        if v.shape().len() != 2
            || v.shape()[1] != rank
            || sigma.shape() != [rank]
            || w.shape() != [rank]
        {
            return Err(bad(format!("projector {space} does not have rank {rank}")));
        }
        let dim = v.shape()[0];
        let flat = v.to_f64();
        let cols = (0..rank)
            .map(|j| (0..dim).map(|i| flat[i * rank + j]).collect())
            .collect();
        set.projectors.insert(
            space.clone(),
            GspProjector {
                space: space.clone(),
                dim,
                v: cols,
                sigma: sigma.to_f64(),
                w: w.to_f64(),
                tau: side.tau,
                k: side.k,
            },
        );
    }
    if tensors.len() != 3 * side.ranks.len() {
        return Err(bad("archive holds tensors not listed in the sidecar".into()));
    }
    set.validate()?;
    Ok((set, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_lines() {
        let p = Path::new("c.jsonl");
        let ok = "{\"tokens\":[1,2,3],\"mask\":[0,1,1],\"set\":\"R\"}\n\n{\"tokens\":[4],\"mask\":[0],\"set\":\"F\"}\n";
        let ex = parse_calibration(p, ok).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].set, SetTag::F);
        let long = "{\"tokens\":[1,2,3],\"mask\":[0,1,1],\"set\":\"R\"}\n{\"tokens\":[1],\"mask\":[0,1],\"set\":\"A\"}";
        let err = parse_calibration(p, long).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_calibration(p, "{\"tokens\":[1,2],\"mask\":[0,0],\"set\":\"R\"}").is_err());
        assert!(parse_calibration(p, "{\"tokens\":[1,2],\"mask\":[0,2],\"set\":\"F\"}").is_err());
        assert!(parse_calibration(p, "\n").is_err());
    }

    #[test]
    fn csv_grid_has_anchor_row() {
        let table: SalienceTable = serde_json::from_str(
            r#"{"entries":[{"kind":"anchor","layer":0,"value":1.0},{"kind":"anchor","layer":1,"value":1.0},
            {"kind":"q_proj","layer":1,"value":0.5}],"anchor_norms":[]}"#,
        )
        .unwrap();
        let mut t = table;
        t.sort();
        let csv = salience_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,0,1");
        assert!(lines.contains(&"anchor,1,1"));
        assert!(lines.contains(&"q_proj,,0.5"));
    }
}
