//! On-disk formats: the binary checkpoint container, CSV matrices and the
//! JSON sidecars that carry provenance next to every output file.
//!
//! Checkpoint byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"TLCKPT\0\0"
//! 8       4     format version (u32, currently 1)
//! 12      8     manifest length M in bytes (u64)
//! 20      M     manifest, UTF-8 JSON
//! 20+M    ...   tensor payload: f64 little-endian, row-major, tensors
//!               concatenated in manifest order
//! ```
//!
//! The manifest is `{version, dtype: "f64le", config_hash, seed,
//! artifact_version, step, tensors: [{name, shape, offset}]}` where `offset`
//! counts f64 elements from the start of the payload.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::dense::DenseParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TLCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Identifies the run that produced a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Provenance {
            config_hash: config_hash.into(),
            seed,
            artifact_version: ARTIFACT_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: String,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<ArrayD<f64>>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.manifest
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Copies every tensor into `params`, which must have matching names and
    /// shapes.
    pub fn load_into(&self, params: &mut DenseParams) -> Result<()> {
        let mut targets = params.tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for (name, view) in targets.iter_mut() {
            let source = self
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
            if source.shape() != view.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    source.shape(),
                    view.shape()
                )));
            }
            view.assign(source);
        }
        Ok(())
    }
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    tensors: &[(String, ArrayViewD<'_, f64>)],
    provenance: &Provenance,
    step: usize,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        dtype: "f64le".into(),
        config_hash: provenance.config_hash.clone(),
        seed: provenance.seed,
        artifact_version: provenance.artifact_version.clone(),
        step,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut payload = Vec::with_capacity(offset * 8);
    for (_, t) in tensors {
        // iter() walks in logical (row-major) order regardless of memory layout
        for v in t.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
    if manifest.dtype != "f64le" {
        return Err(Error::Format(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Format(format!("tensor `{}` has a non-contiguous offset", entry.name)));
        }
        let count: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        input.read_exact(&mut bytes)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| Error::Format(e.to_string()))?,
        );
        expected_offset += count;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after the payload", rest.len())));
    }
    Ok(Checkpoint { manifest, tensors })
}

pub fn save_dense_checkpoint(path: &Path, params: &DenseParams, provenance: &Provenance, step: usize) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(file, &params.tensors(), provenance, step)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Quotes a CSV field when it contains a delimiter, quote or line break.
pub fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

pub fn csv_row<S: AsRef<str>>(fields: &[S]) -> String {
    let mut row = fields.iter().map(|f| csv_field(f.as_ref())).collect::<Vec<_>>().join(",");
    row.push('\n');
    row
}

/// Headerless CSV of the matrix rows; floats use the shortest round-trip
/// representation.
pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 12);
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let before = values.len();
        for field in line.split(',') {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?,
            );
        }
        let width = values.len() - before;
        if *cols.get_or_insert(width) != width {
            return Err(Error::Format(format!("line {} has {width} fields", i + 1)));
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), values).map_err(|e| Error::Format(e.to_string()))
}

/// Path of the sidecar belonging to `path`: `name.csv` → `name.csv.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `contents` to `path` and a pretty-printed JSON sidecar holding the
/// provenance merged with `extra` (which must be a JSON object or null).
pub fn write_with_sidecar(
    path: &Path,
    contents: &str,
    provenance: &Provenance,
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::write(path, contents)?;
    write_sidecar(path, provenance, extra)
}

pub fn write_sidecar(path: &Path, provenance: &Provenance, extra: serde_json::Value) -> Result<()> {
    let mut meta = serde_json::to_value(provenance)?;
    match extra {
        serde_json::Value::Object(map) => {
            meta.as_object_mut().expect("provenance is an object").extend(map);
        }
        serde_json::Value::Null => {}
        other => return Err(Error::Format(format!("sidecar extra must be an object, got {other}"))),
    }
    meta.as_object_mut()
        .expect("provenance is an object")
        .insert("file".into(), path.file_name().map(|n| n.to_string_lossy().into_owned()).into());
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Named half-open index range, for labelling blocks in heatmap tools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

pub fn layout_ranges(ranges: &[(&str, usize, usize)]) -> Vec<IndexRange> {
    ranges
        .iter()
        .map(|&(name, start, end)| IndexRange {
            name: name.to_string(),
            start,
            end,
        })
        .collect()
}

/// Matrix CSV plus a sidecar with `{N, rows, cols, layout}`.
pub fn export_matrix(
    path: &Path,
    matrix: &Array2<f64>,
    n: usize,
    row_layout: &[IndexRange],
    col_layout: &[IndexRange],
    provenance: &Provenance,
) -> Result<()> {
    let layout = serde_json::json!({
        "N": n,
        "rows": matrix.nrows(),
        "cols": matrix.ncols(),
        "layout": { "rows": row_layout, "cols": col_layout },
    });
    write_with_sidecar(path, &matrix_to_csv(matrix), provenance, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn provenance() -> Provenance {
        Provenance::new("abc123", 7)
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut params = DenseParams::zeros(2, 3, 5);
        for (i, (_, mut t)) in params.tensors_mut().into_iter().enumerate() {
            for (j, v) in t.iter_mut().enumerate() {
                *v = (i as f64 + 1.0) * 0.1 + j as f64 * 1e-3 - 0.7;
            }
        }
        params.embed[[1, 2]] = f64::MIN_POSITIVE;
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params.tensors(), &provenance(), 42).unwrap();
        assert_eq!(&bytes[..8], b"TLCKPT\0\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);

        let ck = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(ck.manifest.step, 42);
        assert_eq!(ck.manifest.config_hash, "abc123");
        assert_eq!(ck.manifest.tensors[0].name, "embed");
        assert_eq!(ck.manifest.tensors[0].shape, vec![5, 3]);
        let mut restored = DenseParams::zeros(2, 3, 5);
        ck.load_into(&mut restored).unwrap();
        for ((_, a), (_, b)) in params.tensors().iter().zip(restored.tensors().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let params = DenseParams::zeros(1, 2, 3);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params.tensors(), &provenance(), 0).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        let ck = read_checkpoint(bytes.as_slice()).unwrap();
        assert!(ck.load_into(&mut DenseParams::zeros(1, 3, 3)).is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = array![[1.0, -0.1, 1e-300], [f64::MAX, 0.0, 1.0 / 3.0]];
        let text = matrix_to_csv(&m);
        let back = matrix_from_csv(&text).unwrap();
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matrix_from_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_row(&["a", "b,c", "say \"hi\""]), "a,\"b,c\",\"say \"\"hi\"\"\"\n");
    }

    #[test]
    fn sidecar_merges_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let layout = layout_ranges(&[("first", 0, 1), ("second", 1, 2)]);
        export_matrix(&path, &array![[1.0, 2.0], [3.0, 4.0]], 1, &layout, &layout, &provenance()).unwrap();
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("w.csv.json")).unwrap()).unwrap();
        assert_eq!(meta["config_hash"], "abc123");
        assert_eq!(meta["seed"], 7);
        assert_eq!(meta["N"], 1);
        assert_eq!(meta["layout"]["rows"][1]["name"], "second");
        assert_eq!(meta["file"], "w.csv");
    }
}
