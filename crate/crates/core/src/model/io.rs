//! Knowledge-embedding files (`EMB1`) and model checkpoints (`CKPT1`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fallback_knowledge, ModelConfig, ModelState, Params};
use crate::alignment::Prototypes;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::projection::Rig;

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const CKPT_MAGIC: &[u8; 5] = b"CKPT1";
const CKPT_VERSION: u32 = 1;

const KIND_F32: u8 = 0;
const KIND_JSON: u8 = 1;

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Input(format!("{}: {}", path.display(), msg.into()))
}

fn f32_bytes(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn f32_matrix(path: &Path, rows: usize, cols: usize, bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() != rows * cols * 4 {
        return Err(bad(path, format!("{} bytes for a {rows}x{cols} f32 block", bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|_| bad(path, "non-finite value in f32 block"))
}

/// Sidecar holding class names in row order: `<file stem>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_embeddings(path: impl AsRef<Path>, names: &[String], m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    if names.len() != m.rows() {
        return Err(Error::Input(format!("{} names for {} embedding rows", names.len(), m.rows())));
    }
    let mut out = EMB_MAGIC.to_vec();
    out.extend((m.rows() as u32).to_le_bytes());
    out.extend((m.cols() as u32).to_le_bytes());
    out.extend(f32_bytes(m));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(names).expect("string list serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(Vec<String>, Matrix)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
        return Err(bad(path, "missing EMB1 header"));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let m = f32_matrix(path, k, d, &bytes[12..])?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let names: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Json { path: side.clone(), source: e })?;
    if names.len() != k {
        return Err(bad(&side, format!("{} class names for {k} rows", names.len())));
    }
    Ok((names, m))
}

/// Knowledge embeddings ordered like `classes`: read from `path` when given,
/// otherwise the per-name fallback.
pub fn load_knowledge(path: Option<&Path>, classes: &[String], d: usize) -> Result<Matrix> {
    let Some(path) = path else {
        return Ok(fallback_knowledge(classes, d));
    };
    let (names, m) = read_embeddings(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("knowledge file {}: {source}", path.display())),
        other => other,
    })?;
    if m.cols() != d {
        return Err(Error::Config(format!("knowledge embeddings are {}-d, model uses {d}", m.cols())));
    }
    let mut out = Matrix::zeros(classes.len(), d);
    for (i, c) in classes.iter().enumerate() {
        let row = names
            .iter()
            .position(|n| n == c)
            .ok_or_else(|| Error::Config(format!("class {c:?} missing from knowledge file {}", path.display())))?;
        out.row_mut(i).copy_from_slice(m.row(row));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rig: Option<Rig>,
}

/// A loaded checkpoint. `rig` records the cameras the model was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: ModelState,
    pub classes: Vec<String>,
    pub rig: Option<Rig>,
}

struct Section {
    name: String,
    kind: u8,
    rows: u32,
    cols: u32,
    payload: Vec<u8>,
}

/// Serializes the state; tensors are stored as f32.
pub fn checkpoint_bytes(state: &ModelState, classes: &[String], rig: Option<&Rig>) -> Vec<u8> {
    let mut sections: Vec<Section> = state
        .params
        .tensors()
        .into_iter()
        .map(|(n, m)| Section {
            name: n.to_string(),
            kind: KIND_F32,
            rows: m.rows() as u32,
            cols: m.cols() as u32,
            payload: f32_bytes(m),
        })
        .collect();
    let meta = CheckpointMeta {
        config: state.config.clone(),
        classes: classes.to_vec(),
        rig: rig.copied(),
    };
    sections.push(Section {
        name: "meta".into(),
        kind: KIND_JSON,
        rows: 0,
        cols: 0,
        payload: serde_json::to_vec(&meta).expect("meta serializes"),
    });
    if let Some(p) = &state.prototypes {
        let weights = Matrix::row_vector(&p.weights);
        for (name, m) in [("prototypes", &p.vectors), ("prototype_weights", &weights)] {
            sections.push(Section {
                name: name.into(),
                kind: KIND_F32,
                rows: m.rows() as u32,
                cols: m.cols() as u32,
                payload: f32_bytes(m),
            });
        }
    }

    let mut out = CKPT_MAGIC.to_vec();
    out.extend(CKPT_VERSION.to_le_bytes());
    out.extend((sections.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for s in &sections {
        out.extend((s.name.len() as u16).to_le_bytes());
        out.extend(s.name.as_bytes());
        out.push(s.kind);
        out.extend(s.rows.to_le_bytes());
        out.extend(s.cols.to_le_bytes());
        out.extend(offset.to_le_bytes());
        out.extend((s.payload.len() as u64).to_le_bytes());
        offset += s.payload.len() as u64;
    }
    for s in &sections {
        out.extend(&s.payload);
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &ModelState, classes: &[String], rig: Option<&Rig>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(state, classes, rig)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(5)? != CKPT_MAGIC {
        return Err(bad(path, "missing CKPT1 header"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(bad(path, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad(path, "section name is not utf-8"))?;
        let kind = r.take(1)?[0];
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let offset = r.u64()? as usize;
        let size = r.u64()? as usize;
        table.push((name, kind, rows, cols, offset, size));
    }
    let payload = &bytes[r.pos..];
    let section = |name: &str| -> Result<Option<(u8, usize, usize, &[u8])>> {
        let Some((_, kind, rows, cols, off, size)) = table.iter().find(|t| t.0 == name) else {
            return Ok(None);
        };
        let end = off.checked_add(*size).filter(|&e| e <= payload.len());
        let end = end.ok_or_else(|| bad(path, format!("section {name} out of bounds")))?;
        Ok(Some((*kind, *rows, *cols, &payload[*off..end])))
    };
    let matrix = |name: &str| -> Result<Option<Matrix>> {
        match section(name)? {
            Some((KIND_F32, rows, cols, data)) => f32_matrix(path, rows, cols, data).map(Some),
            Some(_) => Err(bad(path, format!("section {name} is not a matrix"))),
            None => Ok(None),
        }
    };

    let meta: CheckpointMeta = match section("meta")? {
        Some((KIND_JSON, _, _, data)) => serde_json::from_slice(data).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?,
        _ => return Err(bad(path, "missing meta section")),
    };
    let mut params: Params = ModelState::init(
        meta.config.clone(),
        Matrix::zeros(meta.config.classes, meta.config.d),
        0,
    )?
    .params;
    for (name, m) in params.tensors_mut() {
        let loaded = matrix(name)?.ok_or_else(|| bad(path, format!("missing tensor {name}")))?;
        if loaded.shape() != m.shape() {
            return Err(bad(path, format!("tensor {name} is {:?}, expected {:?}", loaded.shape(), m.shape())));
        }
        *m = loaded;
    }
    let prototypes = match (matrix("prototypes")?, matrix("prototype_weights")?) {
        (Some(vectors), Some(w)) => Some(Prototypes::from_parts(vectors, w.into_vec())?),
        (None, None) => None,
        _ => return Err(bad(path, "incomplete prototype sections")),
    };
    let state = ModelState {
        config: meta.config,
        params,
        prototypes,
    };
    Ok(Checkpoint {
        state,
        classes: meta.classes,
        rig: meta.rig,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_round(m: &Matrix) -> Matrix {
        let data = m.data().iter().map(|&v| v as f32 as f64).collect();
        Matrix::from_vec(m.rows(), m.cols(), data).unwrap()
    }

    #[test]
    fn embeddings_roundtrip_and_reorder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.emb");
        let names = vec!["cube".to_string(), "cone".to_string()];
        let m = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.25, 2.0]]).unwrap();
        write_embeddings(&path, &names, &m).unwrap();
        let (n2, m2) = read_embeddings(&path).unwrap();
        assert_eq!(n2, names);
        assert_eq!(m2, m);
        let swapped = load_knowledge(Some(&path), &["cone".into(), "cube".into()], 2).unwrap();
        assert_eq!(swapped.row(0), m.row(1));
        assert!(matches!(load_knowledge(Some(&path), &["torus".into()], 2), Err(Error::Config(_))));
        assert!(matches!(load_knowledge(Some(&path), &names, 3), Err(Error::Config(_))));
        let missing = dir.path().join("none.emb");
        assert!(matches!(load_knowledge(Some(&missing), &names, 2), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let mut state = ModelState::init(ModelConfig::new(3), fallback_knowledge(&names, 64), 3).unwrap();
        let vectors = Matrix::from_vec(3, 64, (0..192).map(|i| i as f64 / 192.0).collect()).unwrap();
        state.prototypes = Some(Prototypes::from_parts(vectors, vec![1.0, 0.0, 2.5]).unwrap());
        let rig = Rig { views: 6, distance: 2.5 };
        let bytes = checkpoint_bytes(&state, &names, Some(&rig));
        assert_eq!(&bytes[..5], b"CKPT1");
        let ck = parse_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.classes, names);
        assert_eq!(ck.rig, Some(rig));
        let loaded = ck.state;
        assert_eq!(loaded.config, state.config);
        for ((n, a), (_, b)) in loaded.params.tensors().into_iter().zip(state.params.tensors()) {
            assert_eq!(*a, f32_round(b), "{n}");
        }
        let p = loaded.prototypes.unwrap();
        assert_eq!(p.weights, vec![1.0, 0.0, 2.5]);
        assert!(!p.is_valid(1));
        assert_eq!(checkpoint_bytes(&state, &names, Some(&rig)), bytes);
        let bare = parse_checkpoint(&checkpoint_bytes(&state, &names, None), Path::new("mem")).unwrap();
        assert_eq!(bare.rig, None);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        assert!(parse_checkpoint(b"CKPT2", Path::new("mem")).is_err());
    }
}
