//! Embedding files.
//!
//! Binary layout (`.embf`, all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "EMBF"
//! version u32      1
//! dim     u32
//! count   u64
//! rows    count × dim × f32
//! ```
//!
//! Row `i` is keyed by line `i` of the sidecar `<stem>.keys.jsonl`, one
//! `{"video_id", "keyframe_index", "modality"}` object per line.
//!
//! Files ending in `.jsonl` are read as text, one
//! `{"video_id", "keyframe_index", "modality", "vector": [...]}` per line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingKey, EmbeddingSet, Modality, NORM_WARN_TOLERANCE};
use crate::scalar::Scalar;

pub const EMBF_MAGIC: &[u8; 4] = b"EMBF";
pub const EMBF_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// A loaded set plus the keys whose stored norm was off by more than 1e-3.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLoad<T> {
    pub set: EmbeddingSet<T>,
    pub renormalized: Vec<EmbeddingKey>,
}

#[derive(Serialize, Deserialize)]
struct KeyLine {
    video_id: String,
    keyframe_index: u32,
    modality: Modality,
}

#[derive(Deserialize)]
struct VectorLine {
    video_id: String,
    keyframe_index: u32,
    modality: Modality,
    vector: Vec<f64>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EmbeddingError {
    EmbeddingError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Sidecar key index for a binary embedding file.
pub fn keys_path(embf: &Path) -> PathBuf {
    embf.with_extension("keys.jsonl")
}

/// Writes `set` as `.embf` rows plus the sidecar key index, in key order.
pub fn save_embeddings<T: Scalar>(set: &EmbeddingSet<T>, path: &Path) -> Result<(), EmbeddingError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut rows = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let kpath = keys_path(path);
    let mut keys = BufWriter::new(File::create(&kpath).map_err(|e| io_err(&kpath, e))?);

    let dim = u32::try_from(set.dim()).map_err(|_| EmbeddingError::InvalidDim(set.dim()))?;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(EMBF_MAGIC);
    header.extend_from_slice(&EMBF_VERSION.to_le_bytes());
    header.extend_from_slice(&dim.to_le_bytes());
    header.extend_from_slice(&(set.len() as u64).to_le_bytes());
    rows.write_all(&header).map_err(|e| io_err(path, e))?;

    for (key, v) in set.iter() {
        for x in v {
            rows.write_all(&(x.as_f64() as f32).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
        let line = KeyLine {
            video_id: key.video_id.clone(),
            keyframe_index: key.keyframe_index,
            modality: key.modality,
        };
        serde_json::to_writer(&mut keys, &line).map_err(|e| io_err(&kpath, e))?;
        keys.write_all(b"\n").map_err(|e| io_err(&kpath, e))?;
    }
    rows.flush().map_err(|e| io_err(path, e))?;
    keys.flush().map_err(|e| io_err(&kpath, e))?;
    Ok(())
}

fn insert_checked<T: Scalar>(
    set: &mut EmbeddingSet<T>,
    renormalized: &mut Vec<EmbeddingKey>,
    key: EmbeddingKey,
    v: Vec<T>,
) -> Result<(), EmbeddingError> {
    let n = set.insert(key.clone(), v)?;
    if (n.as_f64() - 1.0).abs() > NORM_WARN_TOLERANCE {
        log::warn!("embedding {key} had norm {n}; normalized on load");
        renormalized.push(key);
    }
    Ok(())
}

/// Loads a binary (`.embf`) or text (`.jsonl`) embedding file.
///
/// Every vector is normalized on load. An empty file yields an empty set of
/// `expected_dim`, which must then be given.
pub fn load_embeddings<T: Scalar>(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<EmbeddingLoad<T>, EmbeddingError> {
    let is_text = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
    let len = fs::metadata(path).map_err(|e| io_err(path, e))?.len();
    if len == 0 {
        let dim = expected_dim.ok_or(EmbeddingError::UnknownDim)?;
        return Ok(EmbeddingLoad {
            set: EmbeddingSet::new(dim)?,
            renormalized: Vec::new(),
        });
    }
    if is_text {
        load_text(path, expected_dim)
    } else {
        load_binary(path, expected_dim)
    }
}

fn load_text<T: Scalar>(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<EmbeddingLoad<T>, EmbeddingError> {
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut set: Option<EmbeddingSet<T>> = expected_dim.map(EmbeddingSet::new).transpose()?;
    let mut renormalized = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VectorLine =
            serde_json::from_str(&line).map_err(|e| EmbeddingError::MissingKeyFields {
                line_no,
                reason: e.to_string(),
            })?;
        let s = match &mut set {
            Some(s) => s,
            None => set.insert(EmbeddingSet::new(rec.vector.len())?),
        };
        let key = EmbeddingKey::new(rec.video_id, rec.keyframe_index, rec.modality);
        let v = rec.vector.into_iter().map(T::lit).collect();
        insert_checked(s, &mut renormalized, key, v)?;
    }
    let set = match set {
        Some(s) => s,
        None => EmbeddingSet::new(expected_dim.ok_or(EmbeddingError::UnknownDim)?)?,
    };
    Ok(EmbeddingLoad { set, renormalized })
}

fn load_binary<T: Scalar>(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<EmbeddingLoad<T>, EmbeddingError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != EMBF_MAGIC {
        return Err(EmbeddingError::Corrupt(format!(
            "{}: missing EMBF header",
            path.display()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != EMBF_VERSION {
        return Err(EmbeddingError::Corrupt(format!("unsupported version {version}")));
    }
    let dim = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if let Some(want) = expected_dim {
        if want != dim {
            return Err(EmbeddingError::DimMismatch {
                expected: want,
                got: dim,
                key: None,
            });
        }
    }
    let payload = &bytes[HEADER_LEN..];
    let row_bytes = dim * 4;
    if row_bytes == 0 || payload.len() != count * row_bytes {
        let got = if count == 0 { 0 } else { payload.len() / 4 / count.max(1) };
        return Err(EmbeddingError::DimMismatch {
            expected: dim,
            got,
            key: None,
        });
    }

    let kpath = keys_path(path);
    let keys_reader = BufReader::new(File::open(&kpath).map_err(|e| io_err(&kpath, e))?);
    let mut keys = Vec::with_capacity(count);
    for (i, line) in keys_reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(&kpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let k: KeyLine =
            serde_json::from_str(&line).map_err(|e| EmbeddingError::MissingKeyFields {
                line_no: i + 1,
                reason: e.to_string(),
            })?;
        keys.push(EmbeddingKey::new(k.video_id, k.keyframe_index, k.modality));
    }
    if keys.len() != count {
        return Err(EmbeddingError::Corrupt(format!(
            "{} has {} keys for {count} rows",
            kpath.display(),
            keys.len()
        )));
    }

    let mut set = EmbeddingSet::new(dim)?;
    let mut renormalized = Vec::new();
    for (key, row) in keys.into_iter().zip(payload.chunks_exact(row_bytes)) {
        let v = row
            .chunks_exact(4)
            .map(|b| T::from_f32_lossless(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        insert_checked(&mut set, &mut renormalized, key, v)?;
    }
    Ok(EmbeddingLoad { set, renormalized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::norm;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn text_file_of_three_unit_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "e.jsonl",
            concat!(
                r#"{"video_id":"a","keyframe_index":0,"modality":"image","vector":[1,0,0,0]}"#, "\n",
                r#"{"video_id":"a","keyframe_index":0,"modality":"caption","vector":[0,1,0,0]}"#, "\n",
                r#"{"video_id":"b","keyframe_index":3,"modality":"image","vector":[0,0,0.6,0.8]}"#, "\n",
            ),
        );
        let load = load_embeddings::<f64>(&p, None).unwrap();
        assert_eq!(load.set.len(), 3);
        assert_eq!(load.set.dim(), 4);
        assert!(load.renormalized.is_empty());
    }

    #[test]
    fn mixed_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "e.jsonl",
            concat!(
                r#"{"video_id":"a","keyframe_index":0,"modality":"image","vector":[1,0,0,0]}"#, "\n",
                r#"{"video_id":"b","keyframe_index":0,"modality":"image","vector":[1,0,0,0,0]}"#, "\n",
            ),
        );
        assert!(matches!(
            load_embeddings::<f64>(&p, None),
            Err(EmbeddingError::DimMismatch { expected: 4, got: 5, .. })
        ));
    }

    #[test]
    fn empty_file_needs_expected_dim() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.embf", "");
        assert_eq!(load_embeddings::<f64>(&p, None), Err(EmbeddingError::UnknownDim));
        let load = load_embeddings::<f64>(&p, Some(8)).unwrap();
        assert!(load.set.is_empty());
        assert_eq!(load.set.dim(), 8);
    }

    #[test]
    fn off_norm_and_zero_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "e.jsonl",
            r#"{"video_id":"a","keyframe_index":0,"modality":"image","vector":[3,4]}"#,
        );
        let load = load_embeddings::<f64>(&p, None).unwrap();
        assert_eq!(load.renormalized.len(), 1);
        let p = write(
            dir.path(),
            "z.jsonl",
            r#"{"video_id":"a","keyframe_index":0,"modality":"image","vector":[0,0]}"#,
        );
        assert!(matches!(load_embeddings::<f64>(&p, None), Err(EmbeddingError::ZeroVector(Some(_)))));
        let p = write(dir.path(), "k.jsonl", r#"{"video_id":"a","vector":[1,0]}"#);
        assert!(matches!(
            load_embeddings::<f64>(&p, None),
            Err(EmbeddingError::MissingKeyFields { line_no: 1, .. })
        ));
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = EmbeddingSet::<f64>::new(3).unwrap();
        set.insert(EmbeddingKey::new("v1", 0, Modality::Image), vec![1.0, 2.0, 2.0]).unwrap();
        set.insert(EmbeddingKey::new("v1", 0, Modality::Caption), vec![0.0, -1.0, 0.0]).unwrap();
        let p = dir.path().join("sub/e.embf");
        save_embeddings(&set, &p).unwrap();
        assert!(keys_path(&p).ends_with("e.keys.jsonl"));
        let back = load_embeddings::<f64>(&p, Some(3)).unwrap().set;
        assert_eq!(back.len(), 2);
        for (k, v) in back.iter() {
            let orig = set.get(k).unwrap();
            assert!(orig.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-7));
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            load_embeddings::<f64>(&p, Some(4)),
            Err(EmbeddingError::DimMismatch { expected: 4, got: 3, .. })
        ));

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_embeddings::<f64>(&p, None), Err(EmbeddingError::DimMismatch { .. })));
        fs::write(&p, b"JUNKJUNKJUNKJUNKJUNKJUNK").unwrap();
        assert!(matches!(load_embeddings::<f64>(&p, None), Err(EmbeddingError::Corrupt(_))));
    }
}
