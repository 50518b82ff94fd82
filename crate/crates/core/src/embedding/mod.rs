//! Unit-norm image and caption embeddings keyed by keyframe.
//!
//! Both modalities share one [`EmbeddingSet`]; a key names the video, the
//! keyframe index and the modality. Vectors are normalized on insertion, so
//! every vector handed to the analysis code has unit length.

mod service;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{AuditDataset, Role};
use crate::scalar::{norm, Scalar};

pub use service::{
    check_service_dim, fetch_captions, fetch_embeddings, CaptionItem, CaptionItemResult,
    EmbedItem, EmbedItemResult, EmbedService, FetchError, FetchOptions, FetchOutcome,
    HttpEmbedClient, ItemKind, KeyframeImage, ServiceError, ServiceHealth, EMBED_SERVICE_URL_ENV,
};
pub use store::{keys_path, load_embeddings, save_embeddings, EmbeddingLoad, EMBF_MAGIC, EMBF_VERSION};

/// Vectors shorter than this carry no direction and are rejected.
pub const MIN_NORM: f64 = 1e-8;
/// Loaded vectors whose norm is further than this from 1 are reported.
pub const NORM_WARN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("zero-norm vector{}", .0.as_ref().map(|k| format!(" for {k}")).unwrap_or_default())]
    ZeroVector(Option<EmbeddingKey>),
    #[error("dimension mismatch: expected {expected}, got {got}{}", .key.as_ref().map(|k| format!(" for {k}")).unwrap_or_default())]
    DimMismatch {
        expected: usize,
        got: usize,
        key: Option<EmbeddingKey>,
    },
    #[error("embedding dimension must be >= 2, got {0}")]
    InvalidDim(usize),
    #[error("dimension unknown: empty input and no expected dimension")]
    UnknownDim,
    #[error("line {line_no}: missing or malformed key fields: {reason}")]
    MissingKeyFields { line_no: usize, reason: String },
    #[error("corrupt embedding file: {0}")]
    Corrupt(String),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Caption,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Caption];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Caption => "caption",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(Modality::Image),
            "caption" => Ok(Modality::Caption),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EmbeddingKey {
    pub video_id: String,
    pub keyframe_index: u32,
    pub modality: Modality,
}

impl EmbeddingKey {
    pub fn new(video_id: impl Into<String>, keyframe_index: u32, modality: Modality) -> Self {
        Self {
            video_id: video_id.into(),
            keyframe_index,
            modality,
        }
    }
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}#{}", self.video_id, self.keyframe_index, self.modality)
    }
}

/// A generated caption for one keyframe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub keyframe_index: u32,
    pub text: String,
}

impl CaptionRecord {
    pub fn new(video_id: impl Into<String>, keyframe_index: u32, text: impl Into<String>) -> Option<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return None;
        }
        Some(Self {
            video_id: video_id.into(),
            keyframe_index,
            text,
        })
    }
}

/// Returns `v / ‖v‖₂`.
pub fn normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>, EmbeddingError> {
    let n = norm(v);
    if !(n.as_f64() >= MIN_NORM) || !n.is_finite() {
        return Err(EmbeddingError::ZeroVector(None));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    dim: usize,
    entries: BTreeMap<EmbeddingKey, Vec<T>>,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim < 2 {
            return Err(EmbeddingError::InvalidDim(dim));
        }
        Ok(Self {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &EmbeddingKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &EmbeddingKey) -> Option<&[T]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    /// Normalizes and stores `v`; returns the norm the input had.
    pub fn insert(&mut self, key: EmbeddingKey, v: Vec<T>) -> Result<T, EmbeddingError> {
        if v.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                got: v.len(),
                key: Some(key),
            });
        }
        let n = norm(&v);
        let unit = normalize(&v).map_err(|_| EmbeddingError::ZeroVector(Some(key.clone())))?;
        self.entries.insert(key, unit);
        Ok(n)
    }

    /// Entries in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&EmbeddingKey, &[T])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// All entries of one video, in `(keyframe_index, modality)` order.
    pub fn for_video<'a>(&'a self, video_id: &'a str) -> impl Iterator<Item = (&'a EmbeddingKey, &'a [T])> + 'a {
        let start = EmbeddingKey::new(video_id, 0, Modality::Image);
        self.entries
            .range(start..)
            .take_while(move |(k, _)| k.video_id == video_id)
            .map(|(k, v)| (k, v.as_slice()))
    }

    /// Merges `other` into `self`; entries of `other` win on key collisions.
    pub fn extend(&mut self, other: EmbeddingSet<T>) -> Result<(), EmbeddingError> {
        if other.dim != self.dim && !other.is_empty() {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                got: other.dim,
                key: None,
            });
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingSet<U> {
        EmbeddingSet {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| U::lit(x.as_f64())).collect()))
                .collect(),
        }
    }
}

/// How keyframe vectors of one video become analysis points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One point per keyframe.
    #[default]
    PerKeyframe,
    /// One re-normalized mean vector per video occurrence.
    VideoMean,
}

/// Provenance of one analysis point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointLabel {
    pub video_id: String,
    pub keyframe_index: u32,
    pub modality: Modality,
    pub domain: String,
    pub group: Role,
    pub depth: u32,
}

/// Points of one (dataset, modality, role) selection with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedCloud<T> {
    pub points: Vec<Vec<T>>,
    pub labels: Vec<PointLabel>,
    /// Videos of the group that have no vector of the requested modality.
    pub missing: Vec<String>,
}

impl<T> GroupedCloud<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Collects the vectors of `modality` for every video of the given role.
///
/// Videos are visited in chain order; a video occurring in several chains
/// contributes once per occurrence.
pub fn group_points<T: Scalar>(
    dataset: &AuditDataset,
    emb: &EmbeddingSet<T>,
    modality: Modality,
    group: Role,
    pooling: Pooling,
) -> GroupedCloud<T> {
    let mut cloud = GroupedCloud {
        points: Vec::new(),
        labels: Vec::new(),
        missing: Vec::new(),
    };
    for video in dataset.videos().filter(|v| v.role == group) {
        let hits: Vec<(&EmbeddingKey, &[T])> = emb
            .for_video(&video.video_id)
            .filter(|(k, _)| k.modality == modality)
            .collect();
        if hits.is_empty() {
            cloud.missing.push(video.video_id.clone());
            continue;
        }
        let label = |keyframe_index: u32| PointLabel {
            video_id: video.video_id.clone(),
            keyframe_index,
            modality,
            domain: video.domain_label.clone(),
            group,
            depth: video.depth,
        };
        match pooling {
            Pooling::PerKeyframe => {
                for (k, v) in hits {
                    cloud.points.push(v.to_vec());
                    cloud.labels.push(label(k.keyframe_index));
                }
            }
            Pooling::VideoMean => {
                let mut mean = vec![T::zero(); emb.dim()];
                for (_, v) in &hits {
                    for (m, x) in mean.iter_mut().zip(v.iter()) {
                        *m = *m + *x;
                    }
                }
                match normalize(&mean) {
                    Ok(unit) => {
                        cloud.points.push(unit);
                        cloud.labels.push(label(hits[0].0.keyframe_index));
                    }
                    Err(_) => cloud.missing.push(video.video_id.clone()),
                }
            }
        }
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{RecommendationChain, VideoRecord};

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(&[3.0f64, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = normalize(&[0.6f64, 0.8]).unwrap();
        assert_eq!(normalize(&u).unwrap(), u);
        assert_eq!(normalize(&[0.0f64, 0.0]), Err(EmbeddingError::ZeroVector(None)));
        assert!(normalize(&[1e-9f64, 0.0]).is_err());
        let f = normalize(&[3.0f32, 4.0]).unwrap();
        assert!((f[0] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn insert_normalizes_and_checks_dim() {
        let mut s = EmbeddingSet::<f64>::new(2).unwrap();
        let n = s.insert(EmbeddingKey::new("v", 0, Modality::Image), vec![0.0, 2.0]).unwrap();
        assert_eq!(n, 2.0);
        assert_eq!(s.get(&EmbeddingKey::new("v", 0, Modality::Image)), Some(&[0.0, 1.0][..]));
        assert!(matches!(
            s.insert(EmbeddingKey::new("v", 1, Modality::Image), vec![1.0, 2.0, 3.0]),
            Err(EmbeddingError::DimMismatch { expected: 2, got: 3, .. })
        ));
        assert!(matches!(
            s.insert(EmbeddingKey::new("v", 1, Modality::Image), vec![0.0, 0.0]),
            Err(EmbeddingError::ZeroVector(Some(_)))
        ));
        assert_eq!(EmbeddingSet::<f64>::new(1), Err(EmbeddingError::InvalidDim(1)));
    }

    #[test]
    fn key_display_and_modality_parse() {
        assert_eq!(EmbeddingKey::new("abc", 4, Modality::Caption).to_string(), "abc#4#caption");
        assert_eq!("image".parse::<Modality>(), Ok(Modality::Image));
        assert!("audio".parse::<Modality>().is_err());
        assert!(CaptionRecord::new("v", 0, "  \n").is_none());
        assert!(CaptionRecord::new("v", 0, "a ship").is_some());
    }

    fn dataset() -> AuditDataset {
        let chain = |seed: &str, recs: &[&str], s: &str| {
            RecommendationChain::new(
                VideoRecord::seed(seed, "d"),
                recs.iter()
                    .enumerate()
                    .map(|(i, r)| VideoRecord::recommended(*r, "d", seed, i as u32 + 1))
                    .collect(),
                s,
            )
            .unwrap()
        };
        AuditDataset::new("d", 2, vec![chain("s1", &["r1", "r2"], "a"), chain("s2", &["r3"], "b")]).unwrap()
    }

    fn image_set() -> EmbeddingSet<f64> {
        let mut e = EmbeddingSet::new(2).unwrap();
        for (i, id) in ["s1", "s2", "r1", "r2", "r3"].iter().enumerate() {
            e.insert(EmbeddingKey::new(*id, 0, Modality::Image), vec![1.0, i as f64]).unwrap();
            e.insert(EmbeddingKey::new(*id, 5, Modality::Image), vec![i as f64, 1.0]).unwrap();
        }
        e
    }

    #[test]
    fn group_points_filters_by_role() {
        let d = dataset();
        let e = image_set();
        let seeds = group_points(&d, &e, Modality::Image, Role::Seed, Pooling::PerKeyframe);
        assert_eq!(seeds.len(), 4);
        assert!(seeds.labels.iter().all(|l| l.video_id.starts_with('s') && l.depth == 0));
        let recs = group_points(&d, &e, Modality::Image, Role::Recommended, Pooling::PerKeyframe);
        assert_eq!(recs.len(), 6);
        assert_eq!(recs.labels[1].keyframe_index, 5);
        assert_eq!(seeds.len() + recs.len(), e.len());

        let pooled = group_points(&d, &e, Modality::Image, Role::Recommended, Pooling::VideoMean);
        assert_eq!(pooled.len(), 3);
        for p in &pooled.points {
            assert!((norm(p) - 1.0).abs() < 1e-12);
        }

        let captions = group_points(&d, &e, Modality::Caption, Role::Seed, Pooling::PerKeyframe);
        assert!(captions.is_empty());
        assert_eq!(captions.missing, vec!["s1", "s2"]);
    }
}
