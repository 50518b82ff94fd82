//! Client side of the caption/embedding sidecar.
//!
//! Wire contract (JSON over HTTP):
//!
//! * `GET  /v1/health`  → `{"mode": "stub"|"model", "model_id": str, "dim": int}`
//! * `POST /v1/embed`   `{"items": [{"id", "kind": "image"|"text", "payload"}]}`
//!   → `{"items": [{"id", "vector": [f], "dim"} | {"id", "error"}]}`
//! * `POST /v1/caption` `{"items": [{"id", "payload"}]}`
//!   → `{"items": [{"id", "caption"} | {"id", "error"}]}`
//!
//! Image payloads are base64-encoded file bytes. Per-item errors never fail a
//! batch. HTTP 503 and transport failures are retried; 400 and 413 are not.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CaptionRecord, EmbeddingError, EmbeddingKey, EmbeddingSet, Modality};
use crate::scalar::Scalar;
use crate::workers::bounded_map;

pub const EMBED_SERVICE_URL_ENV: &str = "EMBED_SERVICE_URL";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ServiceError {
    /// Worth retrying: connection failures, timeouts, HTTP 503.
    #[error("transient service error: {0}")]
    Transient(String),
    #[error("service rejected request: {0}")]
    Rejected(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum FetchError {
    #[error("embedding service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("{} item(s) failed", .failed.len())]
    PartialFailure { failed: Vec<EmbeddingKey> },
    #[error("service dimension {got} does not match expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid fetch options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceHealth {
    pub mode: String,
    #[serde(default)]
    pub model_id: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedItem {
    pub id: String,
    pub kind: ItemKind,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbedItemResult {
    Vector {
        id: String,
        vector: Vec<f64>,
        dim: usize,
    },
    Error {
        id: String,
        error: String,
    },
}

impl EmbedItemResult {
    pub fn id(&self) -> &str {
        match self {
            EmbedItemResult::Vector { id, .. } | EmbedItemResult::Error { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionItem {
    pub id: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaptionItemResult {
    Caption { id: String, caption: String },
    Error { id: String, error: String },
}

#[derive(Serialize, Deserialize)]
struct Batch<I> {
    items: Vec<I>,
}

/// Anything that speaks the sidecar contract.
pub trait EmbedService: Sync {
    fn health(&self) -> Result<ServiceHealth, ServiceError>;
    fn embed(&self, items: &[EmbedItem]) -> Result<Vec<EmbedItemResult>, ServiceError>;
    fn caption(&self, items: &[CaptionItem]) -> Result<Vec<CaptionItemResult>, ServiceError>;
}

/// Blocking HTTP client for the sidecar.
pub struct HttpEmbedClient {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpEmbedClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    /// Client for `$EMBED_SERVICE_URL`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var(EMBED_SERVICE_URL_ENV)
            .ok()
            .filter(|u| !u.trim().is_empty())
            .map(|u| Self::new(u, Duration::from_secs(120)))
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn map_err(e: ureq::Error) -> ServiceError {
        match e {
            ureq::Error::StatusCode(503) => ServiceError::Transient("HTTP 503".into()),
            ureq::Error::StatusCode(code) if code >= 500 => {
                ServiceError::Transient(format!("HTTP {code}"))
            }
            ureq::Error::StatusCode(code) => ServiceError::Rejected(format!("HTTP {code}")),
            other => ServiceError::Transient(other.to_string()),
        }
    }

    fn post<I: Serialize, O: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        items: &[I],
    ) -> Result<Vec<O>, ServiceError> {
        #[derive(Serialize)]
        struct Req<'a, I> {
            items: &'a [I],
        }
        let mut resp = self
            .agent
            .post(&format!("{}{path}", self.base_url))
            .send_json(Req { items })
            .map_err(Self::map_err)?;
        let batch: Batch<O> = resp
            .body_mut()
            .read_json()
            .map_err(|e| ServiceError::Rejected(format!("bad response body: {e}")))?;
        Ok(batch.items)
    }
}

impl EmbedService for HttpEmbedClient {
    fn health(&self) -> Result<ServiceHealth, ServiceError> {
        let mut resp = self
            .agent
            .get(&format!("{}/v1/health", self.base_url))
            .call()
            .map_err(Self::map_err)?;
        resp.body_mut()
            .read_json()
            .map_err(|e| ServiceError::Rejected(format!("bad health body: {e}")))
    }

    fn embed(&self, items: &[EmbedItem]) -> Result<Vec<EmbedItemResult>, ServiceError> {
        self.post("/v1/embed", items)
    }

    fn caption(&self, items: &[CaptionItem]) -> Result<Vec<CaptionItemResult>, ServiceError> {
        self.post("/v1/caption", items)
    }
}

/// A keyframe image on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyframeImage {
    pub video_id: String,
    pub keyframe_index: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub batch_size: usize,
    /// Retries after the first attempt, for transient errors only.
    pub retries: usize,
    pub retry_backoff: Duration,
    /// Maximum batches in flight.
    pub concurrency: usize,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            retries: 3,
            retry_backoff: Duration::from_millis(250),
            concurrency: 4,
        }
    }
}

/// Outcome of a fetch: successful entries plus failed keys with reasons.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchOutcome<T> {
    pub set: EmbeddingSet<T>,
    pub failed: Vec<(EmbeddingKey, String)>,
}

impl<T> FetchOutcome<T> {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }

    /// The set if nothing failed, else [`FetchError::PartialFailure`].
    pub fn into_complete(self) -> Result<EmbeddingSet<T>, FetchError> {
        if self.failed.is_empty() {
            Ok(self.set)
        } else {
            Err(FetchError::PartialFailure {
                failed: self.failed.into_iter().map(|(k, _)| k).collect(),
            })
        }
    }
}

fn with_retries<O>(
    opts: &FetchOptions,
    mut call: impl FnMut() -> Result<O, ServiceError>,
) -> Result<O, ServiceError> {
    let mut attempt = 0;
    loop {
        match call() {
            Err(ServiceError::Transient(msg)) if attempt < opts.retries => {
                log::warn!("transient service error (attempt {}): {msg}", attempt + 1);
                attempt += 1;
                if !opts.retry_backoff.is_zero() {
                    thread::sleep(opts.retry_backoff * attempt as u32);
                }
            }
            other => return other,
        }
    }
}

fn check_options(opts: &FetchOptions) -> Result<(), FetchError> {
    if opts.batch_size < 1 {
        return Err(FetchError::InvalidOptions("batch_size must be >= 1".into()));
    }
    Ok(())
}

/// Fails with [`FetchError::DimMismatch`] unless the service reports `expected`.
pub fn check_service_dim<S: EmbedService>(
    service: &S,
    expected: usize,
) -> Result<ServiceHealth, FetchError> {
    let health = service
        .health()
        .map_err(|e| FetchError::ServiceUnavailable(e.to_string()))?;
    if health.dim != expected {
        return Err(FetchError::DimMismatch {
            expected,
            got: health.dim,
        });
    }
    Ok(health)
}

fn encode_image(path: &PathBuf) -> Result<String, String> {
    fs::read(path)
        .map(|b| base64::engine::general_purpose::STANDARD.encode(b))
        .map_err(|e| format!("cannot read {}: {e}", path.display()))
}

/// Embeds captions (text encoder) and keyframe images (vision encoder).
///
/// Items are sent in batches of `batch_size` with at most `concurrency`
/// batches in flight. Responses are normalized on insertion. A vector of the
/// wrong length is a contract violation and aborts the fetch.
pub fn fetch_embeddings<T: Scalar, S: EmbedService>(
    service: &S,
    dim: usize,
    captions: &[CaptionRecord],
    images: &[KeyframeImage],
    opts: &FetchOptions,
) -> Result<FetchOutcome<T>, FetchError> {
    check_options(opts)?;
    let mut set = EmbeddingSet::new(dim)?;
    let mut failed = Vec::new();
    let mut work: Vec<(EmbeddingKey, EmbedItem)> = Vec::new();

    for c in captions {
        let key = EmbeddingKey::new(c.video_id.clone(), c.keyframe_index, Modality::Caption);
        work.push((
            key.clone(),
            EmbedItem {
                id: key.to_string(),
                kind: ItemKind::Text,
                payload: c.text.clone(),
            },
        ));
    }
    for img in images {
        let key = EmbeddingKey::new(img.video_id.clone(), img.keyframe_index, Modality::Image);
        match encode_image(&img.path) {
            Ok(payload) => work.push((
                key.clone(),
                EmbedItem {
                    id: key.to_string(),
                    kind: ItemKind::Image,
                    payload,
                },
            )),
            Err(reason) => failed.push((key, reason)),
        }
    }
    if work.is_empty() {
        return Ok(FetchOutcome { set, failed });
    }

    let batches: Vec<&[(EmbeddingKey, EmbedItem)]> = work.chunks(opts.batch_size).collect();
    let responses = bounded_map(&batches, opts.concurrency, |batch| {
        let items: Vec<EmbedItem> = batch.iter().map(|(_, i)| i.clone()).collect();
        with_retries(opts, || service.embed(&items))
    });

    let mut transport_failures = 0usize;
    let mut last_transport = String::new();
    for (batch, response) in batches.iter().zip(responses) {
        match response {
            Ok(results) => {
                let mut by_id: HashMap<&str, &EmbedItemResult> =
                    results.iter().map(|r| (r.id(), r)).collect();
                for (key, item) in batch.iter() {
                    match by_id.remove(item.id.as_str()) {
                        Some(EmbedItemResult::Vector { vector, .. }) => {
                            if vector.len() != dim {
                                return Err(FetchError::DimMismatch {
                                    expected: dim,
                                    got: vector.len(),
                                });
                            }
                            let v = vector.iter().map(|&x| T::lit(x)).collect();
                            if let Err(e) = set.insert(key.clone(), v) {
                                failed.push((key.clone(), e.to_string()));
                            }
                        }
                        Some(EmbedItemResult::Error { error, .. }) => {
                            failed.push((key.clone(), error.clone()))
                        }
                        None => failed.push((key.clone(), "missing from response".into())),
                    }
                }
            }
            Err(e) => {
                if matches!(e, ServiceError::Transient(_)) {
                    transport_failures += 1;
                    last_transport = e.to_string();
                }
                for (key, _) in batch.iter() {
                    failed.push((key.clone(), e.to_string()));
                }
            }
        }
    }
    if transport_failures == batches.len() {
        return Err(FetchError::ServiceUnavailable(last_transport));
    }
    failed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(FetchOutcome { set, failed })
}

/// Captions for keyframe images; failed items are returned with reasons.
pub fn fetch_captions<S: EmbedService>(
    service: &S,
    images: &[KeyframeImage],
    opts: &FetchOptions,
) -> Result<(Vec<CaptionRecord>, Vec<(EmbeddingKey, String)>), FetchError> {
    check_options(opts)?;
    let mut failed = Vec::new();
    let mut work = Vec::new();
    for img in images {
        let key = EmbeddingKey::new(img.video_id.clone(), img.keyframe_index, Modality::Caption);
        match encode_image(&img.path) {
            Ok(payload) => work.push((
                img,
                CaptionItem {
                    id: key.to_string(),
                    payload,
                },
            )),
            Err(reason) => failed.push((key, reason)),
        }
    }
    let mut captions = Vec::new();
    if work.is_empty() {
        return Ok((captions, failed));
    }
    let batches: Vec<&[(&KeyframeImage, CaptionItem)]> = work.chunks(opts.batch_size).collect();
    let responses = bounded_map(&batches, opts.concurrency, |batch| {
        let items: Vec<CaptionItem> = batch.iter().map(|(_, i)| i.clone()).collect();
        with_retries(opts, || service.caption(&items))
    });
    let mut transport_failures = 0usize;
    let mut last_transport = String::new();
    for (batch, response) in batches.iter().zip(responses) {
        let key_of = |img: &KeyframeImage| {
            EmbeddingKey::new(img.video_id.clone(), img.keyframe_index, Modality::Caption)
        };
        match response {
            Ok(results) => {
                let by_id: HashMap<&str, &CaptionItemResult> = results
                    .iter()
                    .map(|r| match r {
                        CaptionItemResult::Caption { id, .. } | CaptionItemResult::Error { id, .. } => {
                            (id.as_str(), r)
                        }
                    })
                    .collect();
                for (img, item) in batch.iter() {
                    match by_id.get(item.id.as_str()) {
                        Some(CaptionItemResult::Caption { caption, .. }) => {
                            match CaptionRecord::new(img.video_id.clone(), img.keyframe_index, caption.clone()) {
                                Some(rec) => captions.push(rec),
                                None => failed.push((key_of(img), "empty caption".into())),
                            }
                        }
                        Some(CaptionItemResult::Error { error, .. }) => {
                            failed.push((key_of(img), error.clone()))
                        }
                        None => failed.push((key_of(img), "missing from response".into())),
                    }
                }
            }
            Err(e) => {
                if matches!(e, ServiceError::Transient(_)) {
                    transport_failures += 1;
                    last_transport = e.to_string();
                }
                for (img, _) in batch.iter() {
                    failed.push((key_of(img), e.to_string()));
                }
            }
        }
    }
    if transport_failures == batches.len() {
        return Err(FetchError::ServiceUnavailable(last_transport));
    }
    Ok((captions, failed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::derive_seed;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// In-process stand-in following the stub-mode contract.
    struct Stub {
        dim: usize,
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl Stub {
        fn new(dim: usize) -> Self {
            Self { dim, calls: AtomicUsize::new(0), fail_first: 0 }
        }

        fn vector(&self, payload: &str) -> Vec<f64> {
            let s = derive_seed(7, payload);
            (0..self.dim)
                .map(|i| ((derive_seed(s, &i.to_string()) % 2001) as f64 / 1000.0) - 1.0)
                .collect()
        }
    }

    impl EmbedService for Stub {
        fn health(&self) -> Result<ServiceHealth, ServiceError> {
            Ok(ServiceHealth { mode: "stub".into(), model_id: "stub".into(), dim: self.dim })
        }
        fn embed(&self, items: &[EmbedItem]) -> Result<Vec<EmbedItemResult>, ServiceError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(ServiceError::Transient("HTTP 503".into()));
            }
            Ok(items
                .iter()
                .map(|i| {
                    if i.payload == "BAD" {
                        EmbedItemResult::Error { id: i.id.clone(), error: "undecodable".into() }
                    } else {
                        EmbedItemResult::Vector { id: i.id.clone(), vector: self.vector(&i.payload), dim: self.dim }
                    }
                })
                .collect())
        }
        fn caption(&self, items: &[CaptionItem]) -> Result<Vec<CaptionItemResult>, ServiceError> {
            Ok(items
                .iter()
                .map(|i| CaptionItemResult::Caption { id: i.id.clone(), caption: format!("frame {}", &i.payload[..4.min(i.payload.len())]) })
                .collect())
        }
    }

    fn opts() -> FetchOptions {
        FetchOptions { batch_size: 2, retries: 2, retry_backoff: Duration::ZERO, concurrency: 2 }
    }

    fn image(dir: &std::path::Path, id: &str, bytes: &[u8]) -> KeyframeImage {
        let path = dir.join(format!("{id}.png"));
        fs::write(&path, bytes).unwrap();
        KeyframeImage { video_id: id.into(), keyframe_index: 0, path }
    }

    #[test]
    fn zero_items_make_no_calls() {
        let stub = Stub::new(8);
        let out = fetch_embeddings::<f64, _>(&stub, 8, &[], &[], &opts()).unwrap();
        assert!(out.set.is_empty());
        assert_eq!(stub.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn caption_and_image_of_one_keyframe_give_two_entries() {
        let dir = tempfile::tempdir().unwrap();
        let stub = Stub::new(8);
        let caps = vec![CaptionRecord::new("v", 0, "a ship at sea").unwrap()];
        let imgs = vec![image(dir.path(), "v", b"\x89PNG fake")];
        let a = fetch_embeddings::<f64, _>(&stub, 8, &caps, &imgs, &opts()).unwrap();
        assert!(a.is_complete());
        let keys: Vec<_> = a.set.iter().map(|(k, _)| k.clone()).collect();
        assert_eq!(keys, vec![EmbeddingKey::new("v", 0, Modality::Image), EmbeddingKey::new("v", 0, Modality::Caption)]);
        let b = fetch_embeddings::<f64, _>(&stub, 8, &caps, &imgs, &opts()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transient_errors_are_retried() {
        let stub = Stub { fail_first: 2, ..Stub::new(4) };
        let caps = vec![CaptionRecord::new("v", 0, "x").unwrap()];
        let out = fetch_embeddings::<f64, _>(&stub, 4, &caps, &[], &opts()).unwrap();
        assert!(out.is_complete());
        let stub = Stub { fail_first: 10, ..Stub::new(4) };
        assert!(matches!(
            fetch_embeddings::<f64, _>(&stub, 4, &caps, &[], &opts()),
            Err(FetchError::ServiceUnavailable(_))
        ));
    }

    #[test]
    fn item_errors_become_partial_failure() {
        let stub = Stub::new(4);
        let caps = vec![
            CaptionRecord::new("a", 0, "fine").unwrap(),
            CaptionRecord::new("b", 0, "BAD").unwrap(),
            CaptionRecord::new("c", 0, "also fine").unwrap(),
        ];
        let out = fetch_embeddings::<f64, _>(&stub, 4, &caps, &[], &opts()).unwrap();
        assert_eq!(out.set.len(), 2);
        assert_eq!(out.failed.len(), 1);
        match out.into_complete() {
            Err(FetchError::PartialFailure { failed }) => {
                assert_eq!(failed, vec![EmbeddingKey::new("b", 0, Modality::Caption)])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dim_mismatch_is_detected() {
        let stub = Stub::new(6);
        assert_eq!(check_service_dim(&stub, 8), Err(FetchError::DimMismatch { expected: 8, got: 6 }));
        let caps = vec![CaptionRecord::new("a", 0, "x").unwrap()];
        assert!(matches!(
            fetch_embeddings::<f64, _>(&stub, 8, &caps, &[], &opts()),
            Err(FetchError::DimMismatch { expected: 8, got: 6 })
        ));
    }

    #[test]
    fn captions_are_fetched_and_unreadable_images_reported() {
        let dir = tempfile::tempdir().unwrap();
        let stub = Stub::new(4);
        let mut imgs = vec![image(dir.path(), "a", b"abcdefgh")];
        imgs.push(KeyframeImage { video_id: "gone".into(), keyframe_index: 2, path: dir.path().join("missing.png") });
        let (caps, failed) = fetch_captions(&stub, &imgs, &opts()).unwrap();
        assert_eq!(caps.len(), 1);
        assert!(!caps[0].text.trim().is_empty());
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].0.video_id, "gone");
    }

    #[test]
    fn wire_formats() {
        let item = EmbedItem { id: "v#0#image".into(), kind: ItemKind::Image, payload: "AAAA".into() };
        assert_eq!(
            serde_json::to_string(&item).unwrap(),
            r#"{"id":"v#0#image","kind":"image","payload":"AAAA"}"#
        );
        let ok: EmbedItemResult = serde_json::from_str(r#"{"id":"a","vector":[1.0,0.0],"dim":2}"#).unwrap();
        assert!(matches!(ok, EmbedItemResult::Vector { dim: 2, .. }));
        let err: EmbedItemResult = serde_json::from_str(r#"{"id":"a","error":"bad image"}"#).unwrap();
        assert!(matches!(err, EmbedItemResult::Error { .. }));
        let h: ServiceHealth = serde_json::from_str(r#"{"mode":"stub","dim":64}"#).unwrap();
        assert_eq!(h.dim, 64);
    }
}
