//! Config-driven audit run: collect, keyframes, embed, analyze, project.
//!
//! Every stage records its input and output hashes in `manifest.json` under
//! the output directory. A stage whose cache key (stage name, its config
//! section and input hashes) matches the previous manifest, and whose outputs
//! are still on disk unchanged, is skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{compare_domains, AnalysisConfig};
use crate::chain::{dataset_stats, parse_dataset, serialize_dataset, AuditDataset, DatasetStats, ParseOptions, Role};
use crate::collector::{
    collect_dataset, read_seeds, Collection, ReplayProvider, SyntheticGraph, SyntheticGraphParams,
    VideoDescriptor, WalkConfig,
};
use crate::embedding::{
    check_service_dim, fetch_captions, fetch_embeddings, group_points, load_embeddings, save_embeddings,
    EmbedService, EmbeddingSet, FetchOptions, HttpEmbedClient, KeyframeImage, Modality, Pooling,
};
use crate::hashing::{file_sha256, sha256_hex};
use crate::keyframe::{
    compression_ratio, extract_frames_root, frame_paths, read_keyframes_jsonl, write_keyframes_jsonl,
    KeyframeConfig, KeyframeSet,
};
use crate::projection::{emit_plot_data, group_hulls, import_coords, pca_project, PlotLayer};
use crate::workers::default_workers;
use crate::Real;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".drift-audit.lock";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const STATS_JSON: &str = "dataset_stats.json";
pub const KEYFRAMES_FILE: &str = "keyframes.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.embf";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const PLOTS_DIR: &str = "plots";
pub const CHAINS_DIR: &str = "chains";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Collect,
    Keyframes,
    Embed,
    Analyze,
    Project,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Collect, Stage::Keyframes, Stage::Embed, Stage::Analyze, Stage::Project];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Keyframes => "keyframes",
            Stage::Embed => "embed",
            Stage::Analyze => "analyze",
            Stage::Project => "project",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One config problem, addressed by its dotted key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub field: String,
    pub message: String,
}

impl Finding {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config ({} finding(s)): {}", .0.len(), .0.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<Finding>),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("output directory {0} is locked by another run (remove the lock file if stale)")]
    Locked(PathBuf),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Stage { .. } | PipelineError::Locked(_) => EXIT_STAGE,
        }
    }

    fn stage(stage: Stage, e: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageFlags {
    pub collect: bool,
    pub keyframes: bool,
    pub embed: bool,
    pub analyze: bool,
    pub project: bool,
}

impl Default for StageFlags {
    fn default() -> Self {
        Self {
            collect: false,
            keyframes: false,
            embed: true,
            analyze: true,
            project: true,
        }
    }
}

impl StageFlags {
    pub fn enabled(&self, s: Stage) -> bool {
        match s {
            Stage::Collect => self.collect,
            Stage::Keyframes => self.keyframes,
            Stage::Embed => self.embed,
            Stage::Analyze => self.analyze,
            Stage::Project => self.project,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: PathBuf,
    /// Defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetRefs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<DatasetRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<DatasetRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Synthetic,
    JsonlReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_topics: usize,
    pub videos_per_topic: usize,
    pub embed_dim: usize,
    pub topic_spread: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            n_topics: 64,
            videos_per_topic: 40,
            embed_dim: 32,
            topic_spread: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectDomain {
    pub name: String,
    /// Synthetic provider only.
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Recorded dataset to replay (jsonl-replay provider).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    pub provider: ProviderKind,
    #[serde(default = "default_depth")]
    pub depth: u32,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    /// Replay provider: restricts the replayed seeds to those listed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds_file: Option<PathBuf>,
    /// Synthetic provider: draw every seed from this topic instead of
    /// round-robin over topics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_topic: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticSection,
    /// First entry becomes dataset A, second dataset B.
    pub domains: Vec<CollectDomain>,
}

fn default_depth() -> u32 {
    10
}

fn default_n_seeds() -> usize {
    20
}

impl CollectConfig {
    pub fn graph_params(&self, d: &CollectDomain) -> SyntheticGraphParams {
        SyntheticGraphParams {
            n_topics: self.synthetic.n_topics,
            videos_per_topic: self.synthetic.videos_per_topic,
            drift: d.drift,
            embed_dim: self.synthetic.embed_dim,
            topic_spread: self.synthetic.topic_spread,
            rng_seed: d.rng_seed,
            namespace: format!("{}-", d.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames_root: Option<PathBuf>,
    pub lambda: f64,
    pub min_gap: usize,
    pub smoothing_window: usize,
}

impl Default for KeyframeSection {
    fn default() -> Self {
        let k = KeyframeConfig::<f64>::default();
        Self {
            frames_root: None,
            lambda: k.lambda,
            min_gap: k.min_gap,
            smoothing_window: k.smoothing_window,
        }
    }
}

impl KeyframeSection {
    pub fn params(&self) -> KeyframeConfig<Real> {
        KeyframeConfig {
            lambda: self.lambda,
            min_gap: self.min_gap,
            smoothing_window: self.smoothing_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Precomputed `.embf` or `.jsonl` file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Base URL of the caption/embedding service.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    /// Rebuild ground-truth vectors from the synthetic collect settings.
    pub synthetic_ground_truth: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub batch_size: usize,
    pub retries: usize,
    pub timeout_secs: u64,
    pub concurrency: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        let f = FetchOptions::default();
        Self {
            file: None,
            service: None,
            synthetic_ground_truth: false,
            dim: None,
            batch_size: f.batch_size,
            retries: f.retries,
            timeout_secs: 30,
            concurrency: f.concurrency,
        }
    }
}

impl EmbeddingSection {
    fn sources(&self) -> Vec<&'static str> {
        let mut s = Vec::new();
        if self.file.is_some() {
            s.push("embeddings.file");
        }
        if self.service.is_some() {
            s.push("embeddings.service");
        }
        if self.synthetic_ground_truth {
            s.push("embeddings.synthetic_ground_truth");
        }
        s
    }

    pub fn fetch_options(&self) -> FetchOptions {
        FetchOptions {
            batch_size: self.batch_size,
            retries: self.retries,
            concurrency: self.concurrency,
            ..FetchOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectMethod {
    #[default]
    Pca,
    Import,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub method: ProjectMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coords_file: Option<PathBuf>,
    /// Also draw hulls around recommended groups.
    pub rec_hulls: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub stages: StageFlags,
    #[serde(default)]
    pub datasets: DatasetRefs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collect: Option<CollectConfig>,
    #[serde(default)]
    pub keyframes: KeyframeSection,
    #[serde(default)]
    pub embeddings: EmbeddingSection,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub projection: ProjectionSection,
    /// Relative paths resolve against this directory (the config file's).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| PipelineError::Config(vec![Finding::new("<config>", e.to_string())]))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(vec![Finding::new("<config>", format!("{}: {e}", path.display()))]))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Hash of the canonical JSON form of the config.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn dataset_name(r: &DatasetRef) -> String {
    r.name.clone().unwrap_or_else(|| {
        r.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

/// Every problem with `cfg`, in a stable order. Empty means runnable.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<Finding> {
    let mut out = Vec::new();
    let st = &cfg.stages;

    if cfg.output_dir.as_os_str().is_empty() {
        out.push(Finding::new("output_dir", "must be set"));
    } else {
        let dir = cfg.output();
        if dir.exists() && !dir.is_dir() {
            out.push(Finding::new("output_dir", format!("{} exists and is not a directory", dir.display())));
        } else if let Some(existing) = dir.ancestors().find(|a| a.exists()) {
            if fs::metadata(existing).map(|m| m.permissions().readonly()).unwrap_or(true) {
                out.push(Finding::new("output_dir", format!("{} is not writable", existing.display())));
            }
        }
    }

    let needs_data = st.keyframes || st.embed || st.analyze || st.project;
    if st.collect {
        match &cfg.collect {
            None => out.push(Finding::new("collect", "stage enabled but the [collect] section is missing")),
            Some(c) => {
                if c.depth < 1 {
                    out.push(Finding::new(
                        "collect.depth",
                        "must be >= 1: a chain holds at least one recommendation after its seed",
                    ));
                }
                if c.domains.is_empty() || c.domains.len() > 2 {
                    out.push(Finding::new("collect.domains", format!("need 1 or 2 domains, got {}", c.domains.len())));
                }
                let names: BTreeSet<&str> = c.domains.iter().map(|d| d.name.as_str()).collect();
                if names.len() != c.domains.len() {
                    out.push(Finding::new("collect.domains", "domain names must be distinct"));
                }
                for (i, d) in c.domains.iter().enumerate() {
                    let f = format!("collect.domains[{i}]");
                    if d.name.is_empty() || d.name.contains(['/', '\\']) {
                        out.push(Finding::new(format!("{f}.name"), "must be a non-empty file-name-safe label"));
                    }
                    match c.provider {
                        ProviderKind::Synthetic => {
                            if let Err(e) = c.graph_params(d).validate() {
                                out.push(Finding::new(f.clone(), e.to_string()));
                            }
                            if d.replay.is_some() {
                                out.push(Finding::new(format!("{f}.replay"), "only used by the jsonl-replay provider"));
                            }
                        }
                        ProviderKind::JsonlReplay => match &d.replay {
                            None => out.push(Finding::new(format!("{f}.replay"), "required by the jsonl-replay provider")),
                            Some(p) if !cfg.resolve(p).is_file() => {
                                out.push(Finding::new(format!("{f}.replay"), format!("{} does not exist", cfg.resolve(p).display())))
                            }
                            _ => {}
                        },
                    }
                }
                if c.n_seeds < 1 {
                    out.push(Finding::new("collect.n_seeds", "must be >= 1"));
                }
                if c.provider == ProviderKind::Synthetic {
                    if let Some(t) = c.seed_topic {
                        if t >= c.synthetic.n_topics {
                            out.push(Finding::new("collect.seed_topic", format!("must be < n_topics ({})", c.synthetic.n_topics)));
                        }
                    }
                    if c.n_seeds > c.synthetic.videos_per_topic * c.synthetic.n_topics {
                        out.push(Finding::new("collect.n_seeds", "exceeds the number of synthetic videos"));
                    }
                }
                if let Some(p) = &c.seeds_file {
                    if !cfg.resolve(p).is_file() {
                        out.push(Finding::new("collect.seeds_file", format!("{} does not exist", cfg.resolve(p).display())));
                    }
                }
                if cfg.datasets.a.is_some() || cfg.datasets.b.is_some() {
                    out.push(Finding::new("datasets", "datasets are produced by the collect stage; remove [datasets] or disable collect"));
                }
            }
        }
    } else if needs_data && cfg.datasets.a.is_none() {
        out.push(Finding::new("datasets.a", "required unless the collect stage is enabled"));
    }
    for (slot, r) in [("a", &cfg.datasets.a), ("b", &cfg.datasets.b)] {
        let Some(r) = r else { continue };
        if !cfg.resolve(&r.path).is_file() {
            out.push(Finding::new(format!("datasets.{slot}.path"), format!("{} does not exist", cfg.resolve(&r.path).display())));
        }
        if r.max_depth == Some(0) {
            out.push(Finding::new(
                format!("datasets.{slot}.max_depth"),
                "must be >= 1: a chain holds at least one recommendation after its seed",
            ));
        }
    }
    if let (Some(a), Some(b)) = (&cfg.datasets.a, &cfg.datasets.b) {
        if dataset_name(a) == dataset_name(b) {
            out.push(Finding::new("datasets.b.name", "must differ from dataset A's name"));
        }
    }

    if st.keyframes {
        match &cfg.keyframes.frames_root {
            None => out.push(Finding::new("keyframes.frames_root", "required by the keyframes stage")),
            Some(p) if !cfg.resolve(p).is_dir() => {
                out.push(Finding::new("keyframes.frames_root", format!("{} is not a directory", cfg.resolve(p).display())))
            }
            _ => {}
        }
        if let Err(e) = cfg.keyframes.params().validate() {
            out.push(Finding::new("keyframes", e.to_string()));
        }
    }

    if st.embed {
        let sources = cfg.embeddings.sources();
        match sources.len() {
            0 => out.push(Finding::new(
                "embeddings",
                "exactly one source required: set one of file, service or synthetic_ground_truth",
            )),
            1 => {}
            _ => out.push(Finding::new(
                "embeddings",
                format!("exactly one source allowed, found {}", sources.join(" and ")),
            )),
        }
        let e = &cfg.embeddings;
        if let Some(p) = &e.file {
            if !cfg.resolve(p).is_file() {
                out.push(Finding::new("embeddings.file", format!("{} does not exist", cfg.resolve(p).display())));
            }
        }
        if let Some(u) = &e.service {
            if !(u.starts_with("http://") || u.starts_with("https://")) {
                out.push(Finding::new("embeddings.service", format!("not an http(s) URL: {u:?}")));
            }
            if !st.keyframes {
                out.push(Finding::new("embeddings.service", "needs keyframe images; enable the keyframes stage"));
            }
            if e.batch_size < 1 {
                out.push(Finding::new("embeddings.batch_size", "must be >= 1"));
            }
        }
        if e.synthetic_ground_truth
            && !(st.collect && cfg.collect.as_ref().is_some_and(|c| c.provider == ProviderKind::Synthetic))
        {
            out.push(Finding::new(
                "embeddings.synthetic_ground_truth",
                "requires the collect stage with the synthetic provider",
            ));
        }
        if e.dim.is_some_and(|d| d < 2) {
            out.push(Finding::new("embeddings.dim", "must be >= 2"));
        }
    }

    if st.analyze {
        if let Err(e) = cfg.analysis.validate() {
            out.push(Finding::new("analysis", e.to_string()));
        }
    }
    if st.project && cfg.projection.method == ProjectMethod::Import {
        match &cfg.projection.coords_file {
            None => out.push(Finding::new("projection.coords_file", "required when method = \"import\"")),
            Some(p) if !cfg.resolve(p).is_file() => {
                out.push(Finding::new("projection.coords_file", format!("{} does not exist", cfg.resolve(p).display())))
            }
            _ => {}
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Hash of the stage name, its config section and its inputs.
    pub cache_key: String,
    pub inputs: BTreeMap<String, String>,
    /// Output paths relative to the output directory, with their hashes.
    pub outputs: BTreeMap<String, String>,
    pub rng_seeds: BTreeMap<String, u64>,
    pub duration_ms: u64,
    /// True when the stage finished with gaps (truncated chains, missing
    /// vectors, empty report cells).
    pub partial: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }

    fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")
    }

    fn read(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }
}

/// Result of a successful (possibly partial) run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub report: Option<PathBuf>,
}

impl RunSummary {
    pub fn partial(&self) -> bool {
        self.manifest.stages.iter().any(|r| r.partial)
    }

    pub fn exit_code(&self) -> i32 {
        if self.partial() {
            EXIT_PARTIAL
        } else {
            EXIT_OK
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.to_path_buf())),
            Err(e) => Err(PipelineError::Config(vec![Finding::new("output_dir", format!("cannot create lock file: {e}"))])),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Stages

/// What a stage produced, before hashing.
#[derive(Default)]
struct StageResult {
    outputs: Vec<PathBuf>,
    rng_seeds: BTreeMap<String, u64>,
    partial: bool,
    notes: Vec<String>,
}

/// Paths threaded between stages.
#[derive(Debug, Clone, Default)]
struct Artifacts {
    datasets: Vec<(PathBuf, ParseOptions)>,
    keyframes: Option<PathBuf>,
    embeddings: Option<PathBuf>,
}

fn hash_file(p: &Path) -> Result<String, String> {
    file_sha256(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn load_dataset(path: &Path, opts: &ParseOptions) -> Result<AuditDataset, String> {
    let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_dataset(BufReader::new(f), opts).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn write_dataset(path: &Path, d: &AuditDataset) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    let f = fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut w = BufWriter::new(f);
    serialize_dataset(d, &mut w).map_err(|e| e.to_string())?;
    w.flush().map_err(|e| e.to_string())
}

fn load_datasets(a: &Artifacts) -> Result<Vec<AuditDataset>, String> {
    a.datasets.iter().map(|(p, o)| load_dataset(p, o)).collect()
}

/// Runs the collector for one domain of the collect section.
pub fn collect_domain(cfg: &CollectConfig, domain: &CollectDomain, base: &Path) -> Result<Collection, String> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    match cfg.provider {
        ProviderKind::Synthetic => {
            let graph = SyntheticGraph::build(cfg.graph_params(domain)).map_err(|e| e.to_string())?;
            let seeds = match cfg.seed_topic {
                Some(t) => graph.seeds_from_topic(t, cfg.n_seeds),
                None => graph.seeds_round_robin(cfg.n_seeds),
            };
            let mut walk = WalkConfig::new(seeds);
            walk.depth = cfg.depth;
            collect_dataset(&graph, &walk, &domain.name).map_err(|e| e.to_string())
        }
        ProviderKind::JsonlReplay => {
            let path = resolve(domain.replay.as_deref().ok_or("replay path missing")?);
            let recorded = load_dataset(&path, &ParseOptions::named(domain.name.clone()))?;
            let mut seeds = ReplayProvider::seeds(&recorded);
            if let Some(sf) = &cfg.seeds_file {
                let sf = resolve(sf);
                let f = fs::File::open(&sf).map_err(|e| format!("{}: {e}", sf.display()))?;
                let wanted: Vec<VideoDescriptor> = read_seeds(BufReader::new(f)).map_err(|e| e.to_string())?;
                let ids: BTreeSet<&str> = wanted.iter().map(|s| s.video_id.as_str()).collect();
                seeds.retain(|s| ids.contains(s.video_id.as_str()));
            }
            seeds.truncate(cfg.n_seeds);
            let provider = ReplayProvider::new(&recorded);
            let mut walk = WalkConfig::new(seeds);
            walk.depth = cfg.depth;
            collect_dataset(&provider, &walk, &domain.name).map_err(|e| e.to_string())
        }
    }
}

/// Ground-truth vectors of every synthetic domain, for the given datasets.
pub fn synthetic_ground_truth(cfg: &CollectConfig, datasets: &[AuditDataset]) -> Result<EmbeddingSet<Real>, String> {
    let mut set = EmbeddingSet::new(cfg.synthetic.embed_dim).map_err(|e| e.to_string())?;
    for domain in &cfg.domains {
        let graph = SyntheticGraph::build(cfg.graph_params(domain)).map_err(|e| e.to_string())?;
        for d in datasets {
            let part = graph.ground_truth::<Real>(d).map_err(|e| e.to_string())?;
            for (k, v) in part.iter() {
                if !set.contains(k) {
                    set.insert(k.clone(), v.to_vec()).map_err(|e| e.to_string())?;
                }
            }
        }
    }
    Ok(set)
}

fn run_collect(cfg: &PipelineConfig, out: &Path) -> Result<StageResult, String> {
    let c = cfg.collect.as_ref().ok_or("missing [collect] section")?;
    let mut res = StageResult::default();
    for domain in &c.domains {
        let col = collect_domain(c, domain, &cfg.base_dir)?;
        res.rng_seeds.insert(format!("collect/{}", domain.name), domain.rng_seed);
        if col.is_partial() {
            res.partial = true;
        }
        for t in &col.truncated {
            res.notes.push(format!("{}: chain from seed {t} truncated", domain.name));
        }
        for (s, e) in &col.failures {
            res.notes.push(format!("{}: seed {s} failed: {e}", domain.name));
        }
        let path = out.join(CHAINS_DIR).join(format!("{}.jsonl", domain.name));
        write_dataset(&path, &col.dataset)?;
        res.outputs.push(path);
    }
    Ok(res)
}

fn unique_video_ids(datasets: &[AuditDataset]) -> Vec<String> {
    let ids: BTreeSet<String> = datasets.iter().flat_map(|d| d.videos().map(|v| v.video_id.clone())).collect();
    ids.into_iter().collect()
}

fn run_keyframes(cfg: &PipelineConfig, out: &Path, art: &Artifacts) -> Result<StageResult, String> {
    let root = cfg.resolve(cfg.keyframes.frames_root.as_deref().ok_or("frames_root missing")?);
    let datasets = load_datasets(art)?;
    let mut res = StageResult::default();
    let (present, missing): (Vec<String>, Vec<String>) =
        unique_video_ids(&datasets).into_iter().partition(|id| root.join(id).is_dir());
    if !missing.is_empty() {
        res.partial = true;
        res.notes.push(format!("{} videos have no frame directory under {}", missing.len(), root.display()));
    }
    let sets = extract_frames_root(&root, &present, &cfg.keyframes.params(), default_workers()).map_err(|e| e.to_string())?;
    let path = out.join(KEYFRAMES_FILE);
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| e.to_string())?);
    write_keyframes_jsonl(&sets, &mut w).map_err(|e| e.to_string())?;
    w.flush().map_err(|e| e.to_string())?;
    res.outputs.push(path);
    Ok(res)
}

fn read_keyframes(path: &Path) -> Result<BTreeMap<String, KeyframeSet>, String> {
    let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    read_keyframes_jsonl(BufReader::new(f)).map_err(|e| e.to_string())
}

/// Embeds the keyframes of every dataset video through the service.
pub fn embed_via_service<S: EmbedService>(
    service: &S,
    dim: Option<usize>,
    frames_root: &Path,
    keyframes: &BTreeMap<String, KeyframeSet>,
    video_ids: &[String],
    opts: &FetchOptions,
) -> Result<(EmbeddingSet<Real>, Vec<String>, Vec<(String, u32, String)>), String> {
    let dim = match dim {
        Some(d) => check_service_dim(service, d).map_err(|e| e.to_string())?.dim,
        None => service.health().map_err(|e| e.to_string())?.dim,
    };
    let mut images = Vec::new();
    for id in video_ids {
        let Some(set) = keyframes.get(id) else { continue };
        let paths = frame_paths(&frames_root.join(id)).map_err(|e| e.to_string())?;
        for &i in &set.indices {
            let path = paths.get(i).ok_or_else(|| format!("{id}: keyframe {i} has no frame file"))?;
            images.push(KeyframeImage {
                video_id: id.clone(),
                keyframe_index: i as u32,
                path: path.clone(),
            });
        }
    }
    let (captions, cap_failed) = fetch_captions(service, &images, opts).map_err(|e| e.to_string())?;
    let outcome = fetch_embeddings::<Real, S>(service, dim, &captions, &images, opts).map_err(|e| e.to_string())?;
    let mut failed: Vec<String> = cap_failed.iter().map(|(k, r)| format!("{k}: {r}")).collect();
    failed.extend(outcome.failed.iter().map(|(k, r)| format!("{k}: {r}")));
    let caption_rows = captions.into_iter().map(|c| (c.video_id, c.keyframe_index, c.text)).collect();
    Ok((outcome.set, failed, caption_rows))
}

fn run_embed(cfg: &PipelineConfig, out: &Path, art: &Artifacts) -> Result<StageResult, String> {
    let e = &cfg.embeddings;
    let datasets = load_datasets(art)?;
    let mut res = StageResult::default();
    let set: EmbeddingSet<Real> = if let Some(p) = &e.file {
        let load = load_embeddings::<Real>(&cfg.resolve(p), e.dim).map_err(|e| e.to_string())?;
        if !load.renormalized.is_empty() {
            res.notes.push(format!("{} stored vectors were not unit-norm and were renormalized", load.renormalized.len()));
        }
        load.set
    } else if e.synthetic_ground_truth {
        synthetic_ground_truth(cfg.collect.as_ref().ok_or("missing [collect] section")?, &datasets)?
    } else if let Some(url) = &e.service {
        let client = HttpEmbedClient::new(url.clone(), Duration::from_secs(e.timeout_secs));
        let kf = read_keyframes(art.keyframes.as_deref().ok_or("service embedding needs the keyframes stage")?)?;
        let root = cfg.resolve(cfg.keyframes.frames_root.as_deref().ok_or("frames_root missing")?);
        let (set, failed, captions) =
            embed_via_service(&client, e.dim, &root, &kf, &unique_video_ids(&datasets), &e.fetch_options())?;
        if !failed.is_empty() {
            res.partial = true;
            res.notes.push(format!("{} items failed: {}", failed.len(), failed.join("; ")));
        }
        let cap_path = out.join(CAPTIONS_FILE);
        let mut w = BufWriter::new(fs::File::create(&cap_path).map_err(|e| e.to_string())?);
        for (video_id, keyframe_index, caption) in captions {
            let line = serde_json::json!({"video_id": video_id, "keyframe_index": keyframe_index, "caption": caption});
            writeln!(w, "{line}").map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
        res.outputs.push(cap_path);
        set
    } else {
        return Err("no embedding source configured".into());
    };

    let covered: BTreeSet<&str> = set.iter().map(|(k, _)| k.video_id.as_str()).collect();
    let uncovered = unique_video_ids(&datasets).into_iter().filter(|id| !covered.contains(id.as_str())).count();
    if uncovered > 0 {
        res.partial = true;
        res.notes.push(format!("{uncovered} dataset videos have no embedding"));
    }
    let path = out.join(EMBEDDINGS_FILE);
    save_embeddings(&set, &path).map_err(|e| e.to_string())?;
    res.outputs.push(path.clone());
    res.outputs.push(crate::embedding::keys_path(&path));
    Ok(res)
}

fn load_embedding_artifact(art: &Artifacts) -> Result<EmbeddingSet<Real>, String> {
    let p = art.embeddings.as_deref().ok_or("no embeddings: enable the embed stage")?;
    load_embeddings::<Real>(p, None).map(|l| l.set).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct DomainStats {
    domain: String,
    #[serde(flatten)]
    stats: DatasetStats,
    compression_ratio: Option<f64>,
    warnings: Vec<String>,
}

fn run_analyze(cfg: &PipelineConfig, out: &Path, art: &Artifacts) -> Result<StageResult, String> {
    let datasets = load_datasets(art)?;
    let emb = load_embedding_artifact(art)?;
    let report = compare_domains(&datasets[0], datasets.get(1), &emb, &cfg.analysis).map_err(|e| e.to_string())?;
    let mut res = StageResult {
        rng_seeds: report.rng_seeds.clone(),
        ..StageResult::default()
    };
    let notes = report
        .domains
        .iter()
        .flat_map(|d| d.cells.iter().flat_map(|c| c.notes.iter()))
        .chain(report.comparisons.iter().flat_map(|c| c.notes.iter()))
        .count();
    if notes > 0 {
        res.partial = true;
        res.notes.push(format!("report carries {notes} note(s) on missing or failed cells"));
    }
    let json = out.join(REPORT_JSON);
    fs::write(&json, report.to_json()).map_err(|e| e.to_string())?;
    let txt = out.join(REPORT_TXT);
    fs::write(&txt, report.render_text()).map_err(|e| e.to_string())?;

    let kf: HashMap<String, KeyframeSet> = match &art.keyframes {
        Some(p) => read_keyframes(p)?.into_iter().collect(),
        None => HashMap::new(),
    };
    let stats: Vec<DomainStats> = datasets
        .iter()
        .map(|d| {
            let r = dataset_stats(d, &kf);
            DomainStats {
                domain: d.name.clone(),
                compression_ratio: compression_ratio::<f64>(r.stats.n_frames, r.stats.n_keyframes).ok(),
                stats: r.stats,
                warnings: r.warnings,
            }
        })
        .collect();
    let stats_path = out.join(STATS_JSON);
    fs::write(&stats_path, serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n").map_err(|e| e.to_string())?;
    res.outputs.extend([json, txt, stats_path]);
    Ok(res)
}

/// Projection layers (one per modality for PCA, one overall for imported
/// coordinates) with their hulls, plus notes on what could not be drawn.
pub fn project_layers(
    datasets: &[AuditDataset],
    emb: &EmbeddingSet<Real>,
    proj: &ProjectionSection,
    coords_file: Option<&Path>,
    pooling: Pooling,
) -> Result<(Vec<PlotLayer<Real>>, Vec<String>), String> {
    let mut notes = Vec::new();
    let mut per_modality = Vec::new();
    for m in [Modality::Caption, Modality::Image] {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for d in datasets {
            for role in [Role::Seed, Role::Recommended] {
                let g = group_points(d, emb, m, role, pooling);
                points.extend(g.points);
                labels.extend(g.labels);
            }
        }
        per_modality.push((m, points, labels));
    }
    let mut projections = Vec::new();
    match proj.method {
        ProjectMethod::Pca => {
            for (m, points, labels) in per_modality {
                if points.len() < 2 {
                    notes.push(format!("{}: fewer than 2 points, no projection", m.as_str()));
                    continue;
                }
                match pca_project(&points, labels) {
                    Ok(p) => projections.push(p),
                    Err(e) => notes.push(format!("{}: {e}", m.as_str())),
                }
            }
        }
        ProjectMethod::Import => {
            let path = coords_file.ok_or("coords_file missing")?;
            let labels: Vec<_> = per_modality.into_iter().flat_map(|(_, _, l)| l).collect();
            projections.push(import_coords::<Real>(path, labels).map_err(|e| e.to_string())?);
        }
    }
    let layers = projections
        .into_iter()
        .map(|projection| {
            let (hulls, skipped) = group_hulls(&projection, proj.rec_hulls);
            for s in skipped {
                notes.push(format!("{s}: fewer than 3 points, no hull"));
            }
            PlotLayer { projection, hulls }
        })
        .collect();
    Ok((layers, notes))
}

fn run_project(cfg: &PipelineConfig, out: &Path, art: &Artifacts) -> Result<StageResult, String> {
    let datasets = load_datasets(art)?;
    let emb = load_embedding_artifact(art)?;
    let coords = cfg.projection.coords_file.as_deref().map(|p| cfg.resolve(p));
    let (layers, notes) = project_layers(&datasets, &emb, &cfg.projection, coords.as_deref(), cfg.analysis.pooling)?;
    let files = emit_plot_data(&layers, &out.join(PLOTS_DIR)).map_err(|e| e.to_string())?;
    Ok(StageResult {
        outputs: vec![files.points, files.hulls],
        partial: notes.iter().any(|n| !n.ends_with("no hull")),
        notes,
        ..StageResult::default()
    })
}

// ---------------------------------------------------------------------------
// Driver

/// Section of the config that a stage depends on, as canonical JSON.
fn stage_fragment(cfg: &PipelineConfig, s: Stage) -> String {
    let v = match s {
        Stage::Collect => serde_json::to_value(&cfg.collect),
        Stage::Keyframes => serde_json::to_value(&cfg.keyframes),
        Stage::Embed => serde_json::to_value(&cfg.embeddings),
        Stage::Analyze => serde_json::to_value(&cfg.analysis),
        Stage::Project => serde_json::to_value((&cfg.projection, cfg.analysis.pooling)),
    };
    v.expect("config serializes").to_string()
}

fn stage_inputs(cfg: &PipelineConfig, s: Stage, art: &Artifacts) -> Result<BTreeMap<String, String>, String> {
    let mut inputs = BTreeMap::new();
    let mut add = |label: String, p: &Path| -> Result<(), String> {
        inputs.insert(label, hash_file(p)?);
        Ok(())
    };
    let add_datasets = |add: &mut dyn FnMut(String, &Path) -> Result<(), String>| -> Result<(), String> {
        for (p, o) in &art.datasets {
            add(format!("dataset:{}", o.name), p)?;
        }
        Ok(())
    };
    match s {
        Stage::Collect => {
            if let Some(c) = &cfg.collect {
                for d in &c.domains {
                    if let Some(r) = &d.replay {
                        add(format!("replay:{}", d.name), &cfg.resolve(r))?;
                    }
                }
                if let Some(sf) = &c.seeds_file {
                    add("seeds_file".into(), &cfg.resolve(sf))?;
                }
            }
        }
        Stage::Keyframes => {
            add_datasets(&mut add)?;
            let root = cfg.resolve(cfg.keyframes.frames_root.as_deref().unwrap_or(Path::new("")));
            // One digest over every frame file, in sorted order.
            let mut lines = Vec::new();
            let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
                .map_err(|e| format!("{}: {e}", root.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            for d in dirs {
                for f in frame_paths(&d).map_err(|e| e.to_string())? {
                    lines.push(format!("{} {}", rel(&root, &f), hash_file(&f)?));
                }
            }
            inputs.insert("frames".into(), sha256_hex(lines.join("\n").as_bytes()));
        }
        Stage::Embed => {
            add_datasets(&mut add)?;
            if let Some(p) = &cfg.embeddings.file {
                add("embeddings:file".into(), &cfg.resolve(p))?;
            }
            if cfg.embeddings.service.is_some() {
                if let Some(k) = &art.keyframes {
                    add("keyframes".into(), k)?;
                }
            }
        }
        Stage::Analyze => {
            add_datasets(&mut add)?;
            if let Some(p) = &art.embeddings {
                add("embeddings".into(), p)?;
            }
            if let Some(k) = &art.keyframes {
                add("keyframes".into(), k)?;
            }
        }
        Stage::Project => {
            add_datasets(&mut add)?;
            if let Some(p) = &art.embeddings {
                add("embeddings".into(), p)?;
            }
            if let Some(c) = &cfg.projection.coords_file {
                if cfg.projection.method == ProjectMethod::Import {
                    add("coords_file".into(), &cfg.resolve(c))?;
                }
            }
        }
    }
    Ok(inputs)
}

fn cache_key(s: Stage, fragment: &str, inputs: &BTreeMap<String, String>) -> String {
    let mut text = format!("{}\n{fragment}\n", s.as_str());
    for (k, v) in inputs {
        text.push_str(&format!("{k}={v}\n"));
    }
    sha256_hex(text.as_bytes())
}

fn outputs_intact(dir: &Path, rec: &StageRecord) -> bool {
    !rec.outputs.is_empty() && rec.outputs.iter().all(|(p, h)| file_sha256(&dir.join(p)).is_ok_and(|got| &got == h))
}

/// Records where a stage's outputs feed later stages.
fn advance(s: Stage, out: &Path, outputs: &BTreeMap<String, String>, art: &mut Artifacts) {
    match s {
        Stage::Collect => {
            art.datasets = outputs
                .keys()
                .map(|p| {
                    let path = out.join(p);
                    let name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    (path, ParseOptions::named(name))
                })
                .collect();
        }
        Stage::Keyframes => art.keyframes = Some(out.join(KEYFRAMES_FILE)),
        Stage::Embed => art.embeddings = Some(out.join(EMBEDDINGS_FILE)),
        Stage::Analyze | Stage::Project => {}
    }
}

/// Runs the enabled stages in order. Completed artifacts are kept when a
/// later stage fails.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let findings = validate_config(cfg);
    if !findings.is_empty() {
        return Err(PipelineError::Config(findings));
    }
    let out = cfg.output();
    fs::create_dir_all(&out)
        .map_err(|e| PipelineError::Config(vec![Finding::new("output_dir", format!("{}: {e}", out.display()))]))?;
    let _lock = OutputLock::acquire(&out)?;
    let previous = Manifest::read(&out).unwrap_or_default();
    let mut manifest = Manifest {
        config_hash: cfg.config_hash(),
        stages: Vec::new(),
    };

    let mut art = Artifacts::default();
    if !cfg.stages.collect {
        for r in [&cfg.datasets.a, &cfg.datasets.b].into_iter().flatten() {
            art.datasets.push((
                cfg.resolve(&r.path),
                ParseOptions {
                    name: dataset_name(r),
                    max_depth: r.max_depth,
                },
            ));
        }
    }
    // Artifacts of disabled stages from an earlier run are still usable.
    if !cfg.stages.keyframes && out.join(KEYFRAMES_FILE).is_file() {
        art.keyframes = Some(out.join(KEYFRAMES_FILE));
    }
    if !cfg.stages.embed && out.join(EMBEDDINGS_FILE).is_file() {
        art.embeddings = Some(out.join(EMBEDDINGS_FILE));
    }

    for s in Stage::ALL {
        if !cfg.stages.enabled(s) {
            continue;
        }
        let started = Instant::now();
        let fragment = stage_fragment(cfg, s);
        let inputs = match stage_inputs(cfg, s, &art) {
            Ok(i) => i,
            Err(e) => {
                let err = PipelineError::stage(s, e);
                let _ = manifest.write(&out);
                return Err(err);
            }
        };
        let key = cache_key(s, &fragment, &inputs);
        if let Some(prev) = previous.stage(s) {
            if prev.cache_key == key && prev.status != StageStatus::Failed && outputs_intact(&out, prev) {
                log::info!("{s}: inputs unchanged, cached");
                let mut rec = prev.clone();
                rec.status = StageStatus::Cached;
                rec.duration_ms = 0;
                advance(s, &out, &rec.outputs, &mut art);
                manifest.stages.push(rec);
                continue;
            }
        }
        log::info!("{s}: running");
        let result = match s {
            Stage::Collect => run_collect(cfg, &out),
            Stage::Keyframes => run_keyframes(cfg, &out, &art),
            Stage::Embed => run_embed(cfg, &out, &art),
            Stage::Analyze => run_analyze(cfg, &out, &art),
            Stage::Project => run_project(cfg, &out, &art),
        };
        let duration_ms = started.elapsed().as_millis() as u64;
        match result {
            Ok(r) => {
                let mut outputs = BTreeMap::new();
                for p in &r.outputs {
                    let h = hash_file(p).map_err(|e| PipelineError::stage(s, e))?;
                    outputs.insert(rel(&out, p), h);
                }
                advance(s, &out, &outputs, &mut art);
                manifest.stages.push(StageRecord {
                    stage: s,
                    status: StageStatus::Ran,
                    cache_key: key,
                    inputs,
                    outputs,
                    rng_seeds: r.rng_seeds,
                    duration_ms,
                    partial: r.partial,
                    notes: r.notes,
                });
            }
            Err(message) => {
                manifest.stages.push(StageRecord {
                    stage: s,
                    status: StageStatus::Failed,
                    cache_key: key,
                    inputs,
                    outputs: BTreeMap::new(),
                    rng_seeds: BTreeMap::new(),
                    duration_ms,
                    partial: false,
                    notes: vec![message.clone()],
                });
                let _ = manifest.write(&out);
                return Err(PipelineError::Stage { stage: s, message });
            }
        }
    }
    manifest
        .write(&out)
        .map_err(|e| PipelineError::stage(Stage::Project, format!("writing manifest: {e}")))?;
    let report = out.join(REPORT_JSON);
    Ok(RunSummary {
        output_dir: out,
        manifest,
        report: report.is_file().then_some(report),
    })
}
