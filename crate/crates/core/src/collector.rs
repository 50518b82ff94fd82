//! Recommendation walks against a pluggable provider.
//!
//! Every chain is walked in a freshly opened session that is closed when the
//! walk ends. Providers are required to keep sessions isolated, so walks for
//! different seeds may run concurrently and in any order.
//!
//! Three providers ship here:
//!
//! * [`SyntheticGraph`]: a seeded topic-cluster graph with ground-truth
//!   embeddings, used as a drift oracle;
//! * [`ReplayProvider`]: replays chains recorded in the dataset JSONL format,
//!   which is also how an out-of-process live collector feeds records in;
//! * [`LiveProviderStub`]: the adapter slot for a real platform session.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::chain::{AuditDataset, ChainError, RecommendationChain, VideoRecord};
use crate::embedding::{EmbeddingError, EmbeddingKey, EmbeddingSet, Modality};
use crate::hashing::derive_seed;
use crate::scalar::Scalar;
use crate::workers::bounded_map;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("recommendation step {depth} failed: {reason}")]
    StepFailed { depth: u32, reason: String },
    #[error("video {0:?} is not known to the provider")]
    UnknownVideo(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum CollectError {
    #[error("invalid synthetic graph params: {0}")]
    InvalidParams(String),
    #[error("invalid walk config: {0}")]
    InvalidConfig(String),
    #[error("every seed failed ({} seeds); first: {}", .0.len(), .0.first().map(|(s, e)| format!("{s}: {e}")).unwrap_or_default())]
    AllSeedsFailed(Vec<(String, ProviderError)>),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// What a provider hands back for one video.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VideoDescriptor {
    pub video_id: String,
    pub keyword: String,
}

impl VideoDescriptor {
    pub fn new(video_id: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            keyword: String::new(),
        }
    }
}

/// Source of recommendations.
///
/// Request/response contract for adapters:
///
/// 1. `open_session(seed)` starts a clean session positioned on the seed video
///    (for a browser adapter: a new isolated context with no login, cookies or
///    history, then navigate to the seed). It fails with
///    [`ProviderError::Unavailable`] when no session can be created.
/// 2. `next_recommendation(session, current)` advances one step and returns the
///    video served after `current`. It must accept any video it has returned.
/// 3. `close_session(session)` discards all session state.
pub trait RecommendationProvider: Sync {
    type Session: Send;

    fn open_session(&self, seed: &VideoDescriptor) -> Result<Self::Session, ProviderError>;

    /// Opaque token recorded as the chain's `session_id`.
    fn session_id(&self, session: &Self::Session) -> String;

    fn next_recommendation(
        &self,
        session: &mut Self::Session,
        current: &VideoDescriptor,
    ) -> Result<VideoDescriptor, ProviderError>;

    fn close_session(&self, session: Self::Session);
}

/// Result of walking one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainWalk {
    pub chain: RecommendationChain,
    /// Set when the walk stopped before the requested depth.
    pub truncated: bool,
    pub failure: Option<ProviderError>,
}

fn rec_record(desc: &VideoDescriptor, seed: &str, depth: u32, domain: &str) -> VideoRecord {
    let mut r = VideoRecord::recommended(desc.video_id.clone(), domain, seed, depth);
    r.keyword = desc.keyword.clone();
    r
}

fn walk_in_session<P: RecommendationProvider>(
    provider: &P,
    session: &mut P::Session,
    seed: &VideoDescriptor,
    depth: u32,
    domain: &str,
) -> ChainWalk {
    let session_id = provider.session_id(session);
    let mut seed_rec = VideoRecord::seed(seed.video_id.clone(), domain);
    seed_rec.keyword = seed.keyword.clone();
    let mut visited: HashSet<String> = HashSet::from([seed.video_id.clone()]);
    let mut recs = Vec::with_capacity(depth as usize);
    let mut current = seed.clone();
    let mut failure = None;
    for step in 1..=depth {
        match provider.next_recommendation(session, &current) {
            Ok(next) if visited.insert(next.video_id.clone()) => {
                recs.push(rec_record(&next, &seed.video_id, step, domain));
                current = next;
            }
            Ok(next) => {
                failure = Some(ProviderError::StepFailed {
                    depth: step,
                    reason: format!("video {:?} repeated within the session", next.video_id),
                });
                break;
            }
            Err(e) => {
                let reason = match e {
                    ProviderError::StepFailed { reason, .. } => reason,
                    other => other.to_string(),
                };
                failure = Some(ProviderError::StepFailed {
                    depth: step,
                    reason,
                });
                break;
            }
        }
    }
    let truncated = recs.len() < depth as usize;
    let chain = RecommendationChain {
        seed: seed_rec,
        recs,
        session_id,
    };
    ChainWalk {
        chain,
        truncated,
        failure,
    }
}

/// Walks `depth` steps from `seed` in a fresh session.
///
/// A provider failure part-way returns the partial chain with `truncated` set;
/// only failing to open a session is an error.
pub fn walk_chain<P: RecommendationProvider>(
    provider: &P,
    seed: &VideoDescriptor,
    depth: u32,
    domain: &str,
) -> Result<ChainWalk, ProviderError> {
    let mut session = provider.open_session(seed)?;
    let walk = walk_in_session(provider, &mut session, seed, depth, domain);
    provider.close_session(session);
    Ok(walk)
}

#[derive(Debug, Clone)]
pub struct WalkConfig {
    pub depth: u32,
    pub seeds: Vec<VideoDescriptor>,
    pub session_per_seed: bool,
    /// Maximum number of concurrent sessions.
    pub session_budget: usize,
}

impl WalkConfig {
    pub fn new(seeds: Vec<VideoDescriptor>) -> Self {
        Self {
            depth: 10,
            seeds,
            session_per_seed: true,
            session_budget: 4,
        }
    }

    pub fn validate(&self) -> Result<(), CollectError> {
        if self.depth < 1 {
            return Err(CollectError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CollectError::InvalidConfig("seed list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub dataset: AuditDataset,
    /// Seeds whose chain stopped short of the requested depth.
    pub truncated: Vec<String>,
    /// Seeds with no chain at all, with the reason.
    pub failures: Vec<(String, ProviderError)>,
}

impl Collection {
    pub fn is_partial(&self) -> bool {
        !self.truncated.is_empty() || !self.failures.is_empty()
    }
}

/// Walks one chain per seed and assembles the dataset in seed order.
pub fn collect_dataset<P: RecommendationProvider>(
    provider: &P,
    cfg: &WalkConfig,
    domain_label: &str,
) -> Result<Collection, CollectError> {
    cfg.validate()?;
    let walks: Vec<Result<ChainWalk, ProviderError>> = if cfg.session_per_seed {
        bounded_map(&cfg.seeds, cfg.session_budget, |seed| {
            walk_chain(provider, seed, cfg.depth, domain_label)
        })
    } else {
        match provider.open_session(&cfg.seeds[0]) {
            Ok(mut session) => {
                let out = cfg
                    .seeds
                    .iter()
                    .map(|seed| {
                        Ok(walk_in_session(
                            provider,
                            &mut session,
                            seed,
                            cfg.depth,
                            domain_label,
                        ))
                    })
                    .collect();
                provider.close_session(session);
                out
            }
            Err(e) => cfg.seeds.iter().map(|_| Err(e.clone())).collect(),
        }
    };

    let mut chains = Vec::new();
    let mut truncated = Vec::new();
    let mut failures = Vec::new();
    for (seed, walk) in cfg.seeds.iter().zip(walks) {
        match walk {
            Ok(w) => {
                if w.truncated {
                    truncated.push(seed.video_id.clone());
                }
                chains.push(w.chain);
            }
            Err(e) => failures.push((seed.video_id.clone(), e)),
        }
    }
    if chains.is_empty() {
        return Err(CollectError::AllSeedsFailed(failures));
    }
    let dataset = AuditDataset::new(domain_label, cfg.depth, chains)?;
    Ok(Collection {
        dataset,
        truncated,
        failures,
    })
}

/// Reads a seeds file: one `video_id` per line, optionally followed by a tab
/// and the search keyword. Blank lines and `#` comments are skipped.
pub fn read_seeds<R: BufRead>(input: R) -> std::io::Result<Vec<VideoDescriptor>> {
    let mut seeds = Vec::new();
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, keyword) = line.split_once('\t').unwrap_or((line, ""));
        seeds.push(VideoDescriptor {
            video_id: id.trim().to_string(),
            keyword: keyword.trim().to_string(),
        });
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGraphParams {
    pub n_topics: usize,
    pub videos_per_topic: usize,
    /// Probability that a step leaves the current topic.
    pub drift: f64,
    pub embed_dim: usize,
    /// Radius of the within-topic noise ball.
    pub topic_spread: f64,
    pub rng_seed: u64,
    /// Prefix for generated video ids, so graphs for different domains can
    /// share one embedding table.
    pub namespace: String,
}

impl Default for SyntheticGraphParams {
    fn default() -> Self {
        Self {
            n_topics: 5,
            videos_per_topic: 200,
            drift: 0.5,
            embed_dim: 16,
            topic_spread: 1.0,
            rng_seed: 0,
            namespace: String::new(),
        }
    }
}

impl SyntheticGraphParams {
    pub fn validate(&self) -> Result<(), CollectError> {
        let bad = |m: String| Err(CollectError::InvalidParams(m));
        if self.n_topics < 1 {
            return bad("n_topics must be >= 1".into());
        }
        if self.videos_per_topic < 1 {
            return bad("videos_per_topic must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return bad(format!("drift must lie in [0, 1], got {}", self.drift));
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be >= 2".into());
        }
        if !(self.topic_spread > 0.0 && self.topic_spread.is_finite()) {
            return bad(format!("topic_spread must be > 0, got {}", self.topic_spread));
        }
        Ok(())
    }
}

/// Distance factor between topic centroids, in units of `topic_spread`.
pub const CENTROID_SEPARATION: f64 = 10.0;

/// Deterministic centroid layout with pairwise distance `>= 10·spread`.
///
/// Up to `2·dim` topics sit on the signed coordinate axes at radius
/// `10·spread`; more topics are spaced evenly on a circle in the first two
/// coordinates with adjacent chord `10.5·spread`.
pub fn topic_centroids(n_topics: usize, dim: usize, spread: f64) -> Vec<Vec<f64>> {
    let scale = CENTROID_SEPARATION * spread;
    if n_topics <= 2 * dim {
        (0..n_topics)
            .map(|t| {
                let mut c = vec![0.0; dim];
                c[t % dim] = if t < dim { scale } else { -scale };
                c
            })
            .collect()
    } else {
        let step = std::f64::consts::TAU / n_topics as f64;
        let radius = 1.05 * scale / (2.0 * (step / 2.0).sin());
        (0..n_topics)
            .map(|t| {
                let mut c = vec![0.0; dim];
                let a = step * t as f64;
                c[0] = radius * a.cos();
                c[1] = radius * a.sin();
                c
            })
            .collect()
    }
}

/// Point drawn uniformly from the ball of `radius` around the origin.
fn ball_noise(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
            return g.into_iter().map(|x| x * r / n).collect();
        }
    }
}

#[derive(Debug, Clone)]
struct SyntheticVideo {
    id: String,
    topic: usize,
    image: Vec<f64>,
    caption: Vec<f64>,
}

/// Seeded topic-cluster recommendation graph with ground-truth embeddings.
///
/// Each step stays in the current topic with probability `1 − drift`, else
/// jumps to a uniformly chosen other topic. Within the target topic the next
/// video is uniform over those not yet shown in the session.
#[derive(Debug, Clone)]
pub struct SyntheticGraph {
    params: SyntheticGraphParams,
    centroids: Vec<Vec<f64>>,
    videos: Vec<SyntheticVideo>,
    index: HashMap<String, usize>,
}

/// Topic jumps and within-topic picks draw from separate streams, so two
/// graphs differing only in `drift` make the same jump decisions wherever the
/// lower drift jumps at all.
pub struct SyntheticSession {
    id: String,
    jump_rng: ChaCha8Rng,
    pick_rng: ChaCha8Rng,
    shown: HashSet<usize>,
}

impl SyntheticGraph {
    pub fn build(params: SyntheticGraphParams) -> Result<Self, CollectError> {
        params.validate()?;
        let centroids = topic_centroids(params.n_topics, params.embed_dim, params.topic_spread);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.rng_seed, "synthetic/embeddings"));
        let mut videos = Vec::with_capacity(params.n_topics * params.videos_per_topic);
        for (topic, centroid) in centroids.iter().enumerate() {
            for v in 0..params.videos_per_topic {
                let mut draw = || -> Vec<f64> {
                    ball_noise(&mut rng, params.embed_dim, params.topic_spread)
                        .iter()
                        .zip(centroid)
                        .map(|(n, c)| c + n)
                        .collect()
                };
                let image = draw();
                let caption = draw();
                videos.push(SyntheticVideo {
                    id: format!("{}t{topic:02}-v{v:05}", params.namespace),
                    topic,
                    image,
                    caption,
                });
            }
        }
        let index = videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.clone(), i))
            .collect();
        Ok(Self {
            params,
            centroids,
            videos,
            index,
        })
    }

    pub fn params(&self) -> &SyntheticGraphParams {
        &self.params
    }

    pub fn centroid(&self, topic: usize) -> &[f64] {
        &self.centroids[topic]
    }

    pub fn topic_of(&self, video_id: &str) -> Option<usize> {
        self.index.get(video_id).map(|&i| self.videos[i].topic)
    }

    /// Raw (un-normalized) ground-truth vector of a video.
    pub fn truth(&self, video_id: &str, modality: Modality) -> Option<&[f64]> {
        self.index.get(video_id).map(|&i| match modality {
            Modality::Image => self.videos[i].image.as_slice(),
            Modality::Caption => self.videos[i].caption.as_slice(),
        })
    }

    /// The first `n` videos of `topic`, as seeds.
    pub fn seeds_from_topic(&self, topic: usize, n: usize) -> Vec<VideoDescriptor> {
        self.videos
            .iter()
            .filter(|v| v.topic == topic)
            .take(n)
            .map(|v| VideoDescriptor::new(v.id.clone()))
            .collect()
    }

    /// `n` seeds taken round-robin across topics.
    pub fn seeds_round_robin(&self, n: usize) -> Vec<VideoDescriptor> {
        let per = self.params.videos_per_topic;
        (0..n.min(self.videos.len()))
            .map(|i| {
                let topic = i % self.params.n_topics;
                let slot = i / self.params.n_topics;
                VideoDescriptor::new(self.videos[topic * per + slot].id.clone())
            })
            .collect()
    }

    /// Unit-norm ground-truth embeddings (keyframe 0, both modalities) for
    /// every video occurring in `dataset`.
    pub fn ground_truth<T: Scalar>(
        &self,
        dataset: &AuditDataset,
    ) -> Result<EmbeddingSet<T>, EmbeddingError> {
        let mut set = EmbeddingSet::new(self.params.embed_dim)?;
        for video in dataset.videos() {
            let Some(&i) = self.index.get(&video.video_id) else {
                continue;
            };
            for modality in [Modality::Image, Modality::Caption] {
                let key = EmbeddingKey::new(video.video_id.clone(), 0, modality);
                if set.contains(&key) {
                    continue;
                }
                let raw = match modality {
                    Modality::Image => &self.videos[i].image,
                    Modality::Caption => &self.videos[i].caption,
                };
                let v: Vec<T> = raw.iter().map(|&x| T::lit(x)).collect();
                set.insert(key, v)?;
            }
        }
        Ok(set)
    }

    fn pick_in_topic(&self, topic: usize, session: &mut SyntheticSession) -> Option<usize> {
        let per = self.params.videos_per_topic;
        let base = topic * per;
        let free: Vec<usize> = (base..base + per)
            .filter(|i| !session.shown.contains(i))
            .collect();
        if free.is_empty() {
            return None;
        }
        Some(free[session.pick_rng.random_range(0..free.len())])
    }
}

impl RecommendationProvider for SyntheticGraph {
    type Session = SyntheticSession;

    fn open_session(&self, seed: &VideoDescriptor) -> Result<SyntheticSession, ProviderError> {
        let &i = self
            .index
            .get(&seed.video_id)
            .ok_or_else(|| ProviderError::UnknownVideo(seed.video_id.clone()))?;
        let seed_value = derive_seed(self.params.rng_seed, &format!("synthetic/walk/{}", seed.video_id));
        Ok(SyntheticSession {
            id: format!("syn-{seed_value:016x}"),
            jump_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed_value, "jump")),
            pick_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed_value, "pick")),
            shown: HashSet::from([i]),
        })
    }

    fn session_id(&self, session: &SyntheticSession) -> String {
        session.id.clone()
    }

    fn next_recommendation(
        &self,
        session: &mut SyntheticSession,
        current: &VideoDescriptor,
    ) -> Result<VideoDescriptor, ProviderError> {
        let topic = self
            .topic_of(&current.video_id)
            .ok_or_else(|| ProviderError::UnknownVideo(current.video_id.clone()))?;
        let n_topics = self.params.n_topics;
        // Both draws happen on every step so the jump stream stays aligned
        // across drift levels.
        let u = session.jump_rng.random::<f64>();
        let k = if n_topics > 1 { session.jump_rng.random_range(0..n_topics - 1) } else { 0 };
        let leave = n_topics > 1 && u < self.params.drift;
        let target = if leave {
            if k >= topic {
                k + 1
            } else {
                k
            }
        } else {
            topic
        };
        let i = self
            .pick_in_topic(target, session)
            .ok_or_else(|| ProviderError::StepFailed {
                depth: session.shown.len() as u32,
                reason: format!("topic {target} has no unseen videos left in this session"),
            })?;
        session.shown.insert(i);
        Ok(VideoDescriptor::new(self.videos[i].id.clone()))
    }

    fn close_session(&self, session: SyntheticSession) {
        drop(session);
    }
}

/// Replays recorded chains. A seed with several recorded sessions replays the
/// first one.
pub struct ReplayProvider {
    chains: HashMap<String, RecommendationChain>,
}

pub struct ReplaySession {
    seed: String,
    position: usize,
}

impl ReplayProvider {
    pub fn new(recorded: &AuditDataset) -> Self {
        let mut chains = HashMap::new();
        for c in &recorded.chains {
            chains
                .entry(c.seed.video_id.clone())
                .or_insert_with(|| c.clone());
        }
        Self { chains }
    }

    /// Seeds in recorded order.
    pub fn seeds(recorded: &AuditDataset) -> Vec<VideoDescriptor> {
        let mut seen = HashSet::new();
        recorded
            .chains
            .iter()
            .filter(|c| seen.insert(c.seed.video_id.clone()))
            .map(|c| VideoDescriptor {
                video_id: c.seed.video_id.clone(),
                keyword: c.seed.keyword.clone(),
            })
            .collect()
    }
}

impl RecommendationProvider for ReplayProvider {
    type Session = ReplaySession;

    fn open_session(&self, seed: &VideoDescriptor) -> Result<ReplaySession, ProviderError> {
        if !self.chains.contains_key(&seed.video_id) {
            return Err(ProviderError::Unavailable(format!(
                "no recorded session for seed {:?}",
                seed.video_id
            )));
        }
        Ok(ReplaySession {
            seed: seed.video_id.clone(),
            position: 0,
        })
    }

    fn session_id(&self, session: &ReplaySession) -> String {
        self.chains[&session.seed].session_id.clone()
    }

    fn next_recommendation(
        &self,
        session: &mut ReplaySession,
        current: &VideoDescriptor,
    ) -> Result<VideoDescriptor, ProviderError> {
        let chain = &self.chains[&session.seed];
        let expected = if session.position == 0 {
            &chain.seed.video_id
        } else {
            &chain.recs[session.position - 1].video_id
        };
        if &current.video_id != expected {
            return Err(ProviderError::UnknownVideo(current.video_id.clone()));
        }
        let depth = session.position as u32 + 1;
        let rec = chain
            .recs
            .get(session.position)
            .ok_or_else(|| ProviderError::StepFailed {
                depth,
                reason: "recording ends here".into(),
            })?;
        session.position += 1;
        Ok(VideoDescriptor {
            video_id: rec.video_id.clone(),
            keyword: rec.keyword.clone(),
        })
    }

    fn close_session(&self, _session: ReplaySession) {}
}

/// Placeholder for a live-platform adapter.
///
/// A real adapter opens a new isolated browser context per session (no login,
/// cookies or history), navigates to the seed, and reads the next served video
/// on each scroll; the context is destroyed on close. Browser automation is not
/// linked into this crate, so every session request reports the provider as
/// unavailable. Collect externally and load the records with
/// [`ReplayProvider`] instead.
#[derive(Debug, Clone, Default)]
pub struct LiveProviderStub {
    pub endpoint: Option<String>,
}

impl RecommendationProvider for LiveProviderStub {
    type Session = ();

    fn open_session(&self, _seed: &VideoDescriptor) -> Result<(), ProviderError> {
        Err(ProviderError::Unavailable(format!(
            "live adapter not linked (endpoint {:?}); replay externally collected JSONL instead",
            self.endpoint
        )))
    }

    fn session_id(&self, _session: &()) -> String {
        String::new()
    }

    fn next_recommendation(
        &self,
        _session: &mut (),
        _current: &VideoDescriptor,
    ) -> Result<VideoDescriptor, ProviderError> {
        Err(ProviderError::Unavailable("live adapter not linked".into()))
    }

    fn close_session(&self, _session: ()) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::dist;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn graph(drift: f64) -> SyntheticGraph {
        SyntheticGraph::build(SyntheticGraphParams {
            n_topics: 5,
            videos_per_topic: 50,
            drift,
            embed_dim: 8,
            topic_spread: 0.5,
            rng_seed: 11,
            namespace: String::new(),
        })
        .unwrap()
    }

    #[test]
    fn params_are_validated() {
        let ok = SyntheticGraphParams::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SyntheticGraphParams { n_topics: 0, ..ok.clone() },
            SyntheticGraphParams { videos_per_topic: 0, ..ok.clone() },
            SyntheticGraphParams { drift: 1.5, ..ok.clone() },
            SyntheticGraphParams { embed_dim: 1, ..ok.clone() },
            SyntheticGraphParams { topic_spread: 0.0, ..ok.clone() },
        ] {
            assert!(matches!(SyntheticGraph::build(bad), Err(CollectError::InvalidParams(_))));
        }
    }

    #[test]
    fn centroids_are_separated() {
        for (n, d) in [(5, 16), (5, 2), (4, 2), (9, 2), (30, 3)] {
            let c = topic_centroids(n, d, 0.7);
            for i in 0..n {
                for j in i + 1..n {
                    assert!(dist(&c[i], &c[j]) >= 10.0 * 0.7 - 1e-9, "n={n} d={d} {i},{j}");
                }
            }
        }
    }

    #[test]
    fn depth_ten_walk_has_ten_recs() {
        let g = graph(0.5);
        let seed = &g.seeds_from_topic(0, 1)[0];
        let w = walk_chain(&g, seed, 10, "syn").unwrap();
        assert_eq!(w.chain.recs.len(), 10);
        assert!(!w.truncated);
        assert!(w.chain.validate().is_ok());
        let depths: Vec<u32> = w.chain.recs.iter().map(|r| r.depth).collect();
        assert_eq!(depths, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_drift_stays_in_topic() {
        let g = graph(0.0);
        for seed in g.seeds_round_robin(10) {
            let topic = g.topic_of(&seed.video_id).unwrap();
            let w = walk_chain(&g, &seed, 1, "syn").unwrap();
            assert_eq!(w.chain.recs.len(), 1);
            let w = walk_chain(&g, &seed, 10, "syn").unwrap();
            for r in &w.chain.recs {
                assert_eq!(g.topic_of(&r.video_id), Some(topic));
                let truth = g.truth(&r.video_id, Modality::Image).unwrap();
                assert!(dist(truth, g.centroid(topic)) <= 3.0 * 0.5);
            }
        }
    }

    struct Flaky {
        fail_at: u32,
        closed: AtomicUsize,
    }

    impl RecommendationProvider for Flaky {
        type Session = u32;
        fn open_session(&self, _seed: &VideoDescriptor) -> Result<u32, ProviderError> {
            Ok(0)
        }
        fn session_id(&self, _s: &u32) -> String {
            "flaky".into()
        }
        fn next_recommendation(
            &self,
            s: &mut u32,
            _current: &VideoDescriptor,
        ) -> Result<VideoDescriptor, ProviderError> {
            *s += 1;
            if *s == self.fail_at {
                return Err(ProviderError::Unavailable("connection reset".into()));
            }
            Ok(VideoDescriptor::new(format!("v{s}")))
        }
        fn close_session(&self, _s: u32) {
            self.closed.fetch_add(1, Ordering::SeqCst);
        }
    }

    #[test]
    fn failing_step_truncates_chain() {
        let p = Flaky { fail_at: 3, closed: AtomicUsize::new(0) };
        let w = walk_chain(&p, &VideoDescriptor::new("seed"), 10, "x").unwrap();
        assert!(w.truncated);
        let depths: Vec<u32> = w.chain.recs.iter().map(|r| r.depth).collect();
        assert_eq!(depths, vec![1, 2]);
        assert!(matches!(w.failure, Some(ProviderError::StepFailed { depth: 3, .. })));
        assert_eq!(p.closed.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn collect_counts_and_determinism() {
        let g = graph(0.5);
        let mut cfg = WalkConfig::new(g.seeds_round_robin(1));
        cfg.depth = 1;
        let one = collect_dataset(&g, &cfg, "syn").unwrap();
        assert_eq!(one.dataset.n_videos(), 2);

        let mut cfg = WalkConfig::new(g.seeds_round_robin(20));
        cfg.depth = 5;
        let a = collect_dataset(&g, &cfg, "syn").unwrap();
        cfg.session_budget = 1;
        let b = collect_dataset(&g, &cfg, "syn").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.n_videos(), 20 * 6);
        assert!(!a.is_partial());
    }

    #[test]
    fn live_stub_fails_every_seed() {
        let cfg = WalkConfig::new(vec![VideoDescriptor::new("a"), VideoDescriptor::new("b")]);
        match collect_dataset(&LiveProviderStub::default(), &cfg, "x") {
            Err(CollectError::AllSeedsFailed(f)) => assert_eq!(f.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_reproduces_recorded_chains() {
        let g = graph(0.3);
        let mut cfg = WalkConfig::new(g.seeds_round_robin(6));
        cfg.depth = 4;
        let recorded = collect_dataset(&g, &cfg, "syn").unwrap().dataset;
        let replay = ReplayProvider::new(&recorded);
        let mut cfg2 = WalkConfig::new(ReplayProvider::seeds(&recorded));
        cfg2.depth = 4;
        assert_eq!(collect_dataset(&replay, &cfg2, "syn").unwrap().dataset, recorded);
        cfg2.depth = 6;
        let longer = collect_dataset(&replay, &cfg2, "syn").unwrap();
        assert_eq!(longer.truncated.len(), 6);
    }

    #[test]
    fn seeds_file_parsing() {
        let text = "# seeds\nabc\tsouth china sea\n\n  def  \n";
        let seeds = read_seeds(text.as_bytes()).unwrap();
        assert_eq!(seeds.len(), 2);
        assert_eq!(seeds[0].keyword, "south china sea");
        assert_eq!(seeds[1].video_id, "def");
    }

    #[test]
    fn exhausted_topic_truncates() {
        let g = SyntheticGraph::build(SyntheticGraphParams {
            n_topics: 2,
            videos_per_topic: 3,
            drift: 0.0,
            embed_dim: 2,
            topic_spread: 1.0,
            rng_seed: 1,
            namespace: "x-".into(),
        })
        .unwrap();
        let seed = &g.seeds_from_topic(1, 1)[0];
        assert!(seed.video_id.starts_with("x-t01"));
        let w = walk_chain(&g, seed, 5, "d").unwrap();
        assert_eq!(w.chain.recs.len(), 2);
        assert!(w.truncated);
    }
}
