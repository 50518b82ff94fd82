//! Seed videos, recommendation chains and their line-delimited persistence.
//!
//! A dataset is stored as one JSON object per video. Chains are rebuilt from
//! `(seed_id, session_id)` groups and ordered by `depth`; nothing is repaired on
//! load, any record that breaks a chain invariant is rejected with the line it
//! came from.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::keyframe::KeyframeSet;

#[derive(Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("line {line_no}: malformed record: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("duplicate video id {0:?} within one chain")]
    DuplicateVideoId(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seed,
    Recommended,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Seed => "seed",
            Role::Recommended => "recommended",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One video as it appeared in a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub domain_label: String,
    pub role: Role,
    pub depth: u32,
    pub seed_id: String,
    pub keyword: String,
    pub frame_dir: Option<String>,
    /// Collector fields this crate does not interpret, kept for round-trips.
    pub extra: BTreeMap<String, Value>,
}

impl VideoRecord {
    pub fn seed(video_id: impl Into<String>, domain_label: impl Into<String>) -> Self {
        let video_id = video_id.into();
        Self {
            seed_id: video_id.clone(),
            video_id,
            domain_label: domain_label.into(),
            role: Role::Seed,
            depth: 0,
            keyword: String::new(),
            frame_dir: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn recommended(
        video_id: impl Into<String>,
        domain_label: impl Into<String>,
        seed_id: impl Into<String>,
        depth: u32,
    ) -> Self {
        Self {
            video_id: video_id.into(),
            domain_label: domain_label.into(),
            role: Role::Recommended,
            depth,
            seed_id: seed_id.into(),
            keyword: String::new(),
            frame_dir: None,
            extra: BTreeMap::new(),
        }
    }

    fn check_role(&self) -> Result<(), String> {
        if self.video_id.is_empty() {
            return Err("empty video_id".into());
        }
        let is_seed = self.role == Role::Seed;
        if is_seed != (self.depth == 0) {
            return Err(format!(
                "video {:?}: role {} inconsistent with depth {}",
                self.video_id, self.role, self.depth
            ));
        }
        if is_seed != (self.seed_id == self.video_id) {
            return Err(format!(
                "video {:?}: role {} inconsistent with seed_id {:?}",
                self.video_id, self.role, self.seed_id
            ));
        }
        Ok(())
    }
}

/// A seed and its ordered walk of recommendations.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationChain {
    pub seed: VideoRecord,
    pub recs: Vec<VideoRecord>,
    pub session_id: String,
}

impl RecommendationChain {
    /// Validates the chain invariants and returns the chain.
    pub fn new(
        seed: VideoRecord,
        recs: Vec<VideoRecord>,
        session_id: impl Into<String>,
    ) -> Result<Self, ChainError> {
        let chain = Self {
            seed,
            recs,
            session_id: session_id.into(),
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        self.seed.check_role().map_err(ChainError::InvariantViolation)?;
        if self.seed.role != Role::Seed {
            return Err(ChainError::InvariantViolation(format!(
                "chain head {:?} is not a seed",
                self.seed.video_id
            )));
        }
        let mut seen = HashSet::new();
        seen.insert(self.seed.video_id.as_str());
        for (i, rec) in self.recs.iter().enumerate() {
            rec.check_role().map_err(ChainError::InvariantViolation)?;
            if rec.seed_id != self.seed.video_id {
                return Err(ChainError::InvariantViolation(format!(
                    "video {:?} has seed_id {:?}, chain seed is {:?}",
                    rec.video_id, rec.seed_id, self.seed.video_id
                )));
            }
            let expected = i as u32 + 1;
            if rec.depth != expected {
                let what = if rec.depth < expected {
                    "duplicate depth"
                } else {
                    "depth gap"
                };
                return Err(ChainError::InvariantViolation(format!(
                    "{what} in session {:?}: expected depth {expected}, found {}",
                    self.session_id, rec.depth
                )));
            }
            if !seen.insert(rec.video_id.as_str()) {
                return Err(ChainError::DuplicateVideoId(rec.video_id.clone()));
            }
        }
        Ok(())
    }

    /// Number of videos including the seed.
    pub fn len(&self) -> usize {
        1 + self.recs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn videos(&self) -> impl Iterator<Item = &VideoRecord> {
        std::iter::once(&self.seed).chain(self.recs.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditDataset {
    pub name: String,
    pub max_depth: u32,
    pub chains: Vec<RecommendationChain>,
}

impl AuditDataset {
    pub fn new(
        name: impl Into<String>,
        max_depth: u32,
        chains: Vec<RecommendationChain>,
    ) -> Result<Self, ChainError> {
        let d = Self {
            name: name.into(),
            max_depth,
            chains,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            max_depth: 0,
            chains: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let mut sessions = HashSet::new();
        for chain in &self.chains {
            chain.validate()?;
            if let Some(last) = chain.recs.last() {
                if last.depth > self.max_depth {
                    return Err(ChainError::InvariantViolation(format!(
                        "depth {} exceeds dataset max_depth {}",
                        last.depth, self.max_depth
                    )));
                }
            }
            if !sessions.insert((chain.seed.video_id.as_str(), chain.session_id.as_str())) {
                return Err(ChainError::InvariantViolation(format!(
                    "session {:?} of seed {:?} appears twice",
                    chain.session_id, chain.seed.video_id
                )));
            }
        }
        Ok(())
    }

    pub fn n_videos(&self) -> usize {
        self.chains.iter().map(RecommendationChain::len).sum()
    }

    pub fn videos(&self) -> impl Iterator<Item = &VideoRecord> {
        self.chains.iter().flat_map(RecommendationChain::videos)
    }
}

/// Wire layout of one JSONL record. Field order here is the serialization order.
#[derive(Serialize, Deserialize)]
struct RecordLine {
    video_id: String,
    domain_label: String,
    role: Role,
    depth: u32,
    seed_id: String,
    session_id: String,
    keyword: String,
    frame_dir: Option<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

/// Options for [`parse_dataset`] that are not carried in the records.
#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    pub name: String,
    /// Declared maximum depth; defaults to the deepest record seen.
    pub max_depth: Option<u32>,
}

impl ParseOptions {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            max_depth: None,
        }
    }
}

/// Reads a line-delimited dataset. Blank lines are ignored.
pub fn parse_dataset<R: BufRead>(raw: R, opts: &ParseOptions) -> Result<AuditDataset, ChainError> {
    struct Group {
        seed: Option<(usize, VideoRecord)>,
        recs: Vec<(usize, VideoRecord)>,
    }

    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Group> = HashMap::new();
    let mut deepest = 0u32;

    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ChainError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|e| ChainError::MalformedLine {
                line_no,
                reason: e.to_string(),
            })?;
        let session_id = rec.session_id;
        let video = VideoRecord {
            video_id: rec.video_id,
            domain_label: rec.domain_label,
            role: rec.role,
            depth: rec.depth,
            seed_id: rec.seed_id,
            keyword: rec.keyword,
            frame_dir: rec.frame_dir,
            extra: rec.extra,
        };
        video
            .check_role()
            .map_err(|e| ChainError::InvariantViolation(format!("line {line_no}: {e}")))?;
        deepest = deepest.max(video.depth);

        let key = (video.seed_id.clone(), session_id);
        let group = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            Group {
                seed: None,
                recs: Vec::new(),
            }
        });
        if video.role == Role::Seed {
            if let Some((first, _)) = &group.seed {
                return Err(ChainError::InvariantViolation(format!(
                    "line {line_no}: second seed record for session {:?} (first on line {first})",
                    key.1
                )));
            }
            group.seed = Some((line_no, video));
        } else {
            group.recs.push((line_no, video));
        }
    }

    let max_depth = match opts.max_depth {
        Some(m) if m < deepest => {
            return Err(ChainError::InvariantViolation(format!(
                "depth {deepest} exceeds declared max_depth {m}"
            )))
        }
        Some(m) => m,
        None => deepest,
    };

    let mut chains = Vec::with_capacity(order.len());
    for key in order {
        let group = groups.remove(&key).expect("group recorded in order");
        let Some((_, seed)) = group.seed else {
            let line = group.recs.first().map(|(l, _)| *l).unwrap_or(0);
            return Err(ChainError::InvariantViolation(format!(
                "line {line}: session {:?} has no seed record for {:?}",
                key.1, key.0
            )));
        };
        let mut recs = group.recs;
        recs.sort_by_key(|(_, r)| r.depth);
        let mut seen = HashSet::new();
        seen.insert(seed.video_id.clone());
        for (i, (line_no, rec)) in recs.iter().enumerate() {
            let expected = i as u32 + 1;
            if rec.depth < expected {
                return Err(ChainError::InvariantViolation(format!(
                    "line {line_no}: duplicate (session_id, depth) = ({:?}, {})",
                    key.1, rec.depth
                )));
            }
            if rec.depth > expected {
                return Err(ChainError::InvariantViolation(format!(
                    "line {line_no}: depth gap in session {:?}: expected {expected}, found {}",
                    key.1, rec.depth
                )));
            }
            if !seen.insert(rec.video_id.clone()) {
                return Err(ChainError::DuplicateVideoId(rec.video_id.clone()));
            }
        }
        chains.push(RecommendationChain {
            seed,
            recs: recs.into_iter().map(|(_, r)| r).collect(),
            session_id: key.1,
        });
    }

    AuditDataset::new(opts.name.clone(), max_depth, chains)
}

/// Writes one record per video: seed first, then recs by depth, chains in order.
pub fn serialize_dataset<W: Write>(d: &AuditDataset, mut out: W) -> Result<(), ChainError> {
    for chain in &d.chains {
        for video in chain.videos() {
            let line = RecordLine {
                video_id: video.video_id.clone(),
                domain_label: video.domain_label.clone(),
                role: video.role,
                depth: video.depth,
                seed_id: video.seed_id.clone(),
                session_id: chain.session_id.clone(),
                keyword: video.keyword.clone(),
                frame_dir: video.frame_dir.clone(),
                extra: video.extra.clone(),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| ChainError::Io(e.to_string()))?;
            out.write_all(b"\n").map_err(|e| ChainError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

pub fn serialize_to_vec(d: &AuditDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    serialize_dataset(d, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_videos: u64,
    pub n_seeds: u64,
    pub n_recs: u64,
    pub n_frames: u64,
    pub n_keyframes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub stats: DatasetStats,
    /// Videos with a `frame_dir` but no keyframe entry; counted with zero frames.
    pub warnings: Vec<String>,
}

/// Counts videos, frames and keyframes. Every chain occurrence of a video counts.
pub fn dataset_stats(d: &AuditDataset, keyframes: &HashMap<String, KeyframeSet>) -> StatsReport {
    let mut stats = DatasetStats::default();
    let mut warnings = Vec::new();
    for video in d.videos() {
        stats.n_videos += 1;
        match video.role {
            Role::Seed => stats.n_seeds += 1,
            Role::Recommended => stats.n_recs += 1,
        }
        match keyframes.get(&video.video_id) {
            Some(set) => {
                stats.n_frames += set.n_frames as u64;
                stats.n_keyframes += set.indices.len() as u64;
            }
            None if video.frame_dir.is_some() => {
                warnings.push(format!(
                    "no keyframes for video {:?} (frame_dir {:?}); counted as 0 frames",
                    video.video_id,
                    video.frame_dir.as_deref().unwrap_or_default()
                ));
            }
            None => {}
        }
    }
    StatsReport { stats, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(seed: &str, recs: &[&str], session: &str) -> RecommendationChain {
        let seed_rec = VideoRecord::seed(seed, "scs");
        let recs = recs
            .iter()
            .enumerate()
            .map(|(i, id)| VideoRecord::recommended(*id, "scs", seed, i as u32 + 1))
            .collect();
        RecommendationChain::new(seed_rec, recs, session).unwrap()
    }

    fn parse(s: &str) -> Result<AuditDataset, ChainError> {
        parse_dataset(s.as_bytes(), &ParseOptions::named("t"))
    }

    #[test]
    fn empty_stream_is_empty_dataset() {
        let d = parse("").unwrap();
        assert!(d.chains.is_empty());
        assert!(serialize_to_vec(&d).is_empty());
    }

    #[test]
    fn one_seed_two_recs_is_three_lines() {
        let d = AuditDataset::new("t", 2, vec![chain("s", &["a", "b"], "x")]).unwrap();
        let bytes = serialize_to_vec(&d);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(serialize_to_vec(&d), bytes);
        assert!(text.lines().next().unwrap().starts_with(
            r#"{"video_id":"s","domain_label":"scs","role":"seed","depth":0,"seed_id":"s","session_id":"x","keyword":"","frame_dir":null"#
        ));
        let back = parse_dataset(bytes.as_slice(), &ParseOptions::named("t")).unwrap();
        assert_eq!(back, d);
    }

    fn line(id: &str, role: &str, depth: u32, seed: &str) -> String {
        format!(
            r#"{{"video_id":"{id}","domain_label":"scs","role":"{role}","depth":{depth},"seed_id":"{seed}","session_id":"s1","keyword":"","frame_dir":null}}"#
        )
    }

    #[test]
    fn depth_gap_is_rejected() {
        let text = [
            line("s", "seed", 0, "s"),
            line("a", "recommended", 1, "s"),
            line("b", "recommended", 2, "s"),
            line("c", "recommended", 4, "s"),
        ]
        .join("\n");
        match parse(&text) {
            Err(ChainError::InvariantViolation(msg)) => {
                assert!(msg.contains("depth gap"), "{msg}");
                assert!(msg.starts_with("line 4"), "{msg}");
            }
            other => panic!("expected depth gap, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_depth_and_duplicate_video_rejected() {
        let dup_depth = [
            line("s", "seed", 0, "s"),
            line("a", "recommended", 1, "s"),
            line("b", "recommended", 1, "s"),
        ]
        .join("\n");
        assert!(matches!(parse(&dup_depth), Err(ChainError::InvariantViolation(m)) if m.contains("duplicate")));

        let dup_video = [
            line("s", "seed", 0, "s"),
            line("a", "recommended", 1, "s"),
            line("a", "recommended", 2, "s"),
        ]
        .join("\n");
        assert_eq!(parse(&dup_video), Err(ChainError::DuplicateVideoId("a".into())));
    }

    #[test]
    fn same_video_in_two_chains_is_allowed() {
        let d = AuditDataset::new(
            "t",
            1,
            vec![chain("s1", &["shared"], "x"), chain("s2", &["shared"], "y")],
        )
        .unwrap();
        let back = parse(std::str::from_utf8(&serialize_to_vec(&d)).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn role_depth_mismatch_and_malformed_lines() {
        let bad_role = line("s", "recommended", 0, "s");
        assert!(matches!(parse(&bad_role), Err(ChainError::InvariantViolation(m)) if m.starts_with("line 1")));
        let seedless = line("a", "recommended", 1, "s");
        assert!(matches!(parse(&seedless), Err(ChainError::InvariantViolation(m)) if m.contains("no seed")));
        let text = format!("{}\n{{not json", line("s", "seed", 0, "s"));
        assert!(matches!(parse(&text), Err(ChainError::MalformedLine { line_no: 2, .. })));
        let missing_field = r#"{"video_id":"s","role":"seed"}"#;
        assert!(matches!(parse(missing_field), Err(ChainError::MalformedLine { line_no: 1, .. })));
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let text = r#"{"video_id":"s","domain_label":"scs","role":"seed","depth":0,"seed_id":"s","session_id":"x","keyword":"reef","frame_dir":"frames/s","views":12,"collector":{"v":2}}"#;
        let d = parse(text).unwrap();
        assert_eq!(d.chains[0].seed.extra.len(), 2);
        let out = String::from_utf8(serialize_to_vec(&d)).unwrap();
        assert_eq!(out.trim_end(), text.replace(r#""views":12,"collector":{"v":2}"#, r#""collector":{"v":2},"views":12"#));
    }

    #[test]
    fn declared_max_depth_is_enforced() {
        let text = [line("s", "seed", 0, "s"), line("a", "recommended", 1, "s"), line("b", "recommended", 2, "s")].join("\n");
        let opts = ParseOptions { name: "t".into(), max_depth: Some(1) };
        assert!(parse_dataset(text.as_bytes(), &opts).is_err());
        let opts = ParseOptions { name: "t".into(), max_depth: Some(10) };
        assert_eq!(parse_dataset(text.as_bytes(), &opts).unwrap().max_depth, 10);
    }

    #[test]
    fn stats_count_seeds_recs_and_missing_keyframes() {
        let mut c = chain("s", &["a", "b"], "x");
        c.recs[0].frame_dir = Some("frames/a".into());
        let d = AuditDataset::new("t", 2, vec![c]).unwrap();
        let mut kf = HashMap::new();
        kf.insert(
            "s".to_string(),
            KeyframeSet { indices: vec![0, 7], n_frames: 40, config_hash: "h".into() },
        );
        let report = dataset_stats(&d, &kf);
        assert_eq!(
            report.stats,
            DatasetStats { n_videos: 3, n_seeds: 1, n_recs: 2, n_frames: 40, n_keyframes: 2 }
        );
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("\"a\""));

        let empty = dataset_stats(&AuditDataset::empty("e"), &HashMap::new());
        assert_eq!(empty.stats, DatasetStats::default());
    }
}
