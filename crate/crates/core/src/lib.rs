//! Drift and divergence audit for short-form video recommendation chains.
//!
//! The pipeline walks recommendation chains from seed videos, reduces each
//! video to perceptually salient keyframes, attaches unit-norm image and
//! caption embeddings, and measures how far the recommended content moves
//! away from the seeds:
//!
//! * [`chain`]: dataset model and JSONL persistence;
//! * [`collector`]: chain walks against pluggable providers, including a
//!   seeded synthetic recommendation graph;
//! * [`keyframe`]: perceptual-change keyframe extraction;
//! * [`embedding`]: keyed embedding sets, files and the sidecar client;
//! * [`analysis`]: cluster spread, JSD and sliced Wasserstein metrics;
//! * [`projection`]: PCA / imported 2-D projections, hulls, plot CSVs;
//! * [`pipeline`]: config-driven orchestration with content-hash caching.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the pipeline's default precision.

// `!(x > 0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod chain;
pub mod collector;
pub mod embedding;
pub mod hashing;
pub mod keyframe;
pub mod pipeline;
pub mod projection;
pub mod scalar;
pub mod workers;

pub use scalar::Scalar;

/// Default precision for analysis.
pub type Real = f64;
pub type Embeddings = embedding::EmbeddingSet<Real>;
pub type Cloud = embedding::GroupedCloud<Real>;
pub type Salience = keyframe::SalienceSeries<Real>;
pub type KeyframeParams = keyframe::KeyframeConfig<Real>;
pub type Stats = analysis::ClusterStats<Real>;
pub type Report = analysis::DivergenceReport;
pub type Codebook = analysis::Codebook<Real>;
pub type Projection = projection::Projection2D<Real>;
pub type Hull = projection::HullPolygon<Real>;
