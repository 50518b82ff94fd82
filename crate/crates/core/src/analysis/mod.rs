//! Spread and divergence metrics between seed and recommended clouds.
//!
//! Per group: centroid variance (mean squared distance to the centroid) and
//! mean pairwise distance. Between groups: Jensen–Shannon divergence over a
//! shared k-means codebook, and sliced Wasserstein-1 scaled by the diameter of
//! the pooled cloud. Every random choice takes an explicit seed.

mod codebook;
mod divergence;
mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::scalar::{dist, sq_dist, Scalar};

pub use codebook::{fit_codebook, Codebook, KMEANS_MAX_ITERS, KMEANS_TOL};
pub use divergence::{
    cross_domain_normalize, delta_metrics, jsd, jsd_from_histograms, random_directions,
    scale_wasserstein, sliced_wasserstein, sliced_wasserstein_with_directions, wasserstein_1d,
    ScaledWasserstein,
};
pub use report::{
    compare_domains, AnalysisConfig, CellReport, DivergenceReport, DomainReport,
    ModalityComparison, StatsSummary, DIVERGENCE_ROWS, SPREAD_ROWS,
};

/// Clouds up to this size use exact all-pairs computations by default.
pub const DEFAULT_MAX_EXACT_N: usize = 2000;
/// Pair budget for sampled estimates on larger clouds.
pub const SAMPLED_PAIRS: usize = 1_000_000;
const SAMPLE_CHUNKS: usize = 16;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AnalysisError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("need at least two points")]
    SinglePoint,
    #[error("points have inconsistent dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("codebook needs at least k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("only {distinct} distinct points for k={k} codewords")]
    TooFewDistinct { distinct: usize, k: usize },
    #[error("all points coincide; diameter is zero")]
    DegenerateDiameter,
    #[error("both domains show no positive change")]
    BothZero,
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),
}

pub(crate) fn check_cloud<T: Scalar>(points: &[Vec<T>]) -> Result<usize, AnalysisError> {
    let first = points.first().ok_or(AnalysisError::EmptyCloud)?;
    let d = first.len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(AnalysisError::DimMismatch(d, p.len()));
    }
    Ok(d)
}

pub fn centroid<T: Scalar>(points: &[Vec<T>]) -> Result<Vec<T>, AnalysisError> {
    let d = check_cloud(points)?;
    let mut c = vec![T::zero(); d];
    for p in points {
        for (ci, &x) in c.iter_mut().zip(p) {
            *ci = *ci + x;
        }
    }
    let n = T::count(points.len());
    Ok(c.into_iter().map(|x| x / n).collect())
}

/// `(1/n)·Σ‖xᵢ − x̄‖²`.
pub fn centroid_variance<T: Scalar>(points: &[Vec<T>]) -> Result<T, AnalysisError> {
    let c = centroid(points)?;
    let total: T = points.iter().map(|p| sq_dist(p, &c)).sum();
    Ok(total / T::count(points.len()))
}

/// Mean pairwise distance, with how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraDistance<T> {
    pub mean: T,
    pub sampled: bool,
    pub pairs: u64,
}

/// Sum over `j > i` of `f(i, j)`, reduced row by row in index order.
fn pair_row_sums<T: Scalar>(n: usize, f: impl Fn(usize, usize) -> T + Sync) -> Vec<T> {
    (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| f(i, j)).sum::<T>())
        .collect()
}

/// Uniform pairs `i != j`, split into fixed seeded chunks so the result does
/// not depend on the thread count.
fn sampled_pairs<T: Scalar, R: Send>(
    n: usize,
    pairs: usize,
    rng_seed: u64,
    init: impl Fn() -> R + Sync,
    fold: impl Fn(R, T) -> R + Sync,
    f: impl Fn(usize, usize) -> T + Sync,
) -> Vec<R> {
    let per_chunk = pairs.div_ceil(SAMPLE_CHUNKS);
    (0..SAMPLE_CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &format!("pairs/{chunk}")));
            let count = per_chunk.min(pairs.saturating_sub(chunk * per_chunk));
            let mut acc = init();
            for _ in 0..count {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                acc = fold(acc, f(i, j));
            }
            acc
        })
        .collect()
}

/// Mean Euclidean distance over unordered pairs.
///
/// Exact for `n <= max_exact_n`; otherwise estimated from [`SAMPLED_PAIRS`]
/// uniformly drawn pairs.
pub fn mean_intra_distance<T: Scalar>(
    points: &[Vec<T>],
    max_exact_n: usize,
    rng_seed: u64,
) -> Result<IntraDistance<T>, AnalysisError> {
    check_cloud(points)?;
    let n = points.len();
    if n < 2 {
        return Err(AnalysisError::SinglePoint);
    }
    let d = |i: usize, j: usize| dist(&points[i], &points[j]);
    if n <= max_exact_n {
        let total: T = pair_row_sums(n, d).into_iter().sum();
        let pairs = (n * (n - 1) / 2) as u64;
        Ok(IntraDistance {
            mean: total / T::lit(pairs as f64),
            sampled: false,
            pairs,
        })
    } else {
        let sums = sampled_pairs(n, SAMPLED_PAIRS, rng_seed, T::zero, |a, x| a + x, d);
        let total: T = sums.into_iter().sum();
        Ok(IntraDistance {
            mean: total / T::count(SAMPLED_PAIRS),
            sampled: true,
            pairs: SAMPLED_PAIRS as u64,
        })
    }
}

/// Largest pairwise distance; sampled past `max_exact_n` points.
pub fn diameter<T: Scalar>(
    points: &[Vec<T>],
    max_exact_n: usize,
    rng_seed: u64,
) -> Result<(T, bool), AnalysisError> {
    check_cloud(points)?;
    let n = points.len();
    if n < 2 {
        return Ok((T::zero(), false));
    }
    let d = |i: usize, j: usize| dist(&points[i], &points[j]);
    let max = |a: T, b: T| if b > a { b } else { a };
    if n <= max_exact_n {
        let rows: Vec<T> = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| d(i, j)).fold(T::zero(), max))
            .collect();
        Ok((rows.into_iter().fold(T::zero(), max), false))
    } else {
        let parts = sampled_pairs(n, SAMPLED_PAIRS, rng_seed, T::zero, max, d);
        Ok((parts.into_iter().fold(T::zero(), max), true))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats<T> {
    pub n: usize,
    pub variance: T,
    /// `None` for a single point.
    pub intra_dist: Option<IntraDistance<T>>,
    pub centroid: Vec<T>,
}

impl<T: Scalar> ClusterStats<T> {
    pub fn compute(points: &[Vec<T>], max_exact_n: usize, rng_seed: u64) -> Result<Self, AnalysisError> {
        let centroid = centroid(points)?;
        let variance = points.iter().map(|p| sq_dist(p, &centroid)).sum::<T>() / T::count(points.len());
        let intra_dist = match mean_intra_distance(points, max_exact_n, rng_seed) {
            Ok(v) => Some(v),
            Err(AnalysisError::SinglePoint) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            n: points.len(),
            variance,
            intra_dist,
            centroid,
        })
    }

    pub fn intra_mean(&self) -> Option<T> {
        self.intra_dist.map(|d| d.mean)
    }
}
