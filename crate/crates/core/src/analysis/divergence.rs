//! Distribution distances between two clouds and the Δ comparisons.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_cloud, diameter, AnalysisError, ClusterStats, Codebook};
use crate::scalar::{dot, Scalar};

/// Jensen–Shannon divergence (base 2) of two histograms over the same bins.
///
/// Inputs are normalized to probabilities; `0·log 0` terms count as zero.
/// The result lies in `[0, 1]`.
pub fn jsd_from_histograms<T: Scalar>(p: &[T], q: &[T]) -> T {
    debug_assert_eq!(p.len(), q.len());
    let sp: T = p.iter().copied().sum();
    let sq: T = q.iter().copied().sum();
    let half = T::lit(0.5);
    let mut total = T::zero();
    for (&a, &b) in p.iter().zip(q) {
        let pa = a / sp;
        let qb = b / sq;
        let m = half * (pa + qb);
        let term = |x: T| if x > T::zero() { half * x * (x / m).log2() } else { T::zero() };
        // Summing the pair first keeps the result bit-identical under p <-> q.
        total = total + (term(pa) + term(qb));
    }
    total.max(T::zero()).min(T::one())
}

/// JSD between the codeword distributions of two clouds.
pub fn jsd<T: Scalar>(p: &[Vec<T>], q: &[Vec<T>], codebook: &Codebook<T>) -> Result<T, AnalysisError> {
    check_cloud(p)?;
    check_cloud(q)?;
    let hp: Vec<T> = codebook.histogram(p).into_iter().map(T::count).collect();
    let hq: Vec<T> = codebook.histogram(q).into_iter().map(T::count).collect();
    Ok(jsd_from_histograms(&hp, &hq))
}

/// Exact Wasserstein-1 distance between two 1-D empirical distributions with
/// uniform weights, via the sorted quantile coupling.
pub fn wasserstein_1d<T: Scalar>(a: &[T], b: &[T]) -> Result<T, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptyCloud);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    let cmp = |x: &T, y: &T| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal);
    a.sort_by(cmp);
    b.sort_by(cmp);
    let (na, nb) = (a.len(), b.len());
    // Quantile levels are i/na and j/nb; compare on the common grid 1/(na·nb).
    let total = na * nb;
    let (mut i, mut j, mut t) = (0usize, 0usize, 0usize);
    let mut acc = T::zero();
    while i < na && j < nb {
        let next_a = (i + 1) * nb;
        let next_b = (j + 1) * na;
        let next = next_a.min(next_b);
        acc = acc + T::count(next - t) * (a[i] - b[j]).abs();
        t = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(acc / T::count(total))
}

/// `n` directions drawn uniformly from the unit sphere in `dim` dimensions.
pub fn random_directions<T: Scalar>(dim: usize, n: usize, rng_seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.push(g.into_iter().map(|x| T::lit(x / norm)).collect());
        }
    }
    out
}

/// Mean of the per-direction 1-D Wasserstein-1 distances.
pub fn sliced_wasserstein_with_directions<T: Scalar>(
    p: &[Vec<T>],
    q: &[Vec<T>],
    directions: &[Vec<T>],
) -> Result<T, AnalysisError> {
    let dp = check_cloud(p)?;
    let dq = check_cloud(q)?;
    if dp != dq {
        return Err(AnalysisError::DimMismatch(dp, dq));
    }
    if directions.is_empty() {
        return Err(AnalysisError::InvalidConfig("no slice directions".into()));
    }
    let per_slice: Vec<T> = directions
        .par_iter()
        .map(|dir| {
            let a: Vec<T> = p.iter().map(|x| dot(x, dir)).collect();
            let b: Vec<T> = q.iter().map(|x| dot(x, dir)).collect();
            wasserstein_1d(&a, &b).expect("clouds checked non-empty")
        })
        .collect();
    let total: T = per_slice.into_iter().sum();
    Ok(total / T::count(directions.len()))
}

/// Sliced Wasserstein-1 over `n_slices` seeded random directions.
pub fn sliced_wasserstein<T: Scalar>(
    p: &[Vec<T>],
    q: &[Vec<T>],
    n_slices: usize,
    rng_seed: u64,
) -> Result<T, AnalysisError> {
    let d = check_cloud(p)?;
    check_cloud(q)?;
    if n_slices == 0 {
        return Err(AnalysisError::InvalidConfig("n_slices must be >= 1".into()));
    }
    sliced_wasserstein_with_directions(p, q, &random_directions(d, n_slices, rng_seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledWasserstein<T> {
    pub value: T,
    pub diameter: T,
    pub diameter_sampled: bool,
}

/// Divides `raw` by the diameter of the pooled clouds, clamped to `[0, 1]`.
pub fn scale_wasserstein<T: Scalar>(
    raw: T,
    clouds: &[&[Vec<T>]],
    max_exact_n: usize,
    rng_seed: u64,
) -> Result<ScaledWasserstein<T>, AnalysisError> {
    let pooled: Vec<Vec<T>> = clouds.iter().flat_map(|c| c.iter().cloned()).collect();
    let (diam, sampled) = diameter(&pooled, max_exact_n, rng_seed)?;
    if !(diam > T::zero()) {
        return Err(AnalysisError::DegenerateDiameter);
    }
    Ok(ScaledWasserstein {
        value: (raw / diam).max(T::zero()).min(T::one()),
        diameter: diam,
        diameter_sampled: sampled,
    })
}

/// `(rec.variance − seed.variance, rec.intra − seed.intra)`.
///
/// The intra term is `None` when either side has a single point.
pub fn delta_metrics<T: Scalar>(seed: &ClusterStats<T>, rec: &ClusterStats<T>) -> (T, Option<T>) {
    let dv = rec.variance - seed.variance;
    let di = match (rec.intra_mean(), seed.intra_mean()) {
        (Some(r), Some(s)) => Some(r - s),
        _ => None,
    };
    (dv, di)
}

/// Domain A's share of the total positive change: `a⁺ / (a⁺ + b⁺)`.
pub fn cross_domain_normalize<T: Scalar>(delta_a: T, delta_b: T) -> Result<T, AnalysisError> {
    let a = delta_a.max(T::zero());
    let b = delta_b.max(T::zero());
    let total = a + b;
    if !(total > T::zero()) {
        return Err(AnalysisError::BothZero);
    }
    Ok(a / total)
}
