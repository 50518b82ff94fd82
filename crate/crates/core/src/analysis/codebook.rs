//! Seeded k-means codebook used to discretize clouds for JSD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_cloud, AnalysisError};
use crate::scalar::{sq_dist, Scalar};

pub const KMEANS_MAX_ITERS: usize = 100;
/// Lloyd iterations stop once no center moves further than this.
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub k: usize,
    pub centers: Vec<Vec<T>>,
    pub rng_seed: u64,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Scalar> Codebook<T> {
    /// Index of the nearest center; ties go to the lower index.
    pub fn assign(&self, point: &[T]) -> usize {
        nearest(&self.centers, point).0
    }

    /// Codeword counts for a cloud.
    pub fn histogram(&self, points: &[Vec<T>]) -> Vec<usize> {
        let mut h = vec![0usize; self.k];
        for a in points.par_iter().map(|p| self.assign(p)).collect::<Vec<_>>() {
            h[a] += 1;
        }
        h
    }
}

fn nearest<T: Scalar>(centers: &[Vec<T>], p: &[T]) -> (usize, T) {
    let mut best = (0, sq_dist(&centers[0], p));
    for (i, c) in centers.iter().enumerate().skip(1) {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn kmeanspp<T: Scalar>(points: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<T>>, AnalysisError> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0]).as_f64()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            let distinct = centers.len();
            return Err(AnalysisError::TooFewDistinct { distinct, k });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let chosen = points[pick.expect("positive total has a positive weight")].clone();
        for (w, p) in d2.iter_mut().zip(points) {
            let d = sq_dist(p, &chosen).as_f64();
            if d < *w {
                *w = d;
            }
        }
        centers.push(chosen);
    }
    Ok(centers)
}

/// Fits `k` centers on the pooled points with seeded k-means++ and Lloyd
/// iterations (cap [`KMEANS_MAX_ITERS`], tolerance [`KMEANS_TOL`]).
///
/// A center that loses all its points keeps its previous position.
pub fn fit_codebook<T: Scalar>(points: &[Vec<T>], k: usize, rng_seed: u64) -> Result<Codebook<T>, AnalysisError> {
    let d = check_cloud(points)?;
    if k < 2 {
        return Err(AnalysisError::InvalidConfig(format!("codebook size must be >= 2, got {k}")));
    }
    if points.len() < k {
        return Err(AnalysisError::TooFewPoints { n: points.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centers = kmeanspp(points, k, &mut rng)?;
    let tol = T::lit(KMEANS_TOL);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let assignment: Vec<usize> = points.par_iter().map(|p| nearest(&centers, p).0).collect();
        let mut sums = vec![vec![T::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p) {
                *s = *s + x;
            }
        }
        let mut max_shift = T::zero();
        for ((c, s), &cnt) in centers.iter_mut().zip(sums).zip(&counts) {
            if cnt == 0 {
                continue;
            }
            let m = T::count(cnt);
            let next: Vec<T> = s.into_iter().map(|x| x / m).collect();
            let shift = sq_dist(c, &next).sqrt();
            if shift > max_shift {
                max_shift = shift;
            }
            *c = next;
        }
        if max_shift <= tol {
            converged = true;
            break;
        }
    }
    Ok(Codebook {
        k,
        centers,
        rng_seed,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> (Vec<Vec<f64>>, [Vec<f64>; 2]) {
        let truth = [vec![-5.0, 0.0], vec![5.0, 1.0]];
        let mut pts = Vec::new();
        for c in &truth {
            for i in 0..40 {
                let a = i as f64 * 0.7;
                pts.push(vec![c[0] + 0.5 * a.cos(), c[1] + 0.5 * a.sin()]);
            }
        }
        (pts, truth)
    }

    #[test]
    fn two_blobs_are_recovered() {
        let (pts, truth) = blobs();
        let cb = fit_codebook(&pts, 2, 3).unwrap();
        assert!(cb.converged);
        for t in &truth {
            let best = cb.centers.iter().map(|c| sq_dist(c, t).sqrt()).fold(f64::INFINITY, f64::min);
            assert!(best < 0.5, "center off by {best}");
        }
        assert_eq!(cb, fit_codebook(&pts, 2, 3).unwrap());
    }

    #[test]
    fn k_equals_n_gives_every_point_its_own_center() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let cb = fit_codebook(&pts, 6, 9).unwrap();
        let mut assigned: Vec<usize> = pts.iter().map(|p| cb.assign(p)).collect();
        for (p, &a) in pts.iter().zip(&assigned) {
            assert_eq!(sq_dist(p, &cb.centers[a]), 0.0);
        }
        assigned.sort();
        assigned.dedup();
        assert_eq!(assigned.len(), 6);
    }

    #[test]
    fn degenerate_inputs() {
        let pts = vec![vec![1.0f64, 1.0]; 5];
        assert_eq!(fit_codebook(&pts, 2, 0), Err(AnalysisError::TooFewDistinct { distinct: 1, k: 2 }));
        assert_eq!(fit_codebook(&pts[..1], 2, 0), Err(AnalysisError::TooFewPoints { n: 1, k: 2 }));
        assert!(matches!(fit_codebook(&pts, 1, 0), Err(AnalysisError::InvalidConfig(_))));
    }
}
