//! 2-D projections of embedding clouds, convex hulls and plot-ready CSVs.
//!
//! PCA is exact: small problems go through a cyclic Jacobi eigensolver on the
//! covariance (or the Gram matrix when there are fewer points than
//! dimensions); large ones use seeded orthogonal iteration followed by a
//! Rayleigh–Ritz step. Externally computed coordinates (UMAP, t-SNE, ...) can
//! be imported instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::Role;
use crate::embedding::{EmbeddingKey, Modality, PointLabel};
use crate::scalar::{dot, Scalar};

/// Largest matrix side handed to the dense Jacobi solver.
pub const JACOBI_MAX_DIM: usize = 256;
const JACOBI_MAX_SWEEPS: usize = 100;
const SUBSPACE_MAX_ITERS: usize = 500;
const SUBSPACE_OVERSAMPLE: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("cloud has zero variance")]
    DegenerateCloud,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("invalid projection request: {0}")]
    InvalidRequest(String),
    #[error("coordinates file names unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("coordinates file lacks keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ProjectionError {
    ProjectionError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Imported,
}

/// Principal axes of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca<T> {
    pub mean: Vec<T>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<T>>,
    /// Variance captured by each direction.
    pub eigenvalues: Vec<T>,
    /// Each eigenvalue over the total variance.
    pub explained_variance_ratio: Vec<T>,
    /// Row `i` holds the coordinates of point `i`.
    pub coords: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D<T> {
    pub coords: Vec<[T; 2]>,
    pub explained_variance_ratio: Option<[T; 2]>,
    pub method: ProjectionMethod,
    pub labels: Vec<PointLabel>,
}

/// Counter-clockwise hull vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct HullPolygon<T> {
    pub vertices: Vec<[T; 2]>,
    /// Collinear or coincident input: fewer than 3 vertices.
    pub degenerate: bool,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors.
pub fn symmetric_eigen<T: Scalar>(matrix: &[Vec<T>]) -> (Vec<T>, Vec<Vec<T>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<T>> = matrix.to_vec();
    let mut v = vec![vec![T::zero(); n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = T::one();
    }
    let frob: T = a.iter().flatten().map(|&x| x * x).sum();
    let tol = T::epsilon() * T::epsilon() * frob;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off = off + a[p][q] * a[p][q];
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (T::lit(2.0) * apq);
                let t = if theta.abs() > T::lit(1e150) {
                    T::one() / (T::lit(2.0) * theta)
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = c * pk - s * qk;
                    a[q][k] = s * pk + c * qk;
                }
                for row in v.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (values, vectors)
}

/// Flips `v` so its largest-magnitude component (lowest index on ties) is positive.
fn fix_sign<T: Scalar>(v: &mut [T]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn normalize_in_place<T: Scalar>(v: &mut [T]) -> T {
    let n = dot(v, v).sqrt();
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x = *x / n);
    }
    n
}

/// Modified Gram–Schmidt; columns that collapse are replaced by a fresh
/// seeded direction and re-orthogonalized.
fn orthonormalize<T: Scalar>(basis: &mut [Vec<T>], rng: &mut ChaCha8Rng) {
    for i in 0..basis.len() {
        loop {
            for j in 0..i {
                let (head, tail) = basis.split_at_mut(i);
                let proj = dot(&tail[0], &head[j]);
                for (x, &y) in tail[0].iter_mut().zip(&head[j]) {
                    *x = *x - proj * y;
                }
            }
            if normalize_in_place(&mut basis[i]) > T::lit(1e-10) {
                break;
            }
            for x in basis[i].iter_mut() {
                *x = T::lit(rng.random::<f64>() - 0.5);
            }
        }
    }
}

/// `C·v` with `C = XᵀX / n` applied implicitly.
fn cov_apply<T: Scalar>(x: &[Vec<T>], v: &[T]) -> Vec<T> {
    let n = T::count(x.len());
    let mut out = vec![T::zero(); v.len()];
    for row in x {
        let s = dot(row, v);
        for (o, &r) in out.iter_mut().zip(row) {
            *o = *o + s * r;
        }
    }
    out.into_iter().map(|o| o / n).collect()
}

/// Top eigenpairs of the covariance of centered rows `x` by orthogonal iteration.
fn subspace_eigen<T: Scalar>(x: &[Vec<T>], k: usize) -> (Vec<T>, Vec<Vec<T>>) {
    let d = x[0].len();
    let b = (k + SUBSPACE_OVERSAMPLE).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1ab1e);
    let mut q: Vec<Vec<T>> = (0..b).map(|_| (0..d).map(|_| T::lit(rng.random::<f64>() - 0.5)).collect()).collect();
    orthonormalize(&mut q, &mut rng);
    let mut prev: Vec<T> = vec![T::zero(); b];
    for _ in 0..SUBSPACE_MAX_ITERS {
        let mut z: Vec<Vec<T>> = q.iter().map(|c| cov_apply(x, c)).collect();
        let ritz: Vec<T> = z.iter().zip(&q).map(|(zc, qc)| dot(zc, qc)).collect();
        orthonormalize(&mut z, &mut rng);
        q = z;
        let scale = ritz.iter().fold(T::zero(), |m, &r| m.max(r.abs())).max(T::min_positive_value());
        let moved = ritz.iter().zip(&prev).take(k).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        prev = ritz;
        if moved <= T::lit(1e-13) * scale {
            break;
        }
    }
    // Rayleigh–Ritz on the converged subspace.
    let cq: Vec<Vec<T>> = q.iter().map(|c| cov_apply(x, c)).collect();
    let h: Vec<Vec<T>> = (0..b).map(|i| (0..b).map(|j| dot(&q[i], &cq[j])).collect()).collect();
    let (vals, vecs) = symmetric_eigen(&h);
    let dirs = vecs
        .iter()
        .take(k)
        .map(|u| {
            let mut v = vec![T::zero(); d];
            for (ui, qi) in u.iter().zip(&q) {
                for (o, &x) in v.iter_mut().zip(qi) {
                    *o = *o + *ui * x;
                }
            }
            normalize_in_place(&mut v);
            v
        })
        .collect();
    (vals.into_iter().take(k).collect(), dirs)
}

/// Principal component analysis keeping `out_dim` directions.
pub fn pca<T: Scalar>(points: &[Vec<T>], out_dim: usize) -> Result<Pca<T>, ProjectionError> {
    let n = points.len();
    if n < 2 {
        return Err(ProjectionError::TooFewPoints { need: 2, got: n });
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(ProjectionError::InvalidRequest("points have inconsistent dimensions".into()));
    }
    if out_dim == 0 || d < out_dim {
        return Err(ProjectionError::InvalidRequest(format!("cannot project {d}-D points to {out_dim}-D")));
    }
    let nt = T::count(n);
    let mut mean = vec![T::zero(); d];
    for p in points {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m = *m + x;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / nt);
    let x: Vec<Vec<T>> = points.iter().map(|p| p.iter().zip(&mean).map(|(&a, &m)| a - m).collect()).collect();
    let total: T = x.iter().map(|r| dot(r, r)).sum::<T>() / nt;
    if !(total > T::zero()) {
        return Err(ProjectionError::DegenerateCloud);
    }

    let (eigenvalues, mut components) = if d <= n && d <= JACOBI_MAX_DIM {
        let mut c = vec![vec![T::zero(); d]; d];
        for r in &x {
            for i in 0..d {
                for j in i..d {
                    c[i][j] = c[i][j] + r[i] * r[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                c[i][j] = c[i][j] / nt;
                c[j][i] = c[i][j];
            }
        }
        let (vals, vecs) = symmetric_eigen(&c);
        (vals.into_iter().take(out_dim).collect::<Vec<_>>(), vecs.into_iter().take(out_dim).collect::<Vec<_>>())
    } else if n < d && n <= JACOBI_MAX_DIM {
        // Gram trick: eigenvectors u of XXᵀ/n map to Xᵀu.
        let g: Vec<Vec<T>> = (0..n).map(|i| (0..n).map(|j| dot(&x[i], &x[j]) / nt).collect()).collect();
        let (vals, vecs) = symmetric_eigen(&g);
        let mut comps = Vec::with_capacity(out_dim);
        let mut kept = Vec::with_capacity(out_dim);
        // With fewer points than requested axes the tail is padded with zero-variance directions.
        let mut pairs = vals.into_iter().zip(vecs);
        for _ in 0..out_dim {
            let mut v = vec![T::zero(); d];
            let mut val = T::zero();
            if let Some((ev, u)) = pairs.next() {
                val = ev;
                for (ui, row) in u.iter().zip(&x) {
                    for (o, &r) in v.iter_mut().zip(row) {
                        *o = *o + *ui * r;
                    }
                }
            }
            if normalize_in_place(&mut v) <= T::lit(1e-12) * total.sqrt() {
                // Rank-deficient: any direction orthogonal to the kept ones has zero variance.
                v = vec![T::zero(); d];
                let mut rng = ChaCha8Rng::seed_from_u64(comps.len() as u64);
                let mut basis: Vec<Vec<T>> = comps.clone();
                basis.push((0..d).map(|_| T::lit(rng.random::<f64>() - 0.5)).collect());
                orthonormalize(&mut basis, &mut rng);
                v.clone_from(basis.last().expect("just pushed"));
                kept.push(T::zero());
            } else {
                kept.push(val.max(T::zero()));
            }
            comps.push(v);
        }
        (kept, comps)
    } else {
        subspace_eigen(&x, out_dim)
    };

    components.iter_mut().for_each(|c| fix_sign(c));
    let eigenvalues: Vec<T> = eigenvalues.into_iter().map(|v| v.max(T::zero())).collect();
    let explained_variance_ratio = eigenvalues.iter().map(|&v| (v / total).min(T::one())).collect();
    let coords = x.iter().map(|r| components.iter().map(|c| dot(r, c)).collect()).collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        explained_variance_ratio,
        coords,
    })
}

/// Two-component PCA projection with provenance labels.
pub fn pca_project<T: Scalar>(points: &[Vec<T>], labels: Vec<PointLabel>) -> Result<Projection2D<T>, ProjectionError> {
    if labels.len() != points.len() {
        return Err(ProjectionError::InvalidRequest(format!(
            "{} labels for {} points",
            labels.len(),
            points.len()
        )));
    }
    let p = pca(points, 2)?;
    Ok(Projection2D {
        coords: p.coords.iter().map(|c| [c[0], c[1]]).collect(),
        explained_variance_ratio: Some([p.explained_variance_ratio[0], p.explained_variance_ratio[1]]),
        method: ProjectionMethod::Pca,
        labels,
    })
}

fn cross<T: Scalar>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull by Andrew's monotone chain.
///
/// Vertices run counter-clockwise from the lowest-x (then lowest-y) point;
/// points on hull edges are dropped.
pub fn convex_hull<T: Scalar>(points: &[[T; 2]]) -> Result<HullPolygon<T>, ProjectionError> {
    if points.len() < 3 {
        return Err(ProjectionError::TooFewPoints { need: 3, got: points.len() });
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| {
        a[0].partial_cmp(&b[0])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a[1].partial_cmp(&b[1]).unwrap_or(std::cmp::Ordering::Equal))
    });
    pts.dedup();
    if pts.len() == 1 {
        return Ok(HullPolygon {
            vertices: pts,
            degenerate: true,
        });
    }
    let mut hull: Vec<[T; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= T::zero() {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= T::zero() {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    let degenerate = hull.len() < 3;
    Ok(HullPolygon {
        vertices: hull,
        degenerate,
    })
}

/// True when `p` lies inside or on a counter-clockwise polygon, with slack `eps`.
pub fn hull_contains<T: Scalar>(hull: &HullPolygon<T>, p: [T; 2], eps: T) -> bool {
    let v = &hull.vertices;
    match v.len() {
        0 => false,
        1 => (p[0] - v[0][0]).abs() <= eps && (p[1] - v[0][1]).abs() <= eps,
        2 => {
            let len = ((v[1][0] - v[0][0]).powi(2) + (v[1][1] - v[0][1]).powi(2)).sqrt();
            let t = ((p[0] - v[0][0]) * (v[1][0] - v[0][0]) + (p[1] - v[0][1]) * (v[1][1] - v[0][1])) / (len * len);
            cross(v[0], v[1], p).abs() <= eps * len && t >= -eps && t <= T::one() + eps
        }
        n => (0..n).all(|i| {
            let a = v[i];
            let b = v[(i + 1) % n];
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            cross(a, b, p) >= -eps * len
        }),
    }
}

#[derive(Debug, Deserialize)]
struct CoordRow {
    video_id: String,
    keyframe_index: u32,
    modality: String,
    x: f64,
    y: f64,
}

fn label_key(l: &PointLabel) -> EmbeddingKey {
    EmbeddingKey::new(l.video_id.clone(), l.keyframe_index, l.modality)
}

/// Reads externally computed coordinates (`video_id,keyframe_index,modality,x,y`)
/// for the given labelled points.
///
/// Every row must name a labelled key and every label must have a row.
pub fn import_coords<T: Scalar>(path: &Path, labels: Vec<PointLabel>) -> Result<Projection2D<T>, ProjectionError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| io_err(path, e))?;
    let known: BTreeSet<EmbeddingKey> = labels.iter().map(label_key).collect();
    let mut coords: BTreeMap<EmbeddingKey, [T; 2]> = BTreeMap::new();
    let mut unknown = Vec::new();
    for (i, rec) in rdr.deserialize::<CoordRow>().enumerate() {
        let row = i + 2;
        let r = rec.map_err(|e| ProjectionError::MalformedRow { row, reason: e.to_string() })?;
        let modality: Modality = r
            .modality
            .parse()
            .map_err(|_| ProjectionError::MalformedRow { row, reason: format!("unknown modality {:?}", r.modality) })?;
        if !(r.x.is_finite() && r.y.is_finite()) {
            return Err(ProjectionError::MalformedRow { row, reason: "non-finite coordinate".into() });
        }
        let key = EmbeddingKey::new(r.video_id, r.keyframe_index, modality);
        if !known.contains(&key) {
            unknown.push(key.to_string());
            continue;
        }
        if coords.insert(key.clone(), [T::lit(r.x), T::lit(r.y)]).is_some() {
            return Err(ProjectionError::MalformedRow { row, reason: format!("duplicate key {key}") });
        }
    }
    if !unknown.is_empty() {
        return Err(ProjectionError::UnknownKeys(unknown));
    }
    if coords.len() < 2 {
        return Err(ProjectionError::TooFewPoints { need: 2, got: coords.len() });
    }
    let missing: BTreeSet<String> = known.iter().filter(|k| !coords.contains_key(k)).map(|k| k.to_string()).collect();
    if !missing.is_empty() {
        return Err(ProjectionError::MissingKeys(missing.into_iter().collect()));
    }
    Ok(Projection2D {
        coords: labels.iter().map(|l| coords[&label_key(l)]).collect(),
        explained_variance_ratio: None,
        method: ProjectionMethod::Imported,
        labels,
    })
}

/// A hull tagged with the group it encloses.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledHull<T> {
    pub group: Role,
    pub domain: String,
    pub modality: Modality,
    pub hull: HullPolygon<T>,
}

/// Hulls per (domain, group) of a projection.
///
/// Seed groups always; recommended groups when `include_rec`. Groups with
/// fewer than 3 points are returned in the second list and get no hull.
pub fn group_hulls<T: Scalar>(
    proj: &Projection2D<T>,
    include_rec: bool,
) -> (Vec<LabeledHull<T>>, Vec<String>) {
    let mut groups: BTreeMap<(String, Role, Modality), Vec<[T; 2]>> = BTreeMap::new();
    for (l, c) in proj.labels.iter().zip(&proj.coords) {
        if l.group == Role::Seed || include_rec {
            groups.entry((l.domain.clone(), l.group, l.modality)).or_default().push(*c);
        }
    }
    let mut hulls = Vec::new();
    let mut skipped = Vec::new();
    for ((domain, group, modality), pts) in groups {
        match convex_hull(&pts) {
            Ok(hull) => hulls.push(LabeledHull {
                group,
                domain,
                modality,
                hull,
            }),
            Err(_) => skipped.push(format!("{domain}/{}/{}", role_str(group), modality.as_str())),
        }
    }
    (hulls, skipped)
}

fn role_str(r: Role) -> &'static str {
    match r {
        Role::Seed => "seed",
        Role::Recommended => "recommended",
    }
}

/// One projection and its hulls, as written by [`emit_plot_data`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotLayer<T> {
    pub projection: Projection2D<T>,
    pub hulls: Vec<LabeledHull<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotFiles {
    pub points: PathBuf,
    pub hulls: PathBuf,
}

pub const POINTS_CSV: &str = "points.csv";
pub const HULLS_CSV: &str = "hulls.csv";

/// Writes `points.csv` and `hulls.csv` into `dir`, layers in the given order.
pub fn emit_plot_data<T: Scalar>(layers: &[PlotLayer<T>], dir: &Path) -> Result<PlotFiles, ProjectionError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let points = dir.join(POINTS_CSV);
    let hulls = dir.join(HULLS_CSV);

    let mut w = csv::Writer::from_path(&points).map_err(|e| io_err(&points, e))?;
    w.write_record(["video_id", "keyframe_index", "modality", "domain", "group", "depth", "x", "y"])
        .map_err(|e| io_err(&points, e))?;
    for layer in layers {
        let proj = &layer.projection;
        for (l, c) in proj.labels.iter().zip(&proj.coords) {
            w.write_record([
                l.video_id.clone(),
                l.keyframe_index.to_string(),
                l.modality.as_str().to_string(),
                l.domain.clone(),
                role_str(l.group).to_string(),
                l.depth.to_string(),
                c[0].as_f64().to_string(),
                c[1].as_f64().to_string(),
            ])
            .map_err(|e| io_err(&points, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&points, e))?;

    let mut w = csv::Writer::from_path(&hulls).map_err(|e| io_err(&hulls, e))?;
    w.write_record(["group", "domain", "modality", "vertex_order", "x", "y"])
        .map_err(|e| io_err(&hulls, e))?;
    for h in layers.iter().flat_map(|l| &l.hulls) {
        for (i, v) in h.hull.vertices.iter().enumerate() {
            w.write_record([
                role_str(h.group).to_string(),
                h.domain.clone(),
                h.modality.as_str().to_string(),
                i.to_string(),
                v[0].as_f64().to_string(),
                v[1].as_f64().to_string(),
            ])
            .map_err(|e| io_err(&hulls, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&hulls, e))?;
    Ok(PlotFiles { points, hulls })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(video: &str, group: Role) -> PointLabel {
        PointLabel {
            video_id: video.into(),
            keyframe_index: 0,
            modality: Modality::Caption,
            domain: "a".into(),
            group,
            depth: if group == Role::Seed { 0 } else { 1 },
        }
    }

    #[test]
    fn fewer_points_than_axes_pads_with_zero_variance() {
        let p = vec![vec![0.0f64, 0.0, 0.0, 0.0], vec![1.0, 2.0, 0.0, 0.0]];
        let r = pca(&p, 3).unwrap();
        assert_eq!(r.components.len(), 3);
        assert_eq!(&r.eigenvalues[1..], &[0.0, 0.0]);
        for a in 0..3 {
            for b in 0..3 {
                let d = dot(&r.components[a], &r.components[b]);
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collinear_and_square_ratios() {
        let line: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca(&line, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_variance_ratio[1].abs() < 1e-12);

        let sq = vec![vec![0.0f64, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let p = pca(&sq, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 0.5).abs() < 1e-12);
        assert!((p.explained_variance_ratio[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pca_errors() {
        assert_eq!(pca(&vec![vec![1.0f64, 2.0]; 3], 2), Err(ProjectionError::DegenerateCloud));
        assert_eq!(pca(&[vec![1.0f64, 2.0]], 2), Err(ProjectionError::TooFewPoints { need: 2, got: 1 }));
        assert!(matches!(pca(&[vec![1.0f64], vec![2.0]], 2), Err(ProjectionError::InvalidRequest(_))));
    }

    #[test]
    fn gram_and_subspace_paths_agree_with_covariance_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 300 points in 270-D, anisotropic so the top two directions are well separated.
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..270).map(|j| (rng.random::<f64>() - 0.5) * if j < 2 { 10.0 - 3.0 * j as f64 } else { 1.0 }).collect())
            .collect();
        let big = pca(&pts, 2).unwrap();
        // Dense Jacobi on the explicit covariance as the reference.
        let d = 270;
        let mut cov = vec![vec![0.0f64; d]; d];
        for p in &pts {
            let c: Vec<f64> = p.iter().zip(&big.mean).map(|(a, m)| a - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += c[i] * c[j] / pts.len() as f64;
                }
            }
        }
        let (vals, vecs) = symmetric_eigen(&cov);
        for k in 0..2 {
            assert!((vals[k] - big.eigenvalues[k]).abs() < 1e-9 * vals[0]);
            let cosine = dot(&vecs[k], &big.components[k]).abs();
            assert!((cosine - 1.0).abs() < 1e-9, "component {k}: {cosine}");
        }
        // Gram path: fewer points than dims.
        let few: Vec<Vec<f64>> = pts[..40].to_vec();
        let g = pca(&few, 2).unwrap();
        let total: f64 = g.explained_variance_ratio.iter().sum();
        assert!(total <= 1.0 + 1e-12);
        for c in &g.components {
            assert!((dot(c, c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hull_examples() {
        let pts = [[0.0f64, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]];
        let h = convex_hull(&pts).unwrap();
        assert_eq!(h.vertices, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        assert!(!h.degenerate);
        let tri = [[0.0f64, 0.0], [2.0, 1.0], [0.0, 3.0]];
        assert_eq!(convex_hull(&tri).unwrap().vertices.len(), 3);
        let col = convex_hull(&[[0.0f64, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        assert!(col.degenerate);
        assert_eq!(col.vertices, vec![[0.0, 0.0], [2.0, 2.0]]);
        assert!(matches!(convex_hull(&tri[..2]), Err(ProjectionError::TooFewPoints { .. })));
    }

    #[test]
    fn plot_csv_layout() {
        let labels = vec![
            label("s1", Role::Seed),
            label("s2", Role::Seed),
            label("r1", Role::Recommended),
            label("r2", Role::Recommended),
            label("r3", Role::Recommended),
        ];
        let proj = Projection2D {
            coords: vec![[0.0f64, 0.0], [1.0, 0.0], [0.5, 2.0], [0.0, 1.0], [2.0, 2.0]],
            explained_variance_ratio: None,
            method: ProjectionMethod::Imported,
            labels,
        };
        let (hulls, skipped) = group_hulls(&proj, true);
        assert_eq!(hulls.len(), 1);
        assert_eq!(skipped, vec!["a/seed/caption".to_string()]);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plot_data(&[PlotLayer { projection: proj, hulls }], dir.path()).unwrap();
        let pts = fs::read_to_string(files.points).unwrap();
        assert_eq!(pts.lines().count(), 6);
        assert!(pts.lines().nth(1).unwrap().contains(",seed,"));
        let hl = fs::read_to_string(files.hulls).unwrap();
        assert_eq!(hl.lines().count(), 4);
        assert_eq!(hl.lines().nth(1).unwrap(), "recommended,a,caption,0,0,1");
    }
}
