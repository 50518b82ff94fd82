//! Per-domain spread statistics and the cross-domain divergence table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    cross_domain_normalize, delta_metrics, fit_codebook, jsd, scale_wasserstein, sliced_wasserstein,
    AnalysisError, ClusterStats, DEFAULT_MAX_EXACT_N,
};
use crate::chain::{AuditDataset, Role};
use crate::embedding::{group_points, EmbeddingSet, Modality, Pooling};
use crate::hashing::derive_seed;
use crate::projection::pca;
use crate::scalar::Scalar;

/// Row labels of the spread table, one row per statistic.
pub const SPREAD_ROWS: [&str; 4] = ["Seed Variance", "Rec Variance", "Seed Intra Dist", "Rec Intra Dist"];
/// Row labels of the cross-domain table.
pub const DIVERGENCE_ROWS: [&str; 4] = [
    "Jensen-Shannon Divergence",
    "Wasserstein Distance (scaled)",
    "Normalized Δ Variance",
    "Normalized Δ Intra-Dist",
];

/// Modalities in report order.
const MODALITIES: [Modality; 2] = [Modality::Caption, Modality::Image];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub k_codebook: usize,
    pub n_slices: usize,
    pub rng_seed: u64,
    /// Clouds larger than this use sampled pair statistics.
    pub max_exact_pairs: usize,
    pub pooling: Pooling,
    /// Compute every metric on a 2-D PCA of each modality instead of the
    /// full embedding space.
    pub on_projection: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k_codebook: 64,
            n_slices: 128,
            rng_seed: 0,
            max_exact_pairs: DEFAULT_MAX_EXACT_N,
            pooling: Pooling::PerKeyframe,
            on_projection: false,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.k_codebook < 2 {
            return Err(AnalysisError::InvalidConfig(format!("k_codebook must be >= 2, got {}", self.k_codebook)));
        }
        if self.n_slices == 0 {
            return Err(AnalysisError::InvalidConfig("n_slices must be >= 1".into()));
        }
        if self.max_exact_pairs < 2 {
            return Err(AnalysisError::InvalidConfig("max_exact_pairs must be >= 2".into()));
        }
        Ok(())
    }
}

/// [`ClusterStats`] without the centroid, in `f64` for serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub n: usize,
    pub variance: f64,
    pub intra_dist: Option<f64>,
    pub intra_sampled: bool,
}

impl StatsSummary {
    fn from_stats<T: Scalar>(s: &ClusterStats<T>) -> Self {
        Self {
            n: s.n,
            variance: s.variance.as_f64(),
            intra_dist: s.intra_mean().map(Scalar::as_f64),
            intra_sampled: s.intra_dist.is_some_and(|d| d.sampled),
        }
    }
}

/// Seed-vs-recommended results for one (domain, modality).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub modality: Modality,
    pub seed: Option<StatsSummary>,
    pub rec: Option<StatsSummary>,
    pub delta_variance: Option<f64>,
    pub delta_intra: Option<f64>,
    /// JSD between the seed and recommended clouds.
    pub drift_jsd: Option<f64>,
    /// Sliced Wasserstein between seed and recommended, scaled by diameter.
    pub drift_wasserstein_scaled: Option<f64>,
    pub drift_wasserstein_raw: Option<f64>,
    pub seed_missing: Vec<String>,
    pub rec_missing: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub n_chains: usize,
    pub n_videos: usize,
    pub cells: Vec<CellReport>,
}

impl DomainReport {
    pub fn cell(&self, modality: Modality) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.modality == modality)
    }
}

/// Domain A against domain B for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityComparison {
    pub modality: Modality,
    /// JSD between the two domains' recommended clouds.
    pub jsd: Option<f64>,
    pub wasserstein_scaled: Option<f64>,
    pub wasserstein_raw: Option<f64>,
    /// Domain A's share of the positive Δ variance.
    pub normalized_delta_variance: Option<f64>,
    pub normalized_delta_intra: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub config: AnalysisConfig,
    /// `full` or `pca-2d`.
    pub space: String,
    pub domains: Vec<DomainReport>,
    /// Empty when only one dataset was given.
    pub comparisons: Vec<ModalityComparison>,
    /// Every derived seed, keyed by what it drove.
    pub rng_seeds: BTreeMap<String, u64>,
}

/// Points of both groups of one (dataset, modality).
struct Clouds<T> {
    seed: Vec<Vec<T>>,
    rec: Vec<Vec<T>>,
    seed_missing: Vec<String>,
    rec_missing: Vec<String>,
}

struct Seeder<'a> {
    base: u64,
    used: &'a mut BTreeMap<String, u64>,
}

impl Seeder<'_> {
    fn get(&mut self, label: String) -> u64 {
        let s = derive_seed(self.base, &label);
        self.used.insert(label, s);
        s
    }
}

fn gather<T: Scalar>(d: &AuditDataset, emb: &EmbeddingSet<T>, m: Modality, pooling: Pooling) -> Clouds<T> {
    let s = group_points(d, emb, m, Role::Seed, pooling);
    let r = group_points(d, emb, m, Role::Recommended, pooling);
    Clouds {
        seed: s.points,
        rec: r.points,
        seed_missing: s.missing,
        rec_missing: r.missing,
    }
}

/// Replaces every cloud of a modality by its coordinates on the top two
/// principal axes of their union.
fn project_clouds<T: Scalar>(clouds: &mut [&mut Clouds<T>]) -> Result<(), String> {
    let union: Vec<Vec<T>> = clouds.iter().flat_map(|c| c.seed.iter().chain(&c.rec).cloned()).collect();
    let p = pca(&union, 2).map_err(|e| e.to_string())?;
    let mut it = p.coords.into_iter();
    for c in clouds.iter_mut() {
        for v in c.seed.iter_mut().chain(c.rec.iter_mut()) {
            *v = it.next().expect("one coordinate row per point");
        }
    }
    Ok(())
}

/// Codebook JSD plus scaled sliced Wasserstein between two clouds.
#[allow(clippy::type_complexity)]
fn pair_divergence<T: Scalar>(
    p: &[Vec<T>],
    q: &[Vec<T>],
    cfg: &AnalysisConfig,
    seeds: &mut Seeder,
    tag: &str,
    notes: &mut Vec<String>,
) -> (Option<f64>, Option<(f64, f64)>) {
    if p.is_empty() || q.is_empty() {
        notes.push(format!("{tag}: divergence skipped, a cloud is empty"));
        return (None, None);
    }
    let union: Vec<Vec<T>> = p.iter().chain(q).cloned().collect();
    let js = fit_codebook(&union, cfg.k_codebook, seeds.get(format!("{tag}/codebook")))
        .and_then(|cb| jsd(p, q, &cb))
        .map(|v| v.as_f64())
        .map_err(|e| notes.push(format!("{tag}: jsd: {e}")))
        .ok();
    let slice_seed = seeds.get(format!("{tag}/slices"));
    let diam_seed = seeds.get(format!("{tag}/diameter"));
    let sw = sliced_wasserstein(p, q, cfg.n_slices, slice_seed)
        .and_then(|raw| scale_wasserstein(raw, &[p, q], cfg.max_exact_pairs, diam_seed).map(|s| (s.value, raw)))
        .map(|(v, raw)| (v.as_f64(), raw.as_f64()))
        .map_err(|e| notes.push(format!("{tag}: wasserstein: {e}")))
        .ok();
    (js, sw)
}

fn stats<T: Scalar>(
    pts: &[Vec<T>],
    cfg: &AnalysisConfig,
    seeds: &mut Seeder,
    tag: &str,
    notes: &mut Vec<String>,
) -> Option<ClusterStats<T>> {
    match ClusterStats::compute(pts, cfg.max_exact_pairs, seeds.get(format!("{tag}/pairs"))) {
        Ok(s) => Some(s),
        Err(e) => {
            notes.push(format!("{tag}: {e}"));
            None
        }
    }
}

fn cell<T: Scalar>(
    domain: &str,
    modality: Modality,
    clouds: &Clouds<T>,
    cfg: &AnalysisConfig,
    seeds: &mut Seeder,
) -> (CellReport, Option<(ClusterStats<T>, ClusterStats<T>)>) {
    let mut notes = Vec::new();
    let tag = format!("{domain}/{}", modality.as_str());
    let seed = stats(&clouds.seed, cfg, seeds, &format!("{tag}/seed"), &mut notes);
    let rec = stats(&clouds.rec, cfg, seeds, &format!("{tag}/rec"), &mut notes);
    let (dv, di) = match (&seed, &rec) {
        (Some(s), Some(r)) => {
            let (dv, di) = delta_metrics(s, r);
            (Some(dv.as_f64()), di.map(Scalar::as_f64))
        }
        _ => (None, None),
    };
    let (js, sw) = pair_divergence(&clouds.seed, &clouds.rec, cfg, seeds, &format!("{tag}/drift"), &mut notes);
    if !clouds.seed_missing.is_empty() || !clouds.rec_missing.is_empty() {
        notes.push(format!(
            "{tag}: {} seed and {} recommended videos have no {} vector",
            clouds.seed_missing.len(),
            clouds.rec_missing.len(),
            modality.as_str()
        ));
    }
    let report = CellReport {
        modality,
        seed: seed.as_ref().map(StatsSummary::from_stats),
        rec: rec.as_ref().map(StatsSummary::from_stats),
        delta_variance: dv,
        delta_intra: di,
        drift_jsd: js,
        drift_wasserstein_scaled: sw.map(|s| s.0),
        drift_wasserstein_raw: sw.map(|s| s.1),
        seed_missing: clouds.seed_missing.clone(),
        rec_missing: clouds.rec_missing.clone(),
        notes,
    };
    (report, seed.zip(rec))
}

fn normalized(a: Option<f64>, b: Option<f64>, what: &str, notes: &mut Vec<String>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => match cross_domain_normalize(a, b) {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(format!("normalized {what}: {e}"));
                None
            }
        },
        _ => {
            notes.push(format!("normalized {what}: a domain lacks this delta"));
            None
        }
    }
}

/// Computes the spread statistics of each dataset and, when `b` is given,
/// the cross-domain comparison of A against B.
///
/// Failures are confined to the cell they occur in and recorded as notes;
/// a report is always produced for a valid config.
pub fn compare_domains<T: Scalar>(
    a: &AuditDataset,
    b: Option<&AuditDataset>,
    emb: &EmbeddingSet<T>,
    cfg: &AnalysisConfig,
) -> Result<DivergenceReport, AnalysisError> {
    cfg.validate()?;
    let mut rng_seeds = BTreeMap::new();
    let mut seeds = Seeder {
        base: cfg.rng_seed,
        used: &mut rng_seeds,
    };
    let datasets: Vec<&AuditDataset> = std::iter::once(a).chain(b).collect();
    let names: Vec<String> = datasets
        .iter()
        .enumerate()
        .map(|(i, d)| if i == 1 && d.name == a.name { format!("{}#2", d.name) } else { d.name.clone() })
        .collect();

    let mut cells: Vec<Vec<CellReport>> = vec![Vec::new(); datasets.len()];
    let mut comparisons = Vec::new();
    for m in MODALITIES {
        let mut clouds: Vec<Clouds<T>> = datasets.iter().map(|d| gather(d, emb, m, cfg.pooling)).collect();
        let mut proj_note = None;
        if cfg.on_projection {
            let mut refs: Vec<&mut Clouds<T>> = clouds.iter_mut().collect();
            if let Err(e) = project_clouds(&mut refs) {
                proj_note = Some(format!("{}: projection failed ({e}); full-space values reported", m.as_str()));
            }
        }
        let mut computed = Vec::new();
        for (i, c) in clouds.iter().enumerate() {
            let (mut rep, st) = cell(&names[i], m, c, cfg, &mut seeds);
            rep.notes.extend(proj_note.clone());
            cells[i].push(rep);
            computed.push(st);
        }
        if clouds.len() == 2 {
            let mut notes = Vec::new();
            let (js, sw) = pair_divergence(
                &clouds[0].rec,
                &clouds[1].rec,
                cfg,
                &mut seeds,
                &format!("cross/{}", m.as_str()),
                &mut notes,
            );
            let ca = &cells[0][cells[0].len() - 1];
            let cb = &cells[1][cells[1].len() - 1];
            let nv = normalized(ca.delta_variance, cb.delta_variance, "delta variance", &mut notes);
            let ni = normalized(ca.delta_intra, cb.delta_intra, "delta intra-dist", &mut notes);
            comparisons.push(ModalityComparison {
                modality: m,
                jsd: js,
                wasserstein_scaled: sw.map(|s| s.0),
                wasserstein_raw: sw.map(|s| s.1),
                normalized_delta_variance: nv,
                normalized_delta_intra: ni,
                notes,
            });
        }
    }

    let domains = datasets
        .iter()
        .zip(names)
        .zip(cells)
        .map(|((d, name), cells)| DomainReport {
            domain: name,
            n_chains: d.chains.len(),
            n_videos: d.n_videos(),
            cells,
        })
        .collect();
    Ok(DivergenceReport {
        config: cfg.clone(),
        space: if cfg.on_projection { "pca-2d" } else { "full" }.to_string(),
        domains,
        comparisons,
        rng_seeds,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn render_table(out: &mut String, title: &str, header: &[String], rows: &[(String, Vec<String>)]) {
    let label_w = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0).max(6);
    let col_w: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r.1[i].len()).chain([h.chars().count()]).max().unwrap_or(0))
        .collect();
    let _ = writeln!(out, "{title}");
    let mut line = format!("{:<label_w$}", "Metric");
    for (h, w) in header.iter().zip(&col_w) {
        let _ = write!(line, "  {h:>w$}");
    }
    let _ = writeln!(out, "{line}");
    let _ = writeln!(out, "{}", "-".repeat(line.chars().count()));
    for (label, vals) in rows {
        let pad = label_w - label.chars().count();
        let mut line = format!("{label}{}", " ".repeat(pad));
        for (v, w) in vals.iter().zip(&col_w) {
            let _ = write!(line, "  {v:>w$}");
        }
        let _ = writeln!(out, "{line}");
    }
}

impl DivergenceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn domain(&self, name: &str) -> Option<&DomainReport> {
        self.domains.iter().find(|d| d.domain == name)
    }

    pub fn comparison(&self, modality: Modality) -> Option<&ModalityComparison> {
        self.comparisons.iter().find(|c| c.modality == modality)
    }

    /// Aligned plain-text tables: spread per (domain, modality), then the
    /// cross-domain divergences when two domains were compared.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut header = Vec::new();
        let mut cols: Vec<&CellReport> = Vec::new();
        for d in &self.domains {
            for c in &d.cells {
                header.push(format!("{} {}", d.domain, c.modality.as_str()));
                cols.push(c);
            }
        }
        let pick: [fn(&CellReport) -> Option<f64>; 4] = [
            |c| c.seed.as_ref().map(|s| s.variance),
            |c| c.rec.as_ref().map(|s| s.variance),
            |c| c.seed.as_ref().and_then(|s| s.intra_dist),
            |c| c.rec.as_ref().and_then(|s| s.intra_dist),
        ];
        let mut rows: Vec<(String, Vec<String>)> = SPREAD_ROWS
            .iter()
            .zip(pick)
            .map(|(l, f)| (l.to_string(), cols.iter().map(|c| fmt_opt(f(c))).collect()))
            .collect();
        rows.push(("Drift JSD".into(), cols.iter().map(|c| fmt_opt(c.drift_jsd)).collect()));
        rows.push(("Drift Wasserstein (scaled)".into(), cols.iter().map(|c| fmt_opt(c.drift_wasserstein_scaled)).collect()));
        render_table(&mut out, &format!("Spread ({} space)", self.space), &header, &rows);

        if !self.comparisons.is_empty() {
            let names: Vec<&str> = self.domains.iter().map(|d| d.domain.as_str()).collect();
            let header: Vec<String> = self.comparisons.iter().map(|c| c.modality.as_str().to_string()).collect();
            let pick: [fn(&ModalityComparison) -> Option<f64>; 4] = [
                |c| c.jsd,
                |c| c.wasserstein_scaled,
                |c| c.normalized_delta_variance,
                |c| c.normalized_delta_intra,
            ];
            let rows: Vec<(String, Vec<String>)> = DIVERGENCE_ROWS
                .iter()
                .zip(pick)
                .map(|(l, f)| (l.to_string(), self.comparisons.iter().map(|c| fmt_opt(f(c))).collect()))
                .collect();
            out.push('\n');
            render_table(&mut out, &format!("Divergence ({} vs {})", names[0], names[1]), &header, &rows);
        }

        let notes: Vec<&String> = self
            .domains
            .iter()
            .flat_map(|d| d.cells.iter().flat_map(|c| &c.notes))
            .chain(self.comparisons.iter().flat_map(|c| &c.notes))
            .collect();
        if !notes.is_empty() {
            out.push_str("\nNotes\n");
            for n in notes {
                let _ = writeln!(out, "- {n}");
            }
        }
        out
    }
}
