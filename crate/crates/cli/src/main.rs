//! `drift-audit` command line.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use drift_audit::analysis::{compare_domains, AnalysisConfig, DEFAULT_MAX_EXACT_N};
use drift_audit::chain::ParseOptions;
use drift_audit::collector::SyntheticGraphParams;
use drift_audit::embedding::{
    load_embeddings, save_embeddings, FetchOptions, HttpEmbedClient, Pooling, EMBED_SERVICE_URL_ENV,
};
use drift_audit::keyframe::{
    compression_ratio, extract_frames_root, list_frame_dirs, read_keyframes_jsonl, write_keyframes_jsonl,
    KeyframeConfig,
};
use drift_audit::pipeline::{
    self, collect_domain, embed_via_service, load_dataset, project_layers, run_pipeline, synthetic_ground_truth,
    validate_config, write_dataset, CollectConfig, PipelineConfig, ProjectMethod, ProjectionSection, ProviderKind,
    SyntheticSection, CollectDomain, EXIT_CONFIG, EXIT_STAGE,
};
use drift_audit::projection::emit_plot_data;
use drift_audit::workers::default_workers;
use drift_audit::Real;

#[derive(Parser)]
#[command(name = "drift-audit", version, about = "Recommendation-chain drift audit")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Walk recommendation chains from seeds and write a dataset.
    Collect(CollectArgs),
    /// Extract keyframes from per-video frame directories.
    Keyframes(KeyframeArgs),
    /// Caption and embed keyframes through the embedding service.
    Embed(EmbedArgs),
    /// Compute spread and divergence metrics.
    Analyze(AnalyzeArgs),
    /// Write 2-D projection and hull CSVs.
    Project(ProjectArgs),
    /// Run every configured stage.
    Run(RunArgs),
    /// Check a config file and list every problem.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Synthetic,
    JsonlReplay,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    provider: ProviderArg,
    /// Recommendations per chain.
    #[arg(long, default_value_t = 10)]
    depth: u32,
    #[arg(long, default_value_t = 20)]
    n_seeds: usize,
    /// Restrict replayed seeds to the ids listed (one per line).
    #[arg(long)]
    seeds_file: Option<PathBuf>,
    /// Recorded dataset for the jsonl-replay provider.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Probability that a synthetic step leaves the current topic.
    #[arg(long, default_value_t = 0.5)]
    drift: f64,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    #[arg(long, default_value_t = 64)]
    n_topics: usize,
    #[arg(long, default_value_t = 40)]
    videos_per_topic: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    topic_spread: f64,
    /// Draw all synthetic seeds from one topic.
    #[arg(long)]
    seed_topic: Option<usize>,
    /// Domain label written into every record.
    #[arg(long, default_value = "a")]
    domain: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the synthetic ground-truth embeddings here.
    #[arg(long)]
    ground_truth_out: Option<PathBuf>,
}

#[derive(Args)]
struct KeyframeArgs {
    #[arg(long)]
    frames_root: PathBuf,
    #[arg(long, default_value_t = 1.5)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    min_gap: usize,
    #[arg(long, default_value_t = 3)]
    smoothing_window: usize,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Dataset(s) whose videos are embedded.
    #[arg(long = "dataset", required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    keyframes: PathBuf,
    #[arg(long)]
    frames_root: PathBuf,
    #[arg(long, env = EMBED_SERVICE_URL_ENV)]
    service_url: String,
    /// Expected embedding dimension; checked against the service.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    PerKeyframe,
    VideoMean,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::PerKeyframe => Pooling::PerKeyframe,
            PoolingArg::VideoMean => Pooling::VideoMean,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset_a: PathBuf,
    #[arg(long)]
    dataset_b: Option<PathBuf>,
    /// Embedding file (`.embf` or `.jsonl`).
    #[arg(long)]
    embeddings: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 64)]
    k_codebook: usize,
    #[arg(long, default_value_t = 128)]
    n_slices: usize,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_EXACT_N)]
    max_exact_pairs: usize,
    /// Compute the metrics on a 2-D PCA instead of the full space.
    #[arg(long)]
    on_projection: bool,
    #[arg(long, value_enum, default_value = "per-keyframe")]
    pooling: PoolingArg,
    /// Write report.json and report.txt here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProjectArg {
    Pca,
    Import,
}

impl From<ProjectArg> for ProjectMethod {
    fn from(p: ProjectArg) -> Self {
        match p {
            ProjectArg::Pca => ProjectMethod::Pca,
            ProjectArg::Import => ProjectMethod::Import,
        }
    }
}

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "pca")]
    project: ProjectArg,
    /// `video_id,keyframe_index,modality,x,y` rows for `--project import`.
    #[arg(long)]
    coords_file: Option<PathBuf>,
    /// Also draw hulls around recommended groups.
    #[arg(long)]
    rec_hulls: bool,
    #[arg(long, value_enum, default_value = "per-keyframe")]
    pooling: PoolingArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    k_codebook: Option<usize>,
    #[arg(long)]
    n_slices: Option<usize>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    max_exact_pairs: Option<usize>,
    #[arg(long)]
    on_projection: bool,
    #[arg(long, value_enum)]
    project: Option<ProjectArg>,
    #[arg(long)]
    coords_file: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn config_err(m: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG as u8,
        message: m.into(),
    }
}

fn stage_err(m: impl ToString) -> Failure {
    Failure {
        code: EXIT_STAGE as u8,
        message: m.to_string(),
    }
}

fn dataset_opts(path: &Path) -> ParseOptions {
    ParseOptions::named(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

fn cmd_collect(a: CollectArgs) -> Result<u8, Failure> {
    let provider = match a.provider {
        ProviderArg::Synthetic => ProviderKind::Synthetic,
        ProviderArg::JsonlReplay => ProviderKind::JsonlReplay,
    };
    if provider == ProviderKind::JsonlReplay && a.replay.is_none() {
        return Err(config_err("--replay is required with --provider jsonl-replay"));
    }
    let domain = CollectDomain {
        name: a.domain.clone(),
        drift: a.drift,
        rng_seed: a.rng_seed,
        replay: a.replay.clone(),
    };
    let cfg = CollectConfig {
        provider,
        depth: a.depth,
        n_seeds: a.n_seeds,
        seeds_file: a.seeds_file.clone(),
        seed_topic: a.seed_topic,
        synthetic: SyntheticSection {
            n_topics: a.n_topics,
            videos_per_topic: a.videos_per_topic,
            embed_dim: a.embed_dim,
            topic_spread: a.topic_spread,
        },
        domains: vec![domain.clone()],
    };
    if provider == ProviderKind::Synthetic {
        let p: SyntheticGraphParams = cfg.graph_params(&domain);
        p.validate().map_err(|e| config_err(e.to_string()))?;
    }
    if a.depth < 1 {
        return Err(config_err("--depth must be >= 1"));
    }
    let col = collect_domain(&cfg, &domain, Path::new(".")).map_err(stage_err)?;
    write_dataset(&a.out, &col.dataset).map_err(stage_err)?;
    for t in &col.truncated {
        eprintln!("warning: chain from seed {t} truncated");
    }
    for (s, e) in &col.failures {
        eprintln!("warning: seed {s} failed: {e}");
    }
    println!(
        "{}: {} chains, {} videos -> {}",
        a.domain,
        col.dataset.chains.len(),
        col.dataset.n_videos(),
        a.out.display()
    );
    if let Some(gt) = &a.ground_truth_out {
        if provider != ProviderKind::Synthetic {
            return Err(config_err("--ground-truth-out needs the synthetic provider"));
        }
        let set = synthetic_ground_truth(&cfg, std::slice::from_ref(&col.dataset)).map_err(stage_err)?;
        save_embeddings(&set, gt).map_err(stage_err)?;
        println!("ground truth: {} vectors -> {}", set.len(), gt.display());
    }
    Ok(if col.is_partial() { pipeline::EXIT_PARTIAL as u8 } else { 0 })
}

fn cmd_keyframes(a: KeyframeArgs) -> Result<u8, Failure> {
    let cfg = KeyframeConfig::<Real> {
        lambda: a.lambda,
        min_gap: a.min_gap,
        smoothing_window: a.smoothing_window,
    };
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    if !a.frames_root.is_dir() {
        return Err(config_err(format!("{} is not a directory", a.frames_root.display())));
    }
    let ids = list_frame_dirs(&a.frames_root).map_err(stage_err)?;
    let sets = extract_frames_root(&a.frames_root, &ids, &cfg, a.workers.unwrap_or_else(default_workers))
        .map_err(stage_err)?;
    let mut w = BufWriter::new(fs::File::create(&a.out).map_err(stage_err)?);
    write_keyframes_jsonl(&sets, &mut w).map_err(stage_err)?;
    w.flush().map_err(stage_err)?;
    let frames: u64 = sets.values().map(|s| s.n_frames as u64).sum();
    let kfs: u64 = sets.values().map(|s| s.indices.len() as u64).sum();
    let cr = compression_ratio::<f64>(frames, kfs).map(|c| format!("{c:.4}")).unwrap_or_else(|_| "n/a".into());
    println!("{} videos, {frames} frames, {kfs} keyframes, compression ratio {cr}", sets.len());
    Ok(0)
}

fn cmd_embed(a: EmbedArgs) -> Result<u8, Failure> {
    let datasets = a
        .datasets
        .iter()
        .map(|p| load_dataset(p, &dataset_opts(p)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_err)?;
    let f = fs::File::open(&a.keyframes).map_err(|e| config_err(format!("{}: {e}", a.keyframes.display())))?;
    let kf = read_keyframes_jsonl(BufReader::new(f)).map_err(|e| config_err(e.to_string()))?;
    let ids: Vec<String> = {
        let set: std::collections::BTreeSet<String> =
            datasets.iter().flat_map(|d| d.videos().map(|v| v.video_id.clone())).collect();
        set.into_iter().collect()
    };
    let client = HttpEmbedClient::new(a.service_url.clone(), Duration::from_secs(a.timeout_secs));
    let opts = FetchOptions {
        batch_size: a.batch_size,
        ..FetchOptions::default()
    };
    let (set, failed, _) = embed_via_service(&client, a.dim, &a.frames_root, &kf, &ids, &opts).map_err(stage_err)?;
    save_embeddings(&set, &a.out).map_err(stage_err)?;
    for f in &failed {
        eprintln!("warning: {f}");
    }
    println!("{} vectors -> {}", set.len(), a.out.display());
    Ok(if failed.is_empty() { 0 } else { pipeline::EXIT_PARTIAL as u8 })
}

fn load_data(d: &DataArgs) -> Result<(Vec<drift_audit::chain::AuditDataset>, drift_audit::Embeddings), Failure> {
    let mut datasets = vec![load_dataset(&d.dataset_a, &dataset_opts(&d.dataset_a)).map_err(config_err)?];
    if let Some(b) = &d.dataset_b {
        datasets.push(load_dataset(b, &dataset_opts(b)).map_err(config_err)?);
    }
    let emb = load_embeddings::<Real>(&d.embeddings, None)
        .map_err(|e| config_err(format!("{}: {e}", d.embeddings.display())))?;
    if !emb.renormalized.is_empty() {
        eprintln!("warning: {} stored vectors were not unit-norm", emb.renormalized.len());
    }
    Ok((datasets, emb.set))
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<u8, Failure> {
    let cfg = AnalysisConfig {
        k_codebook: a.k_codebook,
        n_slices: a.n_slices,
        rng_seed: a.rng_seed,
        max_exact_pairs: a.max_exact_pairs,
        pooling: a.pooling.into(),
        on_projection: a.on_projection,
    };
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    let (datasets, emb) = load_data(&a.data)?;
    let report = compare_domains(&datasets[0], datasets.get(1), &emb, &cfg).map_err(stage_err)?;
    let text = report.render_text();
    print!("{text}");
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(stage_err)?;
        fs::write(dir.join(pipeline::REPORT_JSON), report.to_json()).map_err(stage_err)?;
        fs::write(dir.join(pipeline::REPORT_TXT), &text).map_err(stage_err)?;
    }
    let gaps = report.domains.iter().any(|d| d.cells.iter().any(|c| !c.notes.is_empty()))
        || report.comparisons.iter().any(|c| !c.notes.is_empty());
    Ok(if gaps { pipeline::EXIT_PARTIAL as u8 } else { 0 })
}

fn cmd_project(a: ProjectArgs) -> Result<u8, Failure> {
    let method: ProjectMethod = a.project.into();
    if method == ProjectMethod::Import && a.coords_file.is_none() {
        return Err(config_err("--coords-file is required with --project import"));
    }
    let (datasets, emb) = load_data(&a.data)?;
    let section = ProjectionSection {
        method,
        coords_file: a.coords_file.clone(),
        rec_hulls: a.rec_hulls,
    };
    let (layers, notes) =
        project_layers(&datasets, &emb, &section, a.coords_file.as_deref(), a.pooling.into()).map_err(stage_err)?;
    let files = emit_plot_data(&layers, &a.out_dir).map_err(stage_err)?;
    for n in &notes {
        eprintln!("note: {n}");
    }
    println!("{}\n{}", files.points.display(), files.hulls.display());
    Ok(0)
}

fn cmd_run(a: RunArgs) -> Result<u8, Failure> {
    let mut cfg = PipelineConfig::load(&a.config).map_err(|e| config_err(e.to_string()))?;
    if let Some(o) = a.output_dir {
        // Overrides are relative to the working directory, not the config.
        cfg.output_dir = std::path::absolute(&o).unwrap_or(o);
    }
    if let Some(k) = a.k_codebook {
        cfg.analysis.k_codebook = k;
    }
    if let Some(n) = a.n_slices {
        cfg.analysis.n_slices = n;
    }
    if let Some(s) = a.rng_seed {
        cfg.analysis.rng_seed = s;
    }
    if let Some(m) = a.max_exact_pairs {
        cfg.analysis.max_exact_pairs = m;
    }
    if a.on_projection {
        cfg.analysis.on_projection = true;
    }
    if let Some(p) = a.project {
        cfg.projection.method = p.into();
    }
    if let Some(c) = a.coords_file {
        cfg.projection.coords_file = Some(std::path::absolute(&c).unwrap_or(c));
    }
    match run_pipeline(&cfg) {
        Ok(summary) => {
            for r in &summary.manifest.stages {
                let status = serde_status(r.status);
                println!("{:<10} {status:<7} {:>7} ms{}", r.stage.as_str(), r.duration_ms, if r.partial { "  (partial)" } else { "" });
                for n in &r.notes {
                    println!("  - {n}");
                }
            }
            if let Some(report) = &summary.report {
                let txt = report.with_file_name(pipeline::REPORT_TXT);
                if let Ok(t) = fs::read_to_string(txt) {
                    print!("\n{t}");
                }
            }
            Ok(summary.exit_code() as u8)
        }
        Err(e) => Err(Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }),
    }
}

fn serde_status(s: pipeline::StageStatus) -> &'static str {
    match s {
        pipeline::StageStatus::Ran => "ran",
        pipeline::StageStatus::Cached => "cached",
        pipeline::StageStatus::Failed => "failed",
    }
}

fn cmd_validate(a: ValidateArgs) -> Result<u8, Failure> {
    let cfg = PipelineConfig::load(&a.config).map_err(|e| config_err(e.to_string()))?;
    let findings = validate_config(&cfg);
    if findings.is_empty() {
        println!("ok");
        return Ok(0);
    }
    for f in &findings {
        println!("{f}");
    }
    Ok(EXIT_CONFIG as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Collect(a) => cmd_collect(a),
        Command::Keyframes(a) => cmd_keyframes(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Project(a) => cmd_project(a),
        Command::Run(a) => cmd_run(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
