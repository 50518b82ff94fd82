use std::fs;
use std::path::{Path, PathBuf};

use drift_audit::analysis::DivergenceReport;
use drift_audit::embedding::keys_path;
use drift_audit::pipeline::{
    run_pipeline, validate_config, PipelineConfig, PipelineError, StageStatus, CHAINS_DIR, EMBEDDINGS_FILE,
    EXIT_CONFIG, EXIT_PARTIAL, EXIT_STAGE, LOCK_FILE, REPORT_JSON,
};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/mini")
}

fn fixture_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&fixture_dir().join("audit.toml")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn findings(toml: &str, base: &Path) -> Vec<String> {
    let cfg = PipelineConfig::from_toml_str(toml, base).unwrap();
    validate_config(&cfg).into_iter().map(|f| f.to_string()).collect()
}

#[test]
fn bundled_fixture_regenerates_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::load(&fixture_dir().join("generate.toml")).unwrap();
    cfg.output_dir = tmp.path().to_path_buf();
    run_pipeline(&cfg).unwrap();
    for name in ["fast.jsonl", "slow.jsonl"] {
        let got = fs::read(tmp.path().join(CHAINS_DIR).join(name)).unwrap();
        assert_eq!(got, fs::read(fixture_dir().join("chains").join(name)).unwrap(), "{name}");
    }
    let emb = tmp.path().join(EMBEDDINGS_FILE);
    assert_eq!(fs::read(&emb).unwrap(), fs::read(fixture_dir().join(EMBEDDINGS_FILE)).unwrap());
    assert_eq!(fs::read(keys_path(&emb)).unwrap(), fs::read(keys_path(&fixture_dir().join(EMBEDDINGS_FILE))).unwrap());
}

#[test]
fn fixture_report_shows_the_faster_domain_drifting_more() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = run_pipeline(&fixture_config(tmp.path())).unwrap();
    assert_eq!(summary.exit_code(), 0);
    let report = DivergenceReport::from_json(&fs::read_to_string(tmp.path().join(REPORT_JSON)).unwrap()).unwrap();
    let (fast, slow) = (report.domain("fast").unwrap(), report.domain("slow").unwrap());
    for (f, s) in fast.cells.iter().zip(&slow.cells) {
        assert!(f.delta_variance.unwrap() > s.delta_variance.unwrap());
        assert!(f.drift_jsd.unwrap() > s.drift_jsd.unwrap());
    }
    for c in &report.comparisons {
        let v = c.normalized_delta_variance.unwrap();
        assert!(v > 0.5 && v <= 1.0, "{v}");
    }
}

#[test]
fn second_run_is_served_from_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config(tmp.path());
    let first = run_pipeline(&cfg).unwrap();
    let report = fs::read(tmp.path().join(REPORT_JSON)).unwrap();
    assert!(first.manifest.stages.iter().all(|s| s.status == StageStatus::Ran));
    let second = run_pipeline(&cfg).unwrap();
    assert!(second.manifest.stages.iter().all(|s| s.status == StageStatus::Cached));
    assert_eq!(fs::read(tmp.path().join(REPORT_JSON)).unwrap(), report);

    // A changed analysis parameter reruns analysis only.
    let mut changed = cfg.clone();
    changed.analysis.n_slices = 64;
    let third = run_pipeline(&changed).unwrap();
    let status = |s: &str| third.manifest.stages.iter().find(|r| r.stage.as_str() == s).unwrap().status;
    assert_eq!(status("embed"), StageStatus::Cached);
    assert_eq!(status("analyze"), StageStatus::Ran);

    // A tampered output is recomputed.
    fs::write(tmp.path().join(REPORT_JSON), "{}").unwrap();
    let fourth = run_pipeline(&changed).unwrap();
    assert!(fourth.manifest.stages.iter().any(|s| s.status == StageStatus::Ran));
}

#[test]
fn held_lock_fails_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(LOCK_FILE), "1234").unwrap();
    let err = run_pipeline(&fixture_config(tmp.path())).unwrap_err();
    assert!(matches!(err, PipelineError::Locked(_)));
    assert_eq!(err.exit_code(), EXIT_STAGE);
}

#[test]
fn validation_reports_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("e.embf"), b"").unwrap();
    let f = findings(
        r#"
output_dir = "out"
[stages]
keyframes = true
project = true
[datasets.a]
path = "missing.jsonl"
max_depth = 0
[keyframes]
frames_root = "no-such-dir"
smoothing_window = 4
[embeddings]
file = "e.embf"
service = "http://localhost:9"
[projection]
method = "import"
"#,
        tmp.path(),
    );
    let text = f.join("\n");
    for expect in [
        "datasets.a.path",
        "datasets.a.max_depth",
        "keyframes.frames_root",
        "smoothing_window must be odd",
        "exactly one source allowed, found embeddings.file and embeddings.service",
        "projection.coords_file",
    ] {
        assert!(text.contains(expect), "missing {expect:?} in:\n{text}");
    }
    let err = run_pipeline(&PipelineConfig::from_toml_str("output_dir = \"out\"\n", tmp.path()).unwrap()).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
}

#[test]
fn unknown_keys_are_rejected() {
    let err = PipelineConfig::from_toml_str("output_dir = \"o\"\n[analysis]\nk_codbook = 3\n", ".").unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
}

#[test]
fn missing_embeddings_make_a_partial_run() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = fixture_dir();
    // Append a chain whose videos have no embeddings.
    let mut chains = fs::read_to_string(fixture.join("chains/fast.jsonl")).unwrap();
    chains.push_str(concat!(
        r#"{"video_id":"ghost","domain_label":"fast","role":"seed","depth":0,"seed_id":"ghost","session_id":"x","keyword":"","frame_dir":null}"#,
        "\n",
        r#"{"video_id":"ghost-r","domain_label":"fast","role":"recommended","depth":1,"seed_id":"ghost","session_id":"x","keyword":"","frame_dir":null}"#,
        "\n"
    ));
    fs::write(tmp.path().join("fast.jsonl"), chains).unwrap();
    let mut cfg = fixture_config(&tmp.path().join("out"));
    cfg.datasets.a.as_mut().unwrap().path = tmp.path().join("fast.jsonl");
    cfg.datasets.b = None;
    cfg.embeddings.file = Some(fixture.join(EMBEDDINGS_FILE));
    let summary = run_pipeline(&cfg).unwrap();
    assert!(summary.partial());
    assert_eq!(summary.exit_code(), EXIT_PARTIAL);
    let report = fs::read_to_string(tmp.path().join("out").join(REPORT_JSON)).unwrap();
    assert!(report.contains("ghost"));
}
