mod common;

use std::collections::BTreeSet;

use uad::config::RunConfig;
use uad::io::{load_volume, save_volume_described};
use uad::pipeline::{provenance_tag, run_pipeline, write_phantom_corpus, InferDetails, Manifest, Stage};

fn all() -> BTreeSet<Stage> {
    Stage::ALL.into_iter().collect()
}

fn ran(reports: &[uad::pipeline::StageReport]) -> Vec<Stage> {
    reports.iter().filter(|r| !r.skipped).map(|r| r.stage).collect()
}

fn fresh_run(cfg: &RunConfig) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_phantom_corpus(&dir.path().join("phantom"), 6, 4, cfg.seed).unwrap();
    let first = run_pipeline(cfg, dir.path(), &all(), false).unwrap();
    assert_eq!(ran(&first).len(), 8);
    dir
}

#[test]
fn unchanged_inputs_skip_and_changes_rerun_downstream_only() {
    let cfg = common::tiny_config();
    let dir = fresh_run(&cfg);
    let again = run_pipeline(&cfg, dir.path(), &all(), false).unwrap();
    assert!(ran(&again).is_empty(), "{:?}", ran(&again));

    let mut changed = cfg.clone();
    changed.postprocess.percentile = 50.0;
    let third = run_pipeline(&changed, dir.path(), &all(), false).unwrap();
    assert_eq!(ran(&third), vec![Stage::Infer, Stage::Evaluate]);

    // a tampered output invalidates its stage
    let bench = dir.path().join("bench/latency.txt");
    std::fs::write(&bench, "edited").unwrap();
    let fourth = run_pipeline(&changed, dir.path(), &all(), false).unwrap();
    assert_eq!(ran(&fourth), vec![Stage::Bench]);
}

#[test]
fn evaluate_refuses_heatmaps_from_mixed_configs() {
    let cfg = common::tiny_config();
    let dir = fresh_run(&cfg);
    let m: Manifest = uad::io::read_json(dir.path().join("infer/manifest.json")).unwrap();
    let details: InferDetails = serde_json::from_value(m.details).unwrap();
    let first = dir.path().join("infer").join(&details.cases[0].heatmap);
    let v = load_volume(&first).unwrap();
    save_volume_described(&v, &first, &provenance_tag(&"f".repeat(64), &details.checkpoint_id)).unwrap();
    let e = run_pipeline(&cfg, dir.path(), &[Stage::Evaluate].into(), true).unwrap_err();
    assert!(e.to_string().contains("config"), "{e}");
}

#[test]
fn reruns_with_the_same_seed_reproduce_the_checkpoint() {
    let cfg = common::tiny_config();
    let a = fresh_run(&cfg);
    let b = fresh_run(&cfg);
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("train/checkpoint.bin")).unwrap();
    assert_eq!(read(&a), read(&b));
    let csv = |d: &tempfile::TempDir| std::fs::read(d.path().join("evaluate/metrics_pathology.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
}
