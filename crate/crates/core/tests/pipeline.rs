// SPDX-License-Identifier: MIT OR Apache-2.0

use notice_bench::corruption::CorruptionSpec;
use notice_bench::model::Submodule;
use notice_bench::report::{
    cmd_analyze, cmd_gen, cmd_render, cmd_sweep, load_sweep, ExperimentConfig, SCHEMA_VERSION,
};
use notice_bench::worldgen::TaskVariant;
use notice_bench::Error;

fn small(dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.n = 40;
    c.dataset.tasks = vec![TaskVariant::Mixed];
    c.out_dir = dir.to_path_buf();
    c
}

#[test]
fn gen_is_balanced_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(&tmp.path().join("a"));
    c.dataset.n = 500;
    let m = cmd_gen(&c).unwrap();
    assert_eq!((m[0].option_before_or, m[0].option_after_or), (250, 250));
    let first = std::fs::read(c.out_dir.join("dataset_mixed.jsonl")).unwrap();
    c.out_dir = tmp.path().join("b");
    cmd_gen(&c).unwrap();
    assert_eq!(
        first,
        std::fs::read(c.out_dir.join("dataset_mixed.jsonl")).unwrap()
    );
    let manifest = std::fs::read_to_string(c.out_dir.join("datasets.json")).unwrap();
    assert!(manifest.contains(SCHEMA_VERSION));
    assert!(manifest.contains(&c.hash()));
}

#[test]
fn null_corruption_sweep_is_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    c.sweep.corruptions = vec![CorruptionSpec::gaussian(0.0)];
    let out = cmd_sweep(&c).unwrap();
    for m in &out[0].result.matrices {
        assert!(m.max_abs() < 1e-12);
    }
}

#[test]
fn sweep_outputs_reload_and_render() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small(tmp.path());
    let out = cmd_sweep(&c).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("sweep_mixed_sip.csv")).unwrap();
    assert!(csv.starts_with(&format!(
        "# schema_version={SCHEMA_VERSION} config_hash={}",
        c.hash()
    )));
    let back = load_sweep(&tmp.path().join("sweep_mixed_sip.json")).unwrap();
    assert_eq!(back, out[0]);
    let m = back.result.matrix(Submodule::CrossAttn).unwrap();
    assert_eq!(m.argmax_abs(), Some((3, 2)));

    let files = cmd_render(&c, &[back.clone()]).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    cmd_render(&c, &[back]).unwrap();
    let again: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(first, again);
    assert!(String::from_utf8(first[0].clone())
        .unwrap()
        .contains(&c.hash()));

    let report = cmd_analyze(&c, &out).unwrap();
    let det = report.head(c.planted.detector).unwrap();
    assert_eq!(det.label.as_str(), "multimodal");
    assert_eq!(det.function.as_str(), "object_detection");
    assert!(report.overlaps.iter().all(|o| o.value >= 1.0));
}

#[test]
fn analysis_needs_two_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    c.sweep.corruptions.truncate(1);
    let out = cmd_sweep(&c).unwrap();
    assert!(matches!(
        cmd_analyze(&c, &out),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn render_without_matrices_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small(tmp.path());
    assert!(cmd_render(&c, &[]).is_err());
}
