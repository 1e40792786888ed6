// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_notice-bench"));
    c.env_remove("NOTICE_BENCH_SEED").env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

const SMALL: &str = r#"{"seed": 3, "dataset": {"n": 40, "tasks": ["mixed"]}}"#;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"seed": 1, "datasett": {}}"#);
    let out = run(bin().args(["gen", "--config"]).arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("datasett"));
}

#[test]
fn bad_seed_env_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin()
        .env("NOTICE_BENCH_SEED", "x")
        .arg("gen")
        .arg("--out")
        .arg(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_without_results_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().arg("render").arg("--out").arg(tmp.path()));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn seed_sources_take_precedence_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let gen = |dir: &str, env: Option<&str>, flag: Option<&str>| {
        let mut c = bin();
        c.args(["gen", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join(dir));
        if let Some(e) = env {
            c.env("NOTICE_BENCH_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(run(&mut c).status.success());
        std::fs::read(tmp.path().join(dir).join("dataset_mixed.jsonl")).unwrap()
    };
    let base = gen("a", None, None);
    let env = gen("b", Some("9"), None);
    let flag = gen("c", Some("9"), Some("3"));
    assert_ne!(base, env);
    assert_eq!(base, flag);
}

#[test]
fn stages_chain_through_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    for stage in ["plant", "sweep", "analyze", "render", "knockout"] {
        let o = run(bin()
            .arg(stage)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out));
        assert!(
            o.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let listed: Vec<String> = files(&out).into_iter().map(|f| f.0).collect();
    for f in [
        "model.nbm",
        "sweep_mixed_sip.csv",
        "heads.csv",
        "analysis.json",
        "head_rank.svg",
        "knockout.csv",
    ] {
        assert!(listed.iter().any(|l| l == f), "missing {f}");
    }
    let heads = std::fs::read_to_string(out.join("heads.csv")).unwrap();
    assert!(heads
        .lines()
        .any(|l| l.starts_with("2,3,multimodal,object_detection")));
}

#[test]
fn report_is_identical_across_job_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut outputs = Vec::new();
    for (dir, jobs) in [("j1", "1"), ("j2", "2"), ("j1b", "1")] {
        let o = run(bin()
            .arg("report")
            .arg("--config")
            .arg(&cfg)
            .args(["--jobs", jobs])
            .arg("--out")
            .arg(tmp.path().join(dir)));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(files(&tmp.path().join(dir)));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}
