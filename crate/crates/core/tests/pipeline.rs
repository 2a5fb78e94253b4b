use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

use trajopt::io::file_digest;
use trajopt::pipeline::{
    compare_solvers, exit_code, read_comparison, run_pipeline, Generator, PipelineConfig, ReferenceCircle, RunOptions,
    SolverKind, StageKind, COMPARISON_HEADER,
};
use trajopt::select::SolutionDocument;
use trajopt::Error;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn tiny() -> PipelineConfig {
    PipelineConfig::load(&config_path("tiny.json")).unwrap()
}

fn hits(m: &trajopt::pipeline::Manifest) -> Vec<(String, bool)> {
    m.stages.iter().map(|s| (s.name.clone(), s.cache_hit)).collect()
}

#[test]
fn bundled_configs_validate() {
    for name in ["tiny.json", "experiment_a_mini.json", "experiment_b_mini.json"] {
        PipelineConfig::load(&config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn second_run_is_fully_cached() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(&tiny(), dir.path(), &RunOptions::default()).unwrap();
    assert!(first.stages.iter().all(|s| !s.cache_hit && s.status == "ok"));
    let second = run_pipeline(&tiny(), dir.path(), &RunOptions::default()).unwrap();
    assert!(second.stages.iter().all(|s| s.cache_hit), "{:?}", hits(&second));
    assert_eq!(first.artifacts, second.artifacts);
    for a in &second.artifacts {
        assert_eq!(file_digest(&dir.path().join(&a.path)).unwrap(), a.sha256, "{}", a.path);
    }
    let on_disk: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk["status"], "ok");
}

#[test]
fn smoke_run_with_four_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.candidates.generator =
        Generator::FullSphere { n: 4, reference_circle: Some(ReferenceCircle { n_views: 4, arc_deg: 360.0 }) };
    cfg.selection.k = 1;
    cfg.selection.alpha = 1.0;
    let m = run_pipeline(&cfg, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(m.status, "ok");
    assert!(m.artifacts.len() >= 6);
    let mut listed: Vec<String> = m.artifacts.iter().map(|a| a.path.clone()).collect();
    listed.sort();
    let mut written = Vec::new();
    let mut stack = vec![dir.path().to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                written.push(p.strip_prefix(dir.path()).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    written.sort();
    assert_eq!(listed, written);
}

#[test]
fn cached_manifests_match_apart_from_timings() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&tiny(), dir.path(), &RunOptions::default()).unwrap();
    let read = || {
        let mut v: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        for s in v["stages"].as_array_mut().unwrap() {
            s.as_object_mut().unwrap().remove("wall_time_s");
        }
        v
    };
    run_pipeline(&tiny(), dir.path(), &RunOptions::default()).unwrap();
    let second = read();
    run_pipeline(&tiny(), dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(second, read());
}

#[test]
fn changing_alpha_reruns_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&tiny(), dir.path(), &RunOptions::default()).unwrap();
    let mut cfg = tiny();
    cfg.selection.alpha = 0.32;
    let m = run_pipeline(&cfg, dir.path(), &RunOptions::default()).unwrap();
    for (name, hit) in hits(&m) {
        let upstream = ["phantom", "candidates", "project", "coverage", "recon:reference"].contains(&name.as_str());
        // the circular baseline ignores α but its key still includes it
        assert_eq!(hit, upstream, "{name}");
    }
}

#[test]
fn tampered_artifact_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { until: Some(StageKind::Coverage), solvers: None };
    run_pipeline(&tiny(), dir.path(), &opts).unwrap();
    let bin = dir.path().join("coverage/coverage.bin");
    let original = fs::read(&bin).unwrap();
    fs::write(&bin, b"garbage").unwrap();
    let m = run_pipeline(&tiny(), dir.path(), &opts).unwrap();
    let cov = m.stages.iter().find(|s| s.name == "coverage").unwrap();
    assert!(!cov.cache_hit);
    assert_eq!(fs::read(&bin).unwrap(), original);
}

#[test]
fn until_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let m =
        run_pipeline(&tiny(), dir.path(), &RunOptions { until: Some(StageKind::Candidates), solvers: None }).unwrap();
    assert_eq!(hits(&m).len(), 2);
    assert!(dir.path().join("candidates/candidates.csv").exists());
    assert!(!dir.path().join("projections").exists());
}

#[test]
fn solvers_agree_and_comparison_table_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let rows = compare_solvers(&tiny(), dir.path(), &RunOptions::default()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.approach.as_str()).collect();
    assert_eq!(names, ["circular", "greedy", "ip", "oracle"]);
    let doc = |s: &str| -> SolutionDocument {
        serde_json::from_str(&fs::read_to_string(dir.path().join(format!("reports/{s}.json"))).unwrap()).unwrap()
    };
    let (ip, oracle, greedy) = (doc("ip"), doc("oracle"), doc("greedy"));
    assert_eq!(ip.covered_count, oracle.covered_count);
    assert_eq!(ip.gap, 0.0);
    assert!(greedy.covered_count <= ip.covered_count);
    assert_eq!(ip.problem_digest, greedy.problem_digest);
    let eval = ip.evaluation.unwrap();
    assert!(eval["ssim"].as_f64().unwrap() <= 1.0);
    assert!(eval["roi_voxels"].as_u64().unwrap() > 0);
    let csv = fs::read_to_string(dir.path().join("reports/comparison.csv")).unwrap();
    assert!(csv.starts_with(COMPARISON_HEADER));
    assert_eq!(read_comparison(&dir.path().join("reports/comparison.csv")).unwrap(), rows);
    let absorption: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("coverage/absorption.json")).unwrap()).unwrap();
    for &i in &ip.selected {
        assert!(absorption["absorption"][i].as_f64().unwrap() <= 0.3);
    }
    assert!(dir.path().join("coverage/coverage.csv").exists());
}

#[test]
fn single_solver_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { until: None, solvers: Some(vec![SolverKind::Greedy]) };
    let rows = compare_solvers(&tiny(), dir.path(), &opts).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].approach, "greedy");
}

#[test]
fn infeasible_budget_fails_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.selection.alpha = 0.0;
    let err = run_pipeline(&cfg, dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err.root(), Error::Infeasible { k: 4, feasible: 0 }), "{err}");
    assert_eq!(exit_code(&err), 3);
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "failed");
    let last = m["stages"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["status"], "failed");
    assert!(last["name"].as_str().unwrap().starts_with("select"));
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let text = fs::read_to_string(config_path("tiny.json")).unwrap();
    let edit = |f: &dyn Fn(&mut Value)| {
        let mut v: Value = serde_json::from_str(&text).unwrap();
        f(&mut v);
        PipelineConfig::from_json_str(&v.to_string()).unwrap_err()
    };
    let cases: Vec<Error> = vec![
        edit(&|v| v["selection"]["k"] = 0.into()),
        edit(&|v| v["selection"]["k"] = 31.into()),
        edit(&|v| v["selection"]["alpha"] = 1.5.into()),
        edit(&|v| v["selection"]["solvers"] = serde_json::json!(["simplex"])),
        edit(&|v| v["vois"][0]["roi_radius_m"] = 0.002.into()),
        edit(&|v| v["vois"][0]["delta_gamma_rad"] = 2.0.into()),
        edit(&|v| v["phantom"]["dims"] = serde_json::json!([16, 0, 16])),
        edit(&|v| v["recon"]["surprise"] = 1.into()),
    ];
    for e in &cases {
        assert!(matches!(e, Error::Config(_)), "{e}");
        assert_eq!(exit_code(e), 2);
    }
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_trajopt")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config_path("tiny.json");
    let ok = cli(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    assert!(stdout.starts_with(COMPARISON_HEADER));
    assert_eq!(stdout.lines().count(), 5);

    let sel = cli(&["select", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--solver", "ip"]);
    assert_eq!(sel.status.code(), Some(0));
    assert!(String::from_utf8(sel.stdout).unwrap().contains("(cached)"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, fs::read_to_string(&cfg).unwrap().replace("\"k\": 4", "\"k\": 0")).unwrap();
    let r = cli(&["run", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));

    let infeasible = dir.path().join("infeasible.json");
    fs::write(&infeasible, fs::read_to_string(&cfg).unwrap().replace("\"alpha\": 0.3", "\"alpha\": 0.0")).unwrap();
    let r = cli(&["run", "--config", infeasible.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("exceeds the 0 candidates"));

    let r = cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--solver", "simplex"]);
    assert_eq!(r.status.code(), Some(2));

    let r = cli(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}
