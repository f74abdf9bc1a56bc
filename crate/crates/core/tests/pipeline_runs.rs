use std::fs;
use std::path::Path;

use drtl_core::config::{preset, ExperimentConfig, Regime, Stage};
use drtl_core::pipeline::{Pipeline, StageStatus};
use drtl_core::DrtlError;

fn smoke_in(root: &Path) -> ExperimentConfig {
    let mut cfg = preset("smoke").unwrap();
    cfg.out_root = Some(root.to_path_buf());
    cfg
}

fn artifacts(p: &Pipeline) -> Vec<(String, Vec<u8>)> {
    let l = p.layout();
    let mut files = vec![l.relation(true), l.report_json(), l.report_md(), l.drn_ckpt(true)];
    for r in p.config().all_regimes() {
        for &s in &p.config().seeds {
            files.push(l.run_dir(r, s).join("model.ckpt"));
        }
    }
    files
        .into_iter()
        .map(|f| (f.display().to_string(), fs::read(&f).unwrap_or_else(|e| panic!("{}: {e}", f.display()))))
        .collect()
}

#[test]
fn smoke_run_is_resumable_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(smoke_in(a.path())).unwrap();
    let first = p.run().unwrap();
    assert!(first.iter().all(|(_, s)| *s == StageStatus::Ran), "{first:?}");
    let bytes = artifacts(&p);

    let again = p.run().unwrap();
    assert!(again.iter().all(|(_, s)| *s == StageStatus::Skipped), "{again:?}");
    assert_eq!(artifacts(&p), bytes);

    let mut forced = Pipeline::new(smoke_in(a.path())).unwrap().force(true);
    forced.run_stages(&[Stage::Eval, Stage::Report]).unwrap();
    assert_eq!(artifacts(&forced), bytes);

    let b = tempfile::tempdir().unwrap();
    let mut q = Pipeline::new(smoke_in(b.path())).unwrap();
    q.run().unwrap();
    let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().map(|(_, b)| b).collect::<Vec<_>>();
    assert_eq!(strip(artifacts(&q)), strip(bytes));

    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.layout().report_json()).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["regime"].as_str().unwrap()).collect();
    for r in p.config().all_regimes() {
        assert!(names.contains(&r.name()), "{names:?} lacks {r}");
    }
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(smoke_in(dir.path())).unwrap();
    p.run_stages(&[Stage::Synth]).unwrap();
    match p.run_stages(&[Stage::Pretrain]) {
        Err(DrtlError::MissingArtifact { stage, .. }) => assert_eq!(stage, "relation"),
        other => panic!("expected missing relation, got {other:?}"),
    }
    assert!(!p.layout().run_dir(Regime::DrtlP, 0).join("init.ckpt").exists());
}

#[test]
fn held_lock_refuses_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(smoke_in(dir.path())).unwrap();
    fs::create_dir_all(p.layout().lock().parent().unwrap()).unwrap();
    fs::write(p.layout().lock(), b"").unwrap();
    assert!(matches!(p.run_stages(&[Stage::Synth]), Err(DrtlError::Locked(_))));
    fs::remove_file(p.layout().lock()).unwrap();
    p.run_stages(&[Stage::Synth]).unwrap();
    assert!(!p.layout().lock().exists());
}
