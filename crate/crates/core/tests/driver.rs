mod support;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;

use minute::corpus::SyntheticConfig;
use minute::driver::{CorpusSource, DriverError, Pipeline, Profile, RunConfig, RunManifest, Stage};
use support::*;

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::profile(Profile::Desk);
    cfg.seed = seed;
    cfg.corpus = CorpusSource::Synthetic(SyntheticConfig {
        n_videos: 24,
        min_frames: 10,
        max_frames: 12,
        train_queries_per_video: 1,
        ..SyntheticConfig::default()
    });
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.ff_mult = 2;
    cfg.localizer_arch.mmt_layers = 1;
    cfg.retriever_training.epochs = 2;
    cfg.retriever_training.batch_size = 8;
    cfg.localizer_training.epochs = 1;
    cfg.localizer_training.batch_size = 4;
    cfg.inference.top_k = 5;
    cfg.bias.ks = vec![1, 2, 5];
    cfg.evaluation.ks = vec![1, 5];
    cfg
}

fn deterministic_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let m: RunManifest = serde_json::from_slice(&fs::read(root.join("manifest.json")).unwrap()).unwrap();
    let mut out: Vec<(String, Vec<u8>)> = m
        .checkpoints
        .values()
        .chain(m.predictions.values())
        .chain([&m.index])
        .chain(m.other_artifacts.values())
        .map(|a| (a.path.clone(), fs::read(root.join(&a.path)).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn run_all_writes_a_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = Pipeline::new(small_config(0), dir.path()).unwrap().run_all().unwrap();
    assert_eq!(m.checkpoints.len(), 2);
    assert_eq!(m.predictions.len(), 2);
    assert!(m.timings.iter().all(|t| t.ran));
    assert_eq!(m.timings.len(), Stage::ALL.len());
    for a in m.all_artifacts() {
        let p = dir.path().join(&a.path);
        assert!(p.exists(), "{}", a.path);
        if p.is_file() {
            assert_eq!(fs::metadata(&p).unwrap().len(), a.bytes);
            assert_eq!(a.sha256.len(), 64);
        }
    }
    let report = m.metrics.eval.values().next().unwrap();
    assert!(report.metrics.iter().all(|x| (0.0..=100.0).contains(&x.value)));
    assert_eq!(m.metrics.bias.profile.modes.len(), 2);
}

#[test]
fn identical_seeds_give_identical_bytes_and_resume_reuses_work() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Pipeline::new(small_config(3), a.path()).unwrap().run_all().unwrap();
    Pipeline::new(small_config(3), b.path()).unwrap().run_all().unwrap();
    let first = deterministic_files(a.path());
    assert_eq!(first, deterministic_files(b.path()));

    fs::remove_file(a.path().join("localizer.ckpt")).unwrap();
    let m = Pipeline::new(small_config(3), a.path()).unwrap().run_all().unwrap();
    let ran: Vec<(&str, bool)> = m.timings.iter().map(|t| (t.stage.as_str(), t.ran)).collect();
    assert_eq!(
        ran,
        [
            ("gen-data", false),
            ("train-retriever", false),
            ("build-index", false),
            ("train-localizer", true),
            ("infer", true),
            ("eval", true),
            ("bias-report", true),
        ]
    );
    assert_eq!(first, deterministic_files(a.path()));

    let c = tempfile::tempdir().unwrap();
    Pipeline::new(small_config(4), c.path()).unwrap().run_all().unwrap();
    assert_ne!(first, deterministic_files(c.path()));
}

#[test]
fn a_different_config_cannot_reuse_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(small_config(0), dir.path()).unwrap();
    assert!(Pipeline::new(small_config(0), dir.path()).is_ok());
    assert!(matches!(
        Pipeline::new(small_config(1), dir.path()),
        Err(DriverError::ConfigMismatch(_))
    ));
}

#[test]
fn stages_report_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small_config(0), dir.path()).unwrap();
    let err = p.run_stage(Stage::BuildIndex).unwrap_err();
    assert!(matches!(err, DriverError::MissingInput { stage: "build-index", .. }), "{err}");
}

#[test]
fn missing_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&small_config(0).to_json()).unwrap();
    v["inference"].as_object_mut().unwrap().remove("top_k");
    let path = dir.path().join("cfg.json");
    fs::write(&path, v.to_string()).unwrap();
    let err = RunConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("inference.top_k"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_minute"))
        .args(["show-config", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("inference.top_k"));
}

#[test]
fn cli_scores_a_standalone_predictions_file() {
    let dir = tempfile::tempdir().unwrap();
    let (preds, gt) = recall_fixture();
    let pred_path = dir.path().join("p.jsonl");
    let mut f = fs::File::create(&pred_path).unwrap();
    for r in preds.values().flatten() {
        writeln!(f, "{}", serde_json::to_string(r).unwrap()).unwrap();
    }
    let gt_path = dir.path().join("q.jsonl");
    let mut f = fs::File::create(&gt_path).unwrap();
    for (q, m) in &gt {
        let rec = minute::corpus::QueryRecord {
            query_id: q.clone(),
            video_id: Some(m.video_id.clone()),
            st_frame: Some(m.st_frame),
            ed_frame: Some(m.ed_frame),
            feature_file: "unused.bin".into(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
    }
    let run = |extra: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_minute"))
            .arg("eval")
            .arg("--predictions")
            .arg(&pred_path)
            .arg("--gt")
            .arg(&gt_path)
            .args(extra)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap().trim().parse::<f64>().unwrap()
    };
    assert_eq!(run(&["--task", "vcmr", "--k", "1", "--iou", "0.7"]), 30.0);
    assert_eq!(run(&["--task", "svmr", "--k", "1", "--iou", "0.5"]), 80.0);
    assert_eq!(run(&["--task", "vcmr", "--k", "1", "--iou", "0.5", "--strict"]), 30.0);
}
