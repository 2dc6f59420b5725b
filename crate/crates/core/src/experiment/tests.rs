use std::path::Path;

use super::*;
use crate::evalstats::read_predictions;
use crate::manifest::{load_manifest, ImageRef, Split};
use crate::models::{Checkpoint, CheckpointKind};
use crate::training::{retrain_budget, TrainHistory, SEG_PRETRAIN};

fn config_json(pretrain: bool) -> String {
    let pre = if pretrain {
        r#""pretrain": {"enabled": true, "seg_config": {"epochs": 2, "batch_size": 16, "learning_rate": 0.003, "loss": "dice"}, "data_manifest": "data/pretrain.csv"},"#
    } else {
        ""
    };
    format!(
        r#"{{
  "name": "tiny",
  "backbone": {{"arch": "unet_encoder", "stage_channel_plan": [4, 8]}},
  {pre}
  "age_train": {{"batch_size": 40, "max_epochs": 3, "ma_window": 2}},
  "seeds": [3, 5],
  "paths": {{"train_manifest": "data/train.csv", "val_manifest": "data/val.csv", "test_manifest": "data/test.csv", "output_dir": "out"}},
  "synth": {{
    "config": {{"volume_shape": [48, 48, 48], "seed": 7}},
    "cohort": {{"counts": [
      {{"split": "train", "group": "CN", "count": 4}},
      {{"split": "val", "group": "CN", "count": 2}},
      {{"split": "test", "group": "CN", "count": 2}},
      {{"split": "test", "group": "MCI", "count": 2}},
      {{"split": "test", "group": "AD", "count": 2}}],
      "group_offsets": {{"MCI": 4, "AD": 8}}}},
    "pretrain_subjects": 1
  }}
}}"#
    )
}

fn setup(dir: &Path, pretrain: bool) -> ExperimentConfig {
    let path = dir.join("config.json");
    std::fs::write(&path, config_json(pretrain)).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

fn quiet() -> RunOptions {
    RunOptions::default()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_defaults_and_invariants() {
    let minimal = r#"{"name": "x", "backbone": {"arch": "unet_encoder"},
        "paths": {"train_manifest": "a", "val_manifest": "b", "test_manifest": "c", "output_dir": "o"}}"#;
    let cfg = ExperimentConfig::parse(minimal).unwrap();
    assert_eq!(cfg.seeds, DEFAULT_SEEDS.to_vec());
    assert_eq!(cfg.band_rule, "synth");
    assert!(!cfg.pretrain.enabled);
    assert_eq!(cfg.hash.len(), 64);

    let with = |from: &str, to: &str| ExperimentConfig::parse(&minimal.replace(from, to));
    assert!(matches!(with(r#""name": "x","#, r#""name": "x", "seeds": [],"#), Err(ExperimentError::Config(_))));
    assert!(matches!(with(r#""name": "x","#, r#""name": "x", "seeds": [1, 2, 1],"#), Err(ExperimentError::Config(_))));
    assert!(matches!(with(r#""name": "x","#, r#""name": "x", "band_rule": "mni","#), Err(ExperimentError::Config(_))));
    assert!(matches!(with(r#""name": "x","#, r#""name": "../x","#), Err(ExperimentError::Config(_))));
    assert!(matches!(with(r#""name": "x","#, r#""name": "x", "colour": 1,"#), Err(ExperimentError::Config(_))));
    // Seg fields without pretraining, and pretraining without data.
    let e = with(r#""name": "x","#, r#""name": "x", "pretrain": {"enabled": false, "seg_config": {}},"#).unwrap_err();
    assert!(e.to_string().contains("absent"), "{e}");
    assert!(with(r#""name": "x","#, r#""name": "x", "pretrain": {"enabled": true},"#).is_err());
    assert!(with(r#""name": "x","#, r#""name": "x", "pretrain": {"enabled": true, "data_manifest": "p"},"#).is_ok());
    // The test manifest may not feed training.
    let e = with(r#""val_manifest": "b""#, r#""val_manifest": "c""#).unwrap_err();
    assert!(matches!(e, ExperimentError::Leakage(_)));
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn output_dir_override_and_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), false);
    assert_eq!(cfg.paths.train_manifest, dir.path().join("data/train.csv"));
    assert_eq!(cfg.run_dir(None), dir.path().join("out/tiny"));
    assert_eq!(cfg.run_dir(Some(Path::new("/elsewhere"))), Path::new("/elsewhere/tiny"));
}

#[test]
fn synth_guards_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), true);
    let s = cmd_synth(&cfg, &quiet()).unwrap();
    assert_eq!(s, SynthSummary { train: 4, val: 2, test: 6, pretrain: 1 });
    let train = load_manifest(&cfg.paths.train_manifest).unwrap();
    assert!(train.iter().all(|r| r.split == Split::Train));
    assert!(matches!(&train.records[0].image_ref, ImageRef::Path(p) if p.is_relative()));
    let pre = load_manifest(cfg.pretrain.data_manifest.as_ref().unwrap()).unwrap();
    assert!(pre.iter().all(|r| r.split == Split::Train));

    let data = dir.path().join("data");
    let before = tree_bytes(&data);
    assert!(matches!(cmd_synth(&cfg, &quiet()), Err(ExperimentError::Exists(_))));
    cmd_synth(&cfg, &RunOptions { force: true, ..quiet() }).unwrap();
    assert_eq!(tree_bytes(&data), before);

    let mut empty = cfg.clone();
    let section = empty.synth.as_mut().unwrap();
    section.cohort.counts.iter_mut().for_each(|c| c.count = 0);
    section.pretrain_subjects = 0;
    let e = cmd_synth(&empty, &RunOptions { force: true, ..quiet() }).unwrap_err();
    assert_eq!(e.to_string(), "empty cohort");
}

#[test]
fn full_protocol_produces_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), true);
    cmd_synth(&cfg, &quiet()).unwrap();
    let layout = Layout::new(&cfg, None);

    // Training before pretraining has nothing to start from.
    let e = cmd_train(&cfg, &quiet()).unwrap_err();
    assert!(matches!(e, ExperimentError::MissingPretrain { seed: 3, .. }), "{e}");

    let pre = cmd_pretrain(&cfg, &quiet()).unwrap();
    assert_eq!(pre.len(), 2);
    for (dir, seed) in pre.iter().zip([3, 5]) {
        let meta = Checkpoint::load(dir).unwrap().meta;
        assert_eq!(meta.kind, CheckpointKind::Backbone);
        assert_eq!(meta.init_lineage, vec![SEG_PRETRAIN.to_string()]);
        assert_eq!(meta.trained_epochs, 2);
        assert_eq!(meta.seed, seed);
    }

    let summary = cmd_train(&cfg, &quiet()).unwrap();
    let mut stops = Vec::new();
    for seed in [3, 5] {
        let text = std::fs::read_to_string(layout.history(seed)).unwrap();
        let h = TrainHistory::from_jsonl(&text).unwrap();
        assert_eq!(h.epochs.len(), 3);
        stops.push(h.stopped_epoch);
        let early = Checkpoint::load(&layout.early(seed)).unwrap().meta;
        assert_eq!(early.trained_epochs, h.stopped_epoch);
        assert_eq!(early.init_lineage, vec![SEG_PRETRAIN.to_string(), "train".to_string()]);
        let fin = Checkpoint::load(&layout.final_model(seed)).unwrap().meta;
        assert_eq!(fin.init_lineage, vec![SEG_PRETRAIN.to_string(), "final_train".to_string()]);
        assert_eq!(fin.trained_epochs, summary.budget);
        let fh = TrainHistory::from_jsonl(&std::fs::read_to_string(layout.final_history(seed)).unwrap()).unwrap();
        assert_eq!(fh.epochs.len(), summary.budget);
    }
    assert_eq!(summary.budget, retrain_budget(&stops).unwrap());
    assert_eq!(summary.finals.len(), 2);

    let preds = cmd_predict(&cfg, None, None, None, &quiet()).unwrap();
    assert_eq!(preds.len(), 2);
    for p in &preds {
        assert!(!p.partial());
        assert_eq!(p.meta.pretraining, SEG_PRETRAIN);
        assert_eq!(p.meta.split, "test");
        let rows = read_predictions(&p.out).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.delta == r.predicted_age - r.chronological_age));
    }
    let report = cmd_report(&cfg, &[], None, &quiet()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].n_runs, 2);
    assert!(layout.report_csv().is_file());
    assert!(layout.report_csv().with_extension("txt").is_file());

    // Single run: zero spread.
    let single = cmd_report(&cfg, &[layout.predictions(3)], Some(&dir.path().join("one.csv")), &quiet()).unwrap();
    assert_eq!(single.rows[0].mae.std, 0.0);

    let stages: Vec<Stage> = std::fs::read_to_string(layout.runs())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<RunRecord>(l).unwrap().stage)
        .collect();
    use Stage::*;
    assert_eq!(stages, [Pretrain, Pretrain, Train, Train, FinalTrain, FinalTrain, Predict, Predict, Report, Report]);

    // Completed stages are reused unless forced.
    let again = cmd_train(&cfg, &quiet()).unwrap();
    assert_eq!(again.budget, summary.budget);
    assert_eq!(std::fs::read_to_string(layout.runs()).unwrap().lines().count(), stages.len());
}

#[test]
fn pretrain_requires_enabling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), false);
    let e = cmd_pretrain(&cfg, &quiet()).unwrap_err();
    assert_eq!(e.to_string(), "pretraining not enabled");
}

#[test]
fn test_records_in_training_manifests_are_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), false);
    cmd_synth(&cfg, &quiet()).unwrap();
    // Route a test subject into the validation manifest.
    let mut val = load_manifest(&cfg.paths.val_manifest).unwrap();
    let test = load_manifest(&cfg.paths.test_manifest).unwrap();
    val.records.push(test.records[0].clone());
    val.write(&cfg.paths.val_manifest).unwrap();
    let e = cmd_train(&cfg, &quiet()).unwrap_err();
    assert!(matches!(e, ExperimentError::Train { source: crate::training::TrainError::TestLeak { .. }, .. }), "{e}");
    assert_eq!(e.exit_code(), 2);
    assert!(!Layout::new(&cfg, None).early(3).exists());
}

#[test]
fn prediction_skips_and_records_broken_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), false);
    cfg.age_train.max_epochs = 1;
    cfg.seeds = vec![3];
    cmd_synth(&cfg, &quiet()).unwrap();
    cmd_train(&cfg, &quiet()).unwrap();
    let test = load_manifest(&cfg.paths.test_manifest).unwrap();
    let victim = &test.records[1];
    let ImageRef::Path(p) = &victim.image_ref else { panic!("synth writes files") };
    std::fs::write(test.resolve(p), b"not a volume").unwrap();

    let layout = Layout::new(&cfg, None);
    let out = dir.path().join("p.csv");
    let runs = cmd_predict(&cfg, Some(&layout.final_model(3)), None, Some(&out), &quiet()).unwrap();
    assert!(runs[0].partial());
    assert_eq!(runs[0].meta.failures.len(), 1);
    assert_eq!(runs[0].meta.failures[0].subject_id, victim.subject_id);
    let rows = read_predictions(&out).unwrap();
    assert_eq!(rows.len(), test.len() - 1);
    assert!(rows.iter().all(|r| r.subject_id != victim.subject_id));
    let side: PredictMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&out)).unwrap()).unwrap();
    assert_eq!(side, runs[0].meta);
}

#[test]
fn report_rejects_mixed_configurations_and_missing_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), false);
    let rows = |ids: &[(&str, crate::manifest::DiagnosisGroup)]| -> Vec<crate::evalstats::PredictionRecord> {
        ids.iter().map(|(id, g)| crate::evalstats::PredictionRecord::new(*id, *g, 70.0, 71.0)).collect()
    };
    use crate::manifest::DiagnosisGroup::*;
    let write_run = |name: &str, pretraining: &str, seed: u64, groups: &[(&str, crate::manifest::DiagnosisGroup)]| {
        let path = dir.path().join(name);
        crate::evalstats::write_predictions(&path, &rows(groups)).unwrap();
        let meta = PredictMeta {
            config: "tiny".into(),
            config_hash: String::new(),
            backbone: "unet_encoder".into(),
            pretraining: pretraining.into(),
            split: "test".into(),
            seed,
            checkpoint: "c".into(),
            manifest: "m".into(),
            predicted: groups.len(),
            failures: vec![],
        };
        std::fs::write(sidecar_path(&path), serde_json::to_string(&meta).unwrap()).unwrap();
        path
    };
    let full = [("a", CN), ("b", MCI), ("c", AD)];
    let a = write_run("a.csv", "none", 0, &full);
    let b = write_run("b.csv", SEG_PRETRAIN, 1, &full);
    let e = cmd_report(&cfg, &[a.clone(), b], None, &quiet()).unwrap_err();
    assert!(e.to_string().contains("mixed configurations"), "{e}");

    let c = write_run("c.csv", "none", 1, &[("a", CN), ("c", AD)]);
    let e = cmd_report(&cfg, &[a, c], None, &quiet()).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("c.csv") && msg.contains("group MCI absent"), "{msg}");
}
