use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use brainage_nn::state_dict;
use proptest::prelude::*;

use super::*;
use crate::data::{FileSource, LoadedVolume, VolumeSource};
use crate::manifest::SubjectRecord;
use crate::models::{assemble_age_model, assemble_seg_model, build_backbone, BackboneSpec};
use crate::preprocess::BandRule;
use crate::synth::{generate_cohort, CohortCount, CohortSpec, SynthConfig};
use DiagnosisGroup::{AD, CN, MCI};

fn cohort(dir: &std::path::Path, side: usize, cells: &[(Split, DiagnosisGroup, usize)], seed: u64) -> DatasetManifest {
    let cfg = SynthConfig { volume_shape: [side; 3], seed, ..Default::default() };
    let spec = CohortSpec {
        counts: cells.iter().map(|&(split, group, count)| CohortCount { split, group, count }).collect(),
        group_offsets: BTreeMap::from([(MCI, 4.0), (AD, 8.0)]),
    };
    generate_cohort(&cfg, &spec, dir).unwrap()
}

fn age_model(plan: &[usize], side: usize, seed: u64, mean: Option<f64>) -> AgeModel {
    let b = build_backbone(&BackboneSpec::new(Arch::UnetEncoder).with_plan(plan), seed).unwrap();
    assemble_age_model(b, (side, side), mean).unwrap()
}

fn quick_cfg(epochs: usize) -> AgeTrainConfig {
    AgeTrainConfig { batch_size: 16, learning_rate: Some(1e-3), max_epochs: epochs, ma_window: 5, seed: 1 }
}

fn loader() -> SliceLoader<'static> {
    SliceLoader::new(BandRule::SYNTH)
}

#[test]
fn moving_average_examples() {
    let xs = [5.0, 4.0, 3.0, 4.0, 5.0, 6.0, 7.0];
    assert_eq!(moving_average_best(&xs, 5).unwrap(), 3);
    assert_eq!(moving_average_best(&[9.0, 8.0, 7.0, 6.0, 5.0], 5).unwrap(), 5);
    assert_eq!(moving_average_best(&[3.0, 1.0, 2.0, 1.0], 1).unwrap(), 2);
    assert!(moving_average_best(&[], 5).is_err());
    assert!(moving_average_best(&[1.0], 0).is_err());
}

#[test]
fn moving_average_values_match_hand_computation() {
    let xs = [5.0, 4.0, 3.0, 4.0, 5.0, 6.0, 7.0];
    let ma: Vec<f64> = (1..=xs.len()).map(|e| trailing_mean(&xs[..e], 5)).collect();
    let want = [5.0, 4.5, 4.0, 4.0, 4.2, 4.4, 5.0];
    for (a, b) in ma.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{ma:?}");
    }
}

proptest! {
    #[test]
    fn window_one_is_first_argmin(xs in prop::collection::vec(0u8..20, 1..40)) {
        let vals: Vec<f64> = xs.iter().map(|&x| f64::from(x)).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let first = vals.iter().position(|&v| v == min).unwrap() + 1;
        prop_assert_eq!(moving_average_best(&vals, 1).unwrap(), first);
    }
}

#[test]
fn retrain_budget_examples() {
    assert_eq!(retrain_budget(&[10, 12, 11, 13, 14]).unwrap(), 12);
    assert_eq!(retrain_budget(&[10, 11]).unwrap(), 11);
    assert_eq!(retrain_budget(&[1]).unwrap(), 1);
    assert_eq!(retrain_budget(&[1, 2, 2, 1]).unwrap(), 2);
    assert!(retrain_budget(&[]).is_err());
    assert!(retrain_budget(&[0, 3]).is_err());
}

#[test]
fn config_invariants() {
    assert!(SegTrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    assert!(AgeTrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(AgeTrainConfig { ma_window: 0, ..Default::default() }.validate().is_err());
    assert!(AgeTrainConfig { learning_rate: Some(0.0), ..Default::default() }.validate().is_err());
    let d = AgeTrainConfig::default();
    assert_eq!((d.batch_size, d.max_epochs, d.ma_window), (64, 50, 5));
    assert_eq!(SegTrainConfig::default().loss, SegLoss::DicePlusCe);
}

#[test]
fn learning_rate_defaults_follow_lineage() {
    let l = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    assert_eq!(default_learning_rate(Arch::UnetEncoder, &l(&[])), 1e-3);
    assert_eq!(default_learning_rate(Arch::UnetEncoder, &l(&[SEG_PRETRAIN])), 1e-4);
    assert_eq!(default_learning_rate(Arch::Resnet50, &l(&[])), 1e-4);
    assert_eq!(default_learning_rate(Arch::Resnet50, &l(&["imagenet"])), 1e-4);
    assert_eq!(default_learning_rate(Arch::Resnet50, &l(&["imagenet", SEG_PRETRAIN])), 1e-5);
}

#[test]
fn history_jsonl_round_trip() {
    let h = TrainHistory {
        epochs: vec![
            EpochRecord { epoch: 1, train_mse: 12.5, val_mae: Some(3.25) },
            EpochRecord { epoch: 2, train_mse: 8.0, val_mae: Some(2.75) },
        ],
        stopped_epoch: 2,
    };
    let text = h.to_jsonl();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], r#"{"epoch":1,"train_mse":12.5,"val_mae":3.25}"#);
    assert_eq!(lines[2], r#"{"stopped_epoch":2}"#);
    assert_eq!(TrainHistory::from_jsonl(&text).unwrap(), h);
}

#[test]
fn age_training_rejects_bad_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path(), 48, &[(Split::Train, CN, 2), (Split::Train, AD, 1), (Split::Val, CN, 1), (Split::Test, CN, 1)], 0);
    let train = m.filter_split(Split::Train, None);
    let val = m.filter_split(Split::Val, None);
    let mut model = age_model(&[4, 8, 16], 48, 0, None);
    let cfg = quick_cfg(1);
    assert!(matches!(train_age(&mut model, &train, &val, &cfg, &mut loader()), Err(TrainError::NonCn { .. })));
    let cn = train.filter_group(CN);
    let empty = val.filter(|_| false);
    assert!(matches!(train_age(&mut model, &cn, &empty, &cfg, &mut loader()), Err(TrainError::Empty("validation"))));
    assert!(matches!(train_age(&mut model, &empty, &val, &cfg, &mut loader()), Err(TrainError::Empty("training"))));
    let with_test = cn.union(&m.filter_split(Split::Test, None)).unwrap();
    assert!(matches!(train_final(&mut model, &with_test, 1, &cfg, &mut loader()), Err(TrainError::TestLeak { .. })));
    assert!(matches!(train_final(&mut model, &cn, 0, &cfg, &mut loader()), Err(TrainError::Config(_))));
}

/// Wraps the file source and records every subject it hands out.
struct Recording {
    seen: Rc<RefCell<Vec<SubjectRecord>>>,
}

impl VolumeSource for Recording {
    fn load(&mut self, manifest: &DatasetManifest, record: &SubjectRecord) -> Result<LoadedVolume, crate::data::DataError> {
        self.seen.borrow_mut().push(record.clone());
        FileSource.load(manifest, record)
    }
}

#[test]
fn test_records_never_reach_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path(), 48, &[(Split::Train, CN, 3), (Split::Val, CN, 2), (Split::Test, CN, 2), (Split::Test, AD, 1)], 4);
    let train = m.filter_split(Split::Train, Some(CN));
    let val = m.filter_split(Split::Val, Some(CN));
    let seen = Rc::new(RefCell::new(Vec::new()));
    let mut l = SliceLoader::with_source(Recording { seen: seen.clone() }, BandRule::SYNTH);
    let mut model = age_model(&[4, 8, 16], 48, 0, Some(75.0));
    let hist = train_age(&mut model, &train, &val, &quick_cfg(2), &mut l).unwrap();
    let budget = retrain_budget(&[hist.stopped_epoch]).unwrap();
    let mut fresh = age_model(&[4, 8, 16], 48, 0, Some(75.0));
    train_final(&mut fresh, &train.union(&val).unwrap(), budget, &quick_cfg(2), &mut l).unwrap();
    let with_test = m.filter_group(CN);
    assert!(train_final(&mut fresh, &with_test, 1, &quick_cfg(1), &mut l).is_err());

    let seen = seen.borrow();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(|r| r.split != Split::Test), "a test record was loaded");
}

#[test]
fn constant_age_cohort_trains_to_zero_loss() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path(), 48, &[(Split::Train, CN, 4), (Split::Val, CN, 3)], 2);
    let train = m.filter_split(Split::Train, None).filter(|_| true);
    let mut train = train;
    for r in &mut train.records {
        r.age_years = 70.0;
    }
    let val = m.filter_split(Split::Val, None);
    let mut model = age_model(&[4, 8, 16], 48, 3, Some(70.0));
    model.head_mut().weight.value.fill(0.0);
    let hist = train_age(&mut model, &train, &val, &quick_cfg(1), &mut loader()).unwrap();
    assert!(hist.epochs[0].train_mse < 1e-6, "{}", hist.epochs[0].train_mse);
    let want = val.iter().map(|r| (70.0 - r.age_years).abs()).sum::<f64>() / val.len() as f64;
    assert!((hist.epochs[0].val_mae.unwrap() - want).abs() < 0.05, "{hist:?} vs {want}");
}

#[test]
fn single_epoch_returns_post_epoch_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path(), 48, &[(Split::Train, CN, 3), (Split::Val, CN, 2)], 5);
    let train = m.filter_split(Split::Train, None);
    let val = m.filter_split(Split::Val, None);
    let cfg = quick_cfg(1);
    let mut a = age_model(&[4, 8, 16], 48, 7, Some(75.0));
    let hist = train_age(&mut a, &train, &val, &cfg, &mut loader()).unwrap();
    assert_eq!(hist.stopped_epoch, 1);
    assert_eq!(hist.epochs.len(), 1);
    // the same epoch without validation, as an independent reference
    let mut b = age_model(&[4, 8, 16], 48, 7, Some(75.0));
    let fin = train_final(&mut b, &train, 1, &cfg, &mut loader()).unwrap();
    assert_eq!(fin.epochs[0].train_mse, hist.epochs[0].train_mse);
    let (sa, sb) = (state_dict(&mut a), state_dict(&mut b));
    for (k, t) in &sa {
        assert_eq!(t.data(), sb[k].data(), "{k}");
    }
    assert_eq!(a.trained_epochs(), 1);
}

#[test]
fn training_is_deterministic_and_restores_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path(), 48, &[(Split::Train, CN, 6), (Split::Val, CN, 3)], 6);
    let train = m.filter_split(Split::Train, None);
    let val = m.filter_split(Split::Val, None);
    let cfg = AgeTrainConfig { ma_window: 2, ..quick_cfg(4) };
    let run = || {
        let mut model = age_model(&[4, 8, 16], 48, 9, Some(75.0));
        let h = train_age(&mut model, &train, &val, &cfg, &mut loader()).unwrap();
        (h, state_dict(&mut model), model)
    };
    let (h1, s1, mut model) = run();
    let (h2, s2, _) = run();
    assert_eq!(h1, h2);
    for (k, t) in &s1 {
        assert_eq!(t.data(), s2[k].data(), "{k}");
    }
    assert_eq!(h1.epochs.len(), 4);
    assert_eq!(h1.stopped_epoch, moving_average_best(&h1.val_maes(), 2).unwrap());
    // restored weights reproduce the chosen epoch's validation MAE
    let mae = volume_mae(&mut model, &val, &mut loader()).unwrap();
    assert_eq!(mae, h1.epochs[h1.stopped_epoch - 1].val_mae.unwrap());
}

#[test]
fn post_hoc_loss_matches_direct_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path(), 48, &[(Split::Train, CN, 3), (Split::Val, CN, 2)], 8);
    let train = m.filter_split(Split::Train, None);
    let val = m.filter_split(Split::Val, None);
    let mut model = age_model(&[4, 8, 16], 48, 1, Some(75.0));
    train_age(&mut model, &train, &val, &quick_cfg(2), &mut loader()).unwrap();
    let batched = slice_mse(&mut model, &train, &mut loader()).unwrap();
    let mut l = loader();
    let (mut total, mut n) = (0.0, 0usize);
    for r in train.iter() {
        let stack = l.age_stack(&train, r, 1).unwrap();
        for p in model.predict_slices(&stack).unwrap() {
            total += (p - r.age_years).powi(2);
            n += 1;
        }
    }
    assert!((batched - total / n as f64).abs() < 1e-9);
}

#[test]
fn seg_training_overfits_one_volume() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path(), 48, &[(Split::Train, CN, 1)], 11);
    let b = build_backbone(&BackboneSpec::new(Arch::UnetEncoder).with_plan(&[8, 16, 32]), 0).unwrap();
    let mut seg = assemble_seg_model(b, 1).unwrap();
    let cfg = SegTrainConfig { epochs: 110, batch_size: 16, learning_rate: 3e-3, loss: SegLoss::Dice, seed: 0 };
    let hist = train_seg(&mut seg, &m, None, &cfg, &mut loader()).unwrap();
    assert_eq!(hist.len(), 110);
    let dice = seg_dice(&mut seg, &m, &mut loader()).unwrap();
    assert!(dice >= 0.95, "training Dice {dice}; last epochs {:?}", &hist[hist.len() - 3..]);
}

#[test]
fn seg_training_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path(), 48, &[(Split::Train, CN, 2)], 12);
    let cfg = SegTrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
    let run = || {
        let b = build_backbone(&BackboneSpec::new(Arch::UnetEncoder).with_plan(&[4, 8]), 1).unwrap();
        let mut seg = assemble_seg_model(b, 1).unwrap();
        let h = train_seg(&mut seg, &m, None, &cfg, &mut loader()).unwrap();
        (h, state_dict(&mut seg))
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1, h2);
    assert!(s1.iter().all(|(k, t)| t.data() == s2[k].data()));
    assert!(h1.iter().all(|e| e.eval_dice.is_none()));

    let b = build_backbone(&BackboneSpec::new(Arch::UnetEncoder).with_plan(&[4, 8]), 1).unwrap();
    let mut seg = assemble_seg_model(b, 1).unwrap();
    let zero = SegTrainConfig { epochs: 0, ..cfg };
    assert!(matches!(train_seg(&mut seg, &m, None, &zero, &mut loader()), Err(TrainError::Config(_))));

    let one = SegTrainConfig { epochs: 1, ..cfg };
    let h = train_seg(&mut seg, &m, Some(&m), &one, &mut loader()).unwrap();
    assert_eq!(h[0].eval_dice, Some(seg_dice(&mut seg, &m, &mut loader()).unwrap()));
}
