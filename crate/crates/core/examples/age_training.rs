//! Train an age regressor with moving-average early stopping, derive the
//! retraining budget, retrain on train + val and predict held-out volumes.

use brainage::data::SliceLoader;
use brainage::manifest::{DiagnosisGroup, Split};
use brainage::models::{assemble_age_model, build_backbone, predict_volume_age, Arch, BackboneSpec};
use brainage::preprocess::BandRule;
use brainage::synth::{generate_cohort, CohortCount, CohortSpec, SynthConfig};
use brainage::training::{moving_average_best, retrain_budget, train_age_observed, train_final, AgeTrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cell = |split, count| CohortCount { split, group: DiagnosisGroup::CN, count };
    let spec = CohortSpec {
        counts: vec![cell(Split::Train, 24), cell(Split::Val, 8), cell(Split::Test, 6)],
        group_offsets: Default::default(),
    };
    let cohort = generate_cohort(&SynthConfig { volume_shape: [48, 48, 48], ..Default::default() }, &spec, dir.path())?;
    let train = cohort.filter_split(Split::Train, None);
    let val = cohort.filter_split(Split::Val, None);
    let test = cohort.filter_split(Split::Test, None);
    let mean = train.iter().map(|r| r.age_years).sum::<f64>() / train.len() as f64;

    let spec = BackboneSpec::new(Arch::UnetEncoder).with_plan(&[4, 8, 16]);
    let cfg = AgeTrainConfig { batch_size: 32, max_epochs: 6, ma_window: 2, ..Default::default() };
    let mut loader = SliceLoader::new(BandRule::SYNTH);
    let mut model = assemble_age_model(build_backbone(&spec, 0)?, (48, 48), Some(mean))?;
    let history = train_age_observed(&mut model, &train, &val, &cfg, &mut loader, &mut |r| {
        println!("epoch {}: train mse {:.3} val mae {:.3}", r.epoch, r.train_mse, r.val_mae.unwrap());
    })?;
    assert_eq!(history.stopped_epoch, moving_average_best(&history.val_maes(), cfg.ma_window)?);
    println!("stopped at epoch {}", history.stopped_epoch);

    // Several seeds would contribute stopping epochs; one is enough here.
    let budget = retrain_budget(&[history.stopped_epoch])?;
    let mut fresh = assemble_age_model(build_backbone(&spec, 0)?, (48, 48), Some(mean))?;
    train_final(&mut fresh, &train.union(&val)?, budget, &cfg, &mut loader)?;
    for r in test.iter() {
        let stack = loader.age_stack(&test, r, 1)?;
        println!("{}: age {:.1}, predicted {:.1}", r.subject_id, r.age_years, predict_volume_age(&mut fresh, &stack)?);
    }
    Ok(())
}
