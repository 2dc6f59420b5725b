//! Pre-train a U-Net on synthetic lesion masks, then hand its encoder on
//! as a backbone checkpoint.

use brainage::data::SliceLoader;
use brainage::manifest::{DiagnosisGroup, Split};
use brainage::models::{assemble_seg_model, build_backbone, Arch, BackboneSpec, Checkpoint};
use brainage::preprocess::BandRule;
use brainage::synth::{generate_cohort, CohortCount, CohortSpec, SynthConfig};
use brainage::training::{train_seg_observed, SegLoss, SegTrainConfig, SEG_PRETRAIN};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let synth = SynthConfig { volume_shape: [48, 48, 48], seed: 11, ..Default::default() };
    let spec = CohortSpec {
        counts: vec![CohortCount { split: Split::Train, group: DiagnosisGroup::CN, count: 2 }],
        group_offsets: Default::default(),
    };
    let data = generate_cohort(&synth, &spec, dir.path())?;

    let backbone = build_backbone(&BackboneSpec::new(Arch::UnetEncoder).with_plan(&[4, 8, 16]), 0)?;
    let mut model = assemble_seg_model(backbone, 1)?;
    let cfg = SegTrainConfig { epochs: 80, batch_size: 16, learning_rate: 3e-3, loss: SegLoss::Dice, seed: 0 };
    let mut loader = SliceLoader::new(BandRule::SYNTH);
    train_seg_observed(&mut model, &data, Some(&data), &cfg, &mut loader, &mut |r| {
        if r.epoch % 10 != 0 {
            return;
        }
        println!("epoch {:>2}: loss {:.4} train dice {:.3} eval dice {:.3}", r.epoch, r.train_loss, r.train_dice, r.eval_dice.unwrap_or(f64::NAN));
    })?;

    let mut backbone = model.into_backbone();
    backbone.push_lineage(SEG_PRETRAIN);
    let out = dir.path().join("backbone");
    Checkpoint::from_backbone(&backbone.weights(), 0, cfg.epochs).save(&out)?;
    println!("{}", std::fs::read_to_string(out.join("meta.json"))?);
    Ok(())
}
