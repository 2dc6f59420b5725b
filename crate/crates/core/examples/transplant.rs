//! Move an encoder from a segmentation network into an age regressor, by
//! value and through a checkpoint directory.

use brainage::models::{
    assemble_age_model, assemble_seg_model, build_backbone, transplant_backbone, Arch, BackboneSpec, Checkpoint,
    HasBackbone, Init,
};
use brainage_nn::{num_params, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (arch, plan, channels) in [(Arch::UnetEncoder, vec![8, 16, 32], 1), (Arch::Resnet50, vec![16, 32, 64, 128], 3)] {
        let spec = BackboneSpec::new(arch).with_plan(&plan);
        let mut seg = assemble_seg_model(build_backbone(&spec, 1)?, 1)?;
        let weights = transplant_backbone(&mut seg);

        let mut age = assemble_age_model(build_backbone(&spec, 2)?, (64, 64), Some(70.0))?;
        age.backbone_mut().load_weights(&weights)?;
        let x = Tensor::full(&[1, channels, 64, 64], 0.5);
        let same = seg.backbone_mut().features(&x)?.data() == age.backbone_mut().features(&x)?.data();
        println!(
            "{arch}: seg {} params, age {} params, features {:?}, identical after transplant: {same}",
            num_params(&mut seg),
            num_params(&mut age),
            age.backbone_mut().feature_shape((64, 64))?
        );

        let dir = tempfile::tempdir()?;
        Checkpoint::from_backbone(&weights, 1, 0).save(dir.path())?;
        let from_disk = spec.clone().with_init(Init::Checkpoint, Some(dir.path().to_path_buf()));
        let mut reloaded = build_backbone(&from_disk, 99)?;
        println!("  reloaded from {}: identical {}", dir.path().display(), reloaded.features(&x)?.data() == seg.backbone_mut().features(&x)?.data());
    }

    // A checkpoint only fits the spec it was written for.
    let mut seg = assemble_seg_model(build_backbone(&BackboneSpec::new(Arch::UnetEncoder).with_plan(&[8, 16]), 0)?, 1)?;
    let w = transplant_backbone(&mut seg);
    let mut other = build_backbone(&BackboneSpec::new(Arch::UnetEncoder).with_plan(&[4, 8]), 0)?;
    let err = other.load_weights(&w).unwrap_err().to_string();
    println!("mismatch: {}...", &err[..err.find(';').unwrap_or(err.len())]);
    Ok(())
}
