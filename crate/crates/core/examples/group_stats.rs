//! Compare age deltas between diagnosis groups with one-sided Mann-Whitney
//! tests, aggregate runs into a report, and score masks with Dice.

use brainage::evalstats::{
    dice, evaluation_report, mwu, mwu_with_threshold, pairwise_group_tests, Alternative, PredictionRecord,
    RunPredictions,
};
use brainage::manifest::DiagnosisGroup;
use ndarray::Array3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Small samples get the exact permutation distribution, ties included.
    let r = mwu(&[3.0, 4.0, 4.0, 5.0], &[1.0, 2.0, 4.0], Alternative::AGreater)?;
    println!("exact: U {} p {:.4} ({:?})", r.u_statistic, r.p_value, r.method);
    let r = mwu_with_threshold(&[3.0, 4.0, 4.0, 5.0], &[1.0, 2.0, 4.0], Alternative::AGreater, 0)?;
    println!("normal: U {} p {:.4} tie correction {}", r.u_statistic, r.p_value, r.tie_correction_applied);

    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let mut records = Vec::new();
        for (g, shift) in [(DiagnosisGroup::CN, 0.0), (DiagnosisGroup::MCI, 3.0), (DiagnosisGroup::AD, 6.0)] {
            for i in 0..12 {
                let age = 60.0 + 2.5 * i as f64;
                let noise = ((i as u64 * 7 + seed * 3) % 5) as f64 - 2.0;
                records.push(PredictionRecord::new(format!("{g}-{i}"), g, age, age + shift + noise));
            }
        }
        if seed == 0 {
            for ((lo, hi), t) in pairwise_group_tests(&records)? {
                println!("{hi} > {lo}: p {:.2e}", t.p_value);
            }
        }
        runs.push(RunPredictions { backbone: "unet_encoder".into(), pretraining: "none".into(), split: "test".into(), seed, records });
    }
    let report = evaluation_report(&runs)?;
    print!("\n{}\n{}", report.to_text(), report.to_csv());

    let a = Array3::from_shape_fn((4, 4, 4), |(i, j, _)| i < 2 && j < 3);
    let b = Array3::from_shape_fn((4, 4, 4), |(i, j, _)| i < 3 && j < 2);
    let empty = Array3::from_elem((4, 4, 4), false);
    println!("dice {:.3}, both empty {}", dice(&a, &b)?, dice(&empty, &empty)?);
    Ok(())
}
