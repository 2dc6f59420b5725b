//! Render synthetic subjects, show how their anatomy tracks age, and write a
//! small labelled cohort with its manifest.

use brainage::manifest::{DiagnosisGroup, Split};
use brainage::synth::{generate_cohort, generate_subject_at, CohortCount, CohortSpec, SynthConfig, Tissue};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { volume_shape: [48, 48, 48], seed: 3, ..Default::default() };

    println!("age  ventricle  cortex  lesion");
    for age in [55.0, 65.0, 75.0, 85.0, 95.0] {
        let s = generate_subject_at(&cfg, 0, age)?;
        println!(
            "{age:>3}  {:>9}  {:>6}  {:>6}",
            s.count(Tissue::Ventricle),
            s.count(Tissue::Cortex),
            s.count(Tissue::Lesion)
        );
    }

    let cell = |split, group, count| CohortCount { split, group, count };
    let spec = CohortSpec {
        counts: vec![
            cell(Split::Train, DiagnosisGroup::CN, 4),
            cell(Split::Test, DiagnosisGroup::CN, 2),
            cell(Split::Test, DiagnosisGroup::AD, 2),
        ],
        group_offsets: [(DiagnosisGroup::AD, 8.0)].into(),
    };
    let dir = tempfile::tempdir()?;
    let manifest = generate_cohort(&cfg, &spec, dir.path())?;
    print!("\n{}", manifest.to_csv_string());
    Ok(())
}
