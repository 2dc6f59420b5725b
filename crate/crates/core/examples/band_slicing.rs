//! Pick the axial band a model sees: fixed discards at both ends, then a
//! centred window of the target size.

use brainage::preprocess::{extract_band, volume_to_model_input, BandRule};
use brainage::synth::{generate_subject, SynthConfig};
use brainage::volume::VolumeImage;
use ndarray::Array3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (slices, spacing) in [(115, 1.0), (91, 2.0), (64, 2.0), (30, 2.0)] {
        match BandRule::TEMPLATE.indices(slices, spacing) {
            Ok(idx) => println!("{slices} slices @ {spacing} mm: indices {}..={}", idx.last().unwrap(), idx[0]),
            Err(e) => println!("{slices} slices @ {spacing} mm: {e}"),
        }
    }

    // Slices come out top first and unnormalized.
    let ramp = VolumeImage::new(Array3::from_shape_fn((2, 2, 91), |(_, _, z)| z as f64), 2.0)?;
    let band = extract_band(&ramp, &BandRule::TEMPLATE)?;
    println!("first/last kept slice value: {} / {}", band.slices[[0, 0, 0, 0]], band.slices[[band.count() - 1, 0, 0, 0]]);

    // Model input: min-max normalized, replicated to three channels.
    let subject = generate_subject(&SynthConfig::default(), 0)?;
    let input = volume_to_model_input(&subject.volume, &BandRule::SYNTH, 3)?;
    let (lo, hi) = input.slices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    println!("synthetic subject -> {:?}, values in [{lo}, {hi}]", input.slices.shape());
    Ok(())
}
