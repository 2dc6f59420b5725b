//! Volume → ordered axial slice stack.
//!
//! A [`BandRule`] discards a fixed thickness (in mm, floored to whole
//! slices) from the top and bottom of the volume, then keeps
//! `target_slices` contiguous slices centred in the surviving band. Odd
//! excess drops the extra slice at the bottom. Output order is top to
//! bottom.

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::VolumeImage;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("band of {band} slices is {deficit} short of the {target} required")]
    BandTooSmall { band: i64, target: usize, deficit: usize },
    #[error("slice contains non-finite values")]
    NonFinite,
    #[error("model input needs 1 or 3 channels, got {0}")]
    BadChannels(usize),
    #[error("invalid band rule: {0}")]
    InvalidRule(String),
    #[error("unknown band rule profile '{0}' (expected 'template' or 'synth')")]
    UnknownProfile(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRule {
    pub top_discard_mm: f64,
    pub bottom_discard_mm: f64,
    pub target_slices: usize,
}

impl BandRule {
    /// 40 mm top, 35 mm bottom, 40 slices: for 2 mm template-space volumes.
    pub const TEMPLATE: BandRule = BandRule { top_discard_mm: 40.0, bottom_discard_mm: 35.0, target_slices: 40 };
    /// 10 mm top, 10 mm bottom, 20 slices: for 48–64 voxel synthetic volumes.
    pub const SYNTH: BandRule = BandRule { top_discard_mm: 10.0, bottom_discard_mm: 10.0, target_slices: 20 };

    pub fn profile(name: &str) -> Result<BandRule, PreprocessError> {
        match name {
            "template" => Ok(Self::TEMPLATE),
            "synth" => Ok(Self::SYNTH),
            other => Err(PreprocessError::UnknownProfile(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.top_discard_mm) || !ok(self.bottom_discard_mm) {
            return Err(PreprocessError::InvalidRule("discard thickness must be finite and >= 0".into()));
        }
        if self.target_slices == 0 {
            return Err(PreprocessError::InvalidRule("target_slices must be >= 1".into()));
        }
        Ok(())
    }

    /// Axial indices kept for a volume of `n_slices` at `spacing_mm`,
    /// ordered top (highest index) to bottom.
    pub fn indices(&self, n_slices: usize, spacing_mm: f64) -> Result<Vec<usize>, PreprocessError> {
        self.validate()?;
        let top = (self.top_discard_mm / spacing_mm).floor() as i64;
        let bottom = (self.bottom_discard_mm / spacing_mm).floor() as i64;
        let band = n_slices as i64 - top - bottom;
        let target = self.target_slices as i64;
        if band < target {
            return Err(PreprocessError::BandTooSmall {
                band,
                target: self.target_slices,
                deficit: (target - band.max(0)) as usize,
            });
        }
        let excess = band - target;
        let drop_bottom = (excess + 1) / 2;
        let lo = (bottom + drop_bottom) as usize;
        Ok((lo..lo + self.target_slices).rev().collect())
    }
}

/// Slices of one subject as `(count, channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub source_id: String,
    pub slices: Array4<f64>,
}

impl SliceStack {
    pub fn count(&self) -> usize {
        self.slices.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.slices.shape()[1]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.slices.shape()[2], self.slices.shape()[3])
    }
}

/// Keep the band's slices, unnormalized, single channel.
pub fn extract_band(volume: &VolumeImage, rule: &BandRule) -> Result<SliceStack, PreprocessError> {
    let idx = rule.indices(volume.axial_slices(), volume.spacing_mm())?;
    let [nx, ny, _] = volume.shape();
    let mut slices = Array4::zeros((idx.len(), 1, nx, ny));
    for (i, &z) in idx.iter().enumerate() {
        slices.slice_mut(s![i, 0, .., ..]).assign(&volume.voxels().slice(s![.., .., z]));
    }
    Ok(SliceStack { source_id: String::new(), slices })
}

/// Min-max scale to `[0, 1]`; a constant slice maps to zeros.
pub fn normalize_slice(slice: ArrayView2<'_, f64>) -> Result<Array2<f64>, PreprocessError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in slice {
        if !v.is_finite() {
            return Err(PreprocessError::NonFinite);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= 0.0 || slice.is_empty() {
        return Ok(Array2::zeros(slice.raw_dim()));
    }
    Ok(slice.mapv(|v| (v - lo) / range))
}

/// Band extraction, per-slice normalization, and channel replication.
pub fn volume_to_model_input(
    volume: &VolumeImage,
    rule: &BandRule,
    channels: usize,
) -> Result<SliceStack, PreprocessError> {
    if channels != 1 && channels != 3 {
        return Err(PreprocessError::BadChannels(channels));
    }
    let band = extract_band(volume, rule)?;
    Ok(normalize_and_replicate(band, channels))
}

/// Every axial slice, normalized; used for segmentation data where all
/// slices are fed to the model.
pub fn all_slices(volume: &VolumeImage, channels: usize) -> Result<SliceStack, PreprocessError> {
    if channels != 1 && channels != 3 {
        return Err(PreprocessError::BadChannels(channels));
    }
    let [nx, ny, nz] = volume.shape();
    let mut slices = Array4::zeros((nz, 1, nx, ny));
    for z in 0..nz {
        slices.slice_mut(s![z, 0, .., ..]).assign(&volume.voxels().slice(s![.., .., nz - 1 - z]));
    }
    Ok(normalize_and_replicate(SliceStack { source_id: String::new(), slices }, channels))
}

fn normalize_and_replicate(band: SliceStack, channels: usize) -> SliceStack {
    let (h, w) = band.hw();
    let mut out = Array4::zeros((band.count(), channels, h, w));
    for (i, slice) in band.slices.axis_iter(Axis(0)).enumerate() {
        // VolumeImage guarantees finite voxels.
        let norm = normalize_slice(slice.index_axis(Axis(0), 0)).expect("finite volume");
        for c in 0..channels {
            out.slice_mut(s![i, c, .., ..]).assign(&norm);
        }
    }
    SliceStack { source_id: band.source_id, slices: out }
}
