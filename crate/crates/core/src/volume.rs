//! 3D scalar volumes and their on-disk container.
//!
//! A `.vol` file is a little-endian container:
//!
//! ```text
//! magic   8 bytes  "BAVOL01\n"
//! shape   3 × u32  (sagittal, coronal, axial)
//! spacing f64      isotropic voxel size in mm
//! flags   u8       bit 0 set when a mask follows
//! voxels  f32 × N  C order, axial index fastest
//! mask    u8  × N  optional, 0 or 1
//! ```
//!
//! Each container has a JSON sidecar with the same stem carrying
//! `spacing_mm`, `shape`, `age_years` and `group`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::DiagnosisGroup;

const MAGIC: &[u8; 8] = b"BAVOL01\n";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("non-finite voxel at {0:?}")]
    NonFinite([usize; 3]),
    #[error("voxel spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A 3D image with axes (sagittal, coronal, axial). The axial index grows
/// toward the top of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeImage {
    voxels: Array3<f64>,
    spacing_mm: f64,
}

impl VolumeImage {
    pub fn new(voxels: Array3<f64>, spacing_mm: f64) -> Result<Self, VolumeError> {
        if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
            return Err(VolumeError::BadSpacing(spacing_mm));
        }
        if let Some((idx, _)) = voxels.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(VolumeError::NonFinite([idx.0, idx.1, idx.2]));
        }
        Ok(Self { voxels, spacing_mm })
    }

    pub fn voxels(&self) -> &Array3<f64> {
        &self.voxels
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn axial_slices(&self) -> usize {
        self.voxels.shape()[2]
    }
}

/// Sidecar metadata written next to each container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub spacing_mm: f64,
    pub shape: [usize; 3],
    pub age_years: f64,
    pub group: DiagnosisGroup,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    container.with_extension("json")
}

pub fn write_volume(path: &Path, volume: &VolumeImage, mask: Option<&Array3<bool>>) -> Result<(), VolumeError> {
    let io = |source| VolumeError::Io { path: path.to_path_buf(), source };
    let [x, y, z] = volume.shape();
    let mut buf = Vec::with_capacity(32 + x * y * z * 5);
    buf.extend_from_slice(MAGIC);
    for d in [x, y, z] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&volume.spacing_mm.to_le_bytes());
    buf.push(u8::from(mask.is_some()));
    for v in volume.voxels.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(mask) = mask {
        assert_eq!(mask.shape(), volume.voxels.shape(), "mask shape must match the volume");
        buf.extend(mask.iter().map(|&b| u8::from(b)));
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn read_volume(path: &Path) -> Result<(VolumeImage, Option<Array3<bool>>), VolumeError> {
    let corrupt = |reason: &str| VolumeError::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|source| VolumeError::Io { path: path.to_path_buf(), source })?;
    if raw.len() < 29 || &raw[..8] != MAGIC {
        return Err(corrupt("not a volume container"));
    }
    let dim = |i: usize| u32::from_le_bytes(raw[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (x, y, z) = (dim(0), dim(1), dim(2));
    let spacing = f64::from_le_bytes(raw[20..28].try_into().unwrap());
    let has_mask = raw[28] & 1 == 1;
    let n = x * y * z;
    let want = 29 + 4 * n + if has_mask { n } else { 0 };
    if raw.len() != want {
        return Err(corrupt(&format!("expected {want} bytes, found {}", raw.len())));
    }
    let voxels: Vec<f64> = raw[29..29 + 4 * n]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let voxels = Array3::from_shape_vec((x, y, z), voxels).map_err(|e| corrupt(&e.to_string()))?;
    let volume = VolumeImage::new(voxels, spacing).map_err(|e| corrupt(&e.to_string()))?;
    let mask = if has_mask {
        let bits: Vec<bool> = raw[29 + 4 * n..].iter().map(|&b| b != 0).collect();
        Some(Array3::from_shape_vec((x, y, z), bits).map_err(|e| corrupt(&e.to_string()))?)
    } else {
        None
    };
    Ok((volume, mask))
}

pub fn write_meta(path: &Path, meta: &VolumeMeta) -> Result<(), VolumeError> {
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(path, text + "\n").map_err(|source| VolumeError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_with_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let voxels = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| (i * 20 + j * 5 + k) as f64 * 0.25);
        let mask = Array3::from_shape_fn((3, 4, 5), |(i, _, k)| i == k);
        let vol = VolumeImage::new(voxels, 2.0).unwrap();
        write_volume(&path, &vol, Some(&mask)).unwrap();
        let (back, back_mask) = read_volume(&path).unwrap();
        assert_eq!(back, vol);
        assert_eq!(back_mask.unwrap(), mask);
    }

    #[test]
    fn truncated_container_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let vol = VolumeImage::new(Array3::zeros((2, 2, 2)), 1.0).unwrap();
        write_volume(&path, &vol, None).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(read_volume(&path), Err(VolumeError::Corrupt { .. })));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(read_volume(&path), Err(VolumeError::Corrupt { .. })));
    }

    #[test]
    fn rejects_non_finite_voxels_and_bad_spacing() {
        let mut v = Array3::zeros((2, 2, 2));
        v[[1, 0, 1]] = f64::NAN;
        assert!(matches!(VolumeImage::new(v, 1.0), Err(VolumeError::NonFinite([1, 0, 1]))));
        assert!(matches!(VolumeImage::new(Array3::zeros((1, 1, 1)), 0.0), Err(VolumeError::BadSpacing(_))));
    }
}
