//! Loading manifest records into model-ready slice stacks.

use ndarray::{s, Array3};
use thiserror::Error;

use crate::manifest::{DatasetManifest, ImageRef, SubjectRecord};
use crate::preprocess::{all_slices, volume_to_model_input, BandRule, PreprocessError, SliceStack};
use crate::synth::{generate_subject_at, SynthConfig, SynthError};
use crate::volume::{read_volume, VolumeError, VolumeImage};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{id}: {source}")]
    Volume { id: String, source: VolumeError },
    #[error("{id}: {source}")]
    Synth { id: String, source: SynthError },
    #[error("{id}: {source}")]
    Preprocess { id: String, source: PreprocessError },
    #[error("{id}: no segmentation mask stored with the volume")]
    MissingMask { id: String },
}

impl DataError {
    pub fn subject_id(&self) -> &str {
        match self {
            DataError::Volume { id, .. }
            | DataError::Synth { id, .. }
            | DataError::Preprocess { id, .. }
            | DataError::MissingMask { id } => id,
        }
    }
}

pub struct LoadedVolume {
    pub volume: VolumeImage,
    pub mask: Option<Array3<bool>>,
}

/// Where volumes come from. Tests wrap the file source to observe which
/// records are read.
pub trait VolumeSource {
    fn load(&mut self, manifest: &DatasetManifest, record: &SubjectRecord) -> Result<LoadedVolume, DataError>;
}

/// Reads `.vol` containers relative to the manifest's base directory and
/// renders `synth:<seed>` references on the fly.
#[derive(Clone, Copy, Debug, Default)]
pub struct FileSource;

impl VolumeSource for FileSource {
    fn load(&mut self, manifest: &DatasetManifest, record: &SubjectRecord) -> Result<LoadedVolume, DataError> {
        let id = || record.subject_id.clone();
        match &record.image_ref {
            ImageRef::Path(p) => {
                let (volume, mask) = read_volume(&manifest.resolve(p)).map_err(|source| DataError::Volume { id: id(), source })?;
                Ok(LoadedVolume { volume, mask })
            }
            ImageRef::Synth(seed) => {
                let cfg = SynthConfig { seed: *seed, ..SynthConfig::default() };
                let subj = generate_subject_at(&cfg, 0, record.age_years).map_err(|source| DataError::Synth { id: id(), source })?;
                Ok(LoadedVolume { volume: subj.volume, mask: Some(subj.seg_mask) })
            }
        }
    }
}

/// Turns records into normalized slice stacks with a fixed band rule.
pub struct SliceLoader<'s> {
    source: Box<dyn VolumeSource + 's>,
    rule: BandRule,
}

impl<'s> SliceLoader<'s> {
    pub fn new(rule: BandRule) -> Self {
        Self { source: Box::new(FileSource), rule }
    }

    pub fn with_source(source: impl VolumeSource + 's, rule: BandRule) -> Self {
        Self { source: Box::new(source), rule }
    }

    pub fn rule(&self) -> &BandRule {
        &self.rule
    }

    /// The band of axial slices fed to the age model, top to bottom.
    pub fn age_stack(&mut self, manifest: &DatasetManifest, record: &SubjectRecord, channels: usize) -> Result<SliceStack, DataError> {
        let loaded = self.source.load(manifest, record)?;
        let mut stack = volume_to_model_input(&loaded.volume, &self.rule, channels)
            .map_err(|source| DataError::Preprocess { id: record.subject_id.clone(), source })?;
        stack.source_id = record.subject_id.clone();
        Ok(stack)
    }

    /// Every axial slice with its mask slice, both top to bottom. The mask
    /// has shape `(slices, H, W)`.
    pub fn seg_slices(
        &mut self,
        manifest: &DatasetManifest,
        record: &SubjectRecord,
        channels: usize,
    ) -> Result<(SliceStack, Array3<bool>), DataError> {
        let loaded = self.source.load(manifest, record)?;
        let mask = loaded.mask.ok_or_else(|| DataError::MissingMask { id: record.subject_id.clone() })?;
        let mut stack = all_slices(&loaded.volume, channels)
            .map_err(|source| DataError::Preprocess { id: record.subject_id.clone(), source })?;
        stack.source_id = record.subject_id.clone();
        let [nx, ny, nz] = loaded.volume.shape();
        let mut m = Array3::from_elem((nz, nx, ny), false);
        for k in 0..nz {
            m.slice_mut(s![k, .., ..]).assign(&mask.slice(s![.., .., nz - 1 - k]));
        }
        Ok((stack, m))
    }
}
