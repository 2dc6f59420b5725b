//! Deterministic synthetic "brains" whose geometry encodes age.
//!
//! Each subject is an ellipsoidal brain with three age-free or
//! age-dependent structures:
//!
//! * a central ventricle sphere of radius `r(a) = 4 + 0.15·(a − a_min)`
//!   voxels, so it grows with age;
//! * a cortical shell whose thickness `5 − 0.075·(a − a_min)` voxels
//!   (floored at 1) shrinks with age;
//! * an off-center ellipsoidal lesion, placed independently of age and
//!   never touching the ventricle. Its voxel set is the segmentation target.
//!
//! Every subject is a pure function of `(seed, subject_index)`: the
//! generator stream is ChaCha8 seeded with `seed`, on stream
//! `subject_index`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{DatasetManifest, DiagnosisGroup, ImageRef, Split, SubjectRecord};
use crate::volume::{self, VolumeError, VolumeImage, VolumeMeta};

pub const VENTRICLE_R0: f64 = 4.0;
pub const VENTRICLE_GROWTH: f64 = 0.15;
pub const SHELL_T0: f64 = 5.0;
pub const SHELL_THINNING: f64 = 0.075;
const LESION_ATTEMPTS: usize = 100;

const MATTER: f64 = 0.55;
const CORTEX: f64 = 0.8;
const CSF: f64 = 0.15;
const LESION_OFFSET: f64 = 0.35;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error("could not place a lesion for subject {index} after {attempts} attempts; volume too small?")]
    LesionPlacement { index: u64, attempts: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub volume_shape: [usize; 3],
    pub spacing_mm: f64,
    pub age_range: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { volume_shape: [64, 64, 64], spacing_mm: 2.0, age_range: [55.0, 95.0], noise_sigma: 0.05, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let [a_min, a_max] = self.age_range;
        if !(a_min.is_finite() && a_max.is_finite() && a_min < a_max) {
            return Err(SynthError::Config(format!("age range [{a_min}, {a_max}] must be increasing")));
        }
        if self.volume_shape.iter().any(|&d| d < 48) {
            return Err(SynthError::Config(format!("volume shape {:?} must be at least 48 per axis", self.volume_shape)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SynthError::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(SynthError::Config(format!("spacing {} must be > 0", self.spacing_mm)));
        }
        Ok(())
    }

    /// Ventricle radius in voxels for a geometry age.
    pub fn ventricle_radius(&self, age: f64) -> f64 {
        VENTRICLE_R0 + VENTRICLE_GROWTH * (age - self.age_range[0])
    }

    /// Cortical shell thickness in voxels for a geometry age.
    pub fn shell_thickness(&self, age: f64) -> f64 {
        (SHELL_T0 - SHELL_THINNING * (age - self.age_range[0])).max(1.0)
    }
}

/// Tissue class of each voxel before noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Matter = 1,
    Cortex = 2,
    Ventricle = 3,
    Lesion = 4,
}

#[derive(Clone, Debug)]
pub struct SynthSubject {
    pub volume: VolumeImage,
    pub seg_mask: Array3<bool>,
    /// Recorded chronological age.
    pub age_years: f64,
    /// Age the geometry was rendered at (differs from `age_years` for
    /// groups with an offset).
    pub geometry_age: f64,
    pub tissue: Array3<Tissue>,
}

impl SynthSubject {
    pub fn count(&self, tissue: Tissue) -> usize {
        self.tissue.iter().filter(|&&t| t == tissue).count()
    }
}

fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generate subject `index` at an age drawn uniformly from the age range.
pub fn generate_subject(cfg: &SynthConfig, index: u64) -> Result<SynthSubject, SynthError> {
    render(cfg, index, None, 0.0)
}

/// Generate subject `index` with its geometry rendered at `geometry_age`.
/// The recorded age is still the one drawn from the stream, so the lesion
/// and noise are identical to [`generate_subject`].
pub fn generate_subject_at(cfg: &SynthConfig, index: u64, geometry_age: f64) -> Result<SynthSubject, SynthError> {
    render(cfg, index, Some(geometry_age), 0.0)
}

fn render(cfg: &SynthConfig, index: u64, forced: Option<f64>, offset: f64) -> Result<SynthSubject, SynthError> {
    cfg.validate()?;
    let mut rng = subject_rng(cfg.seed, index);
    let [a_min, a_max] = cfg.age_range;
    let age_years = rng.random_range(a_min..a_max);
    let geometry_age = forced.unwrap_or(age_years + offset);

    let [nx, ny, nz] = cfg.volume_shape;
    let center = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0];
    let semi = [0.44 * nx as f64, 0.47 * ny as f64, 0.44 * nz as f64];
    let min_semi = semi.iter().cloned().fold(f64::INFINITY, f64::min);
    let ventricle_r = cfg.ventricle_radius(geometry_age);
    let shell = cfg.shell_thickness(geometry_age);

    let brain_rho = |p: [f64; 3]| -> f64 {
        ((p[0] - center[0]) / semi[0]).powi(2)
            + ((p[1] - center[1]) / semi[1]).powi(2)
            + ((p[2] - center[2]) / semi[2]).powi(2)
    };
    let vent_d2 = |p: [f64; 3]| -> f64 {
        (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)
    };

    let mut tissue = Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
        let p = [i as f64, j as f64, k as f64];
        let rho2 = brain_rho(p);
        if rho2 > 1.0 {
            Tissue::Background
        } else if vent_d2(p) <= ventricle_r * ventricle_r {
            Tissue::Ventricle
        } else if (1.0 - rho2.sqrt()) * min_semi < shell {
            Tissue::Cortex
        } else {
            Tissue::Matter
        }
    });

    // Lesion: axis-aligned ellipsoid fully inside the brain, at least one
    // voxel away from the ventricle.
    let scale = nx.min(ny).min(nz) as f64 / 48.0;
    let mut placed = None;
    for _ in 0..LESION_ATTEMPTS {
        let radii = [
            rng.random_range(2.0..4.0) * scale,
            rng.random_range(2.0..4.0) * scale,
            rng.random_range(2.0..4.0) * scale,
        ];
        let c = [
            rng.random_range(center[0] - semi[0]..center[0] + semi[0]),
            rng.random_range(center[1] - semi[1]..center[1] + semi[1]),
            rng.random_range(center[2] - semi[2]..center[2] + semi[2]),
        ];
        let voxels = lesion_voxels(c, radii, [nx, ny, nz]);
        let fits = !voxels.is_empty()
            && voxels.iter().all(|&(i, j, k)| {
                let p = [i as f64, j as f64, k as f64];
                let gap = ventricle_r + 1.0;
                brain_rho(p) <= 1.0 && vent_d2(p) > gap * gap
            });
        if fits {
            placed = Some(voxels);
            break;
        }
    }
    let lesion = placed.ok_or(SynthError::LesionPlacement { index, attempts: LESION_ATTEMPTS })?;
    let mut seg_mask = Array3::from_elem((nx, ny, nz), false);
    let mut intensity = tissue.mapv(|t| match t {
        Tissue::Background => 0.0,
        Tissue::Matter => MATTER,
        Tissue::Cortex => CORTEX,
        Tissue::Ventricle => CSF,
        Tissue::Lesion => unreachable!(),
    });
    for &(i, j, k) in &lesion {
        seg_mask[[i, j, k]] = true;
        tissue[[i, j, k]] = Tissue::Lesion;
        intensity[[i, j, k]] = (intensity[[i, j, k]] + LESION_OFFSET).min(1.0);
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        intensity.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let volume = VolumeImage::new(intensity, cfg.spacing_mm)?;
    Ok(SynthSubject { volume, seg_mask, age_years, geometry_age, tissue })
}

fn lesion_voxels(c: [f64; 3], r: [f64; 3], shape: [usize; 3]) -> Vec<(usize, usize, usize)> {
    let range = |axis: usize| {
        let lo = (c[axis] - r[axis]).floor().max(0.0) as usize;
        let hi = ((c[axis] + r[axis]).ceil() as usize).min(shape[axis] - 1);
        lo..=hi
    };
    let mut out = Vec::new();
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let d = ((i as f64 - c[0]) / r[0]).powi(2)
                    + ((j as f64 - c[1]) / r[1]).powi(2)
                    + ((k as f64 - c[2]) / r[2]).powi(2);
                if d <= 1.0 {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

/// Number of subjects to generate for one (split, group) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortCount {
    pub split: Split,
    pub group: DiagnosisGroup,
    pub count: usize,
}

/// What to generate: per-cell counts plus per-group geometry offsets in
/// years (MCI/AD brains look older than their recorded age).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub counts: Vec<CohortCount>,
    #[serde(default)]
    pub group_offsets: BTreeMap<DiagnosisGroup, f64>,
}

impl CohortSpec {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.count).sum()
    }

    pub fn offset(&self, group: DiagnosisGroup) -> f64 {
        self.group_offsets.get(&group).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.offset(DiagnosisGroup::CN) != 0.0 {
            return Err(SynthError::Config(format!(
                "CN offset must be 0, got {}",
                self.offset(DiagnosisGroup::CN)
            )));
        }
        if let Some((g, o)) = self.group_offsets.iter().find(|(_, o)| !o.is_finite()) {
            return Err(SynthError::Config(format!("offset for {g} is not finite: {o}")));
        }
        Ok(())
    }
}

/// Subject id for a running cohort index.
pub fn subject_id(index: u64) -> String {
    format!("sub-{index:04}")
}

/// Render one cohort member: recorded age from the stream, geometry aged by
/// the group offset.
pub fn generate_cohort_subject(
    cfg: &SynthConfig,
    index: u64,
    group_offset: f64,
) -> Result<SynthSubject, SynthError> {
    render(cfg, index, None, group_offset)
}

/// Write every subject of `spec` under `out_dir/volumes/` and return a
/// manifest referencing the containers (paths relative to `out_dir`).
/// Subjects are numbered in the order of `spec.counts`.
pub fn generate_cohort(cfg: &SynthConfig, spec: &CohortSpec, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.total());
    let vol_dir = out_dir.join("volumes");
    if spec.total() > 0 {
        std::fs::create_dir_all(&vol_dir).map_err(|source| SynthError::Io { path: vol_dir.clone(), source })?;
    }
    let mut index = 0u64;
    for cell in &spec.counts {
        for _ in 0..cell.count {
            let id = subject_id(index);
            let subject = generate_cohort_subject(cfg, index, spec.offset(cell.group))?;
            let rel = PathBuf::from("volumes").join(format!("{id}.vol"));
            let path = out_dir.join(&rel);
            volume::write_volume(&path, &subject.volume, Some(&subject.seg_mask))?;
            let age = round_age(subject.age_years);
            volume::write_meta(
                &volume::sidecar_path(&path),
                &VolumeMeta {
                    spacing_mm: cfg.spacing_mm,
                    shape: cfg.volume_shape,
                    age_years: age,
                    group: cell.group,
                },
            )?;
            let record = SubjectRecord::new(id, ImageRef::Path(rel), age, cell.group, cell.split)
                .map_err(|e| SynthError::Config(e.to_string()))?;
            records.push(record);
            index += 1;
        }
    }
    let mut manifest = DatasetManifest::new(records).map_err(|e| SynthError::Config(e.to_string()))?;
    manifest.spacing_mm = Some(cfg.spacing_mm);
    manifest.base_dir = out_dir.to_path_buf();
    Ok(manifest)
}

/// Ages are recorded to 0.01 years so the CSV stays readable.
fn round_age(age: f64) -> f64 {
    (age * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> SynthConfig {
        SynthConfig { volume_shape: [48, 48, 48], noise_sigma: 0.0, seed, ..Default::default() }
    }

    /// Lattice points of the volume within `r` of its center, by brute force.
    fn lattice_sphere(shape: [usize; 3], r: f64) -> usize {
        let c: Vec<f64> = shape.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
        let mut n = 0;
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                    if d2 <= r * r {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn same_index_is_bit_identical() {
        let cfg = SynthConfig { volume_shape: [48, 48, 48], seed: 11, ..Default::default() };
        let a = generate_subject(&cfg, 3).unwrap();
        let b = generate_subject(&cfg, 3).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.seg_mask, b.seg_mask);
        assert_eq!(a.age_years.to_bits(), b.age_years.to_bits());
        let c = generate_subject(&cfg, 4).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn ventricle_at_min_age_has_radius_four() {
        let cfg = quiet(1);
        let s = generate_subject_at(&cfg, 0, cfg.age_range[0]).unwrap();
        let count = s.count(Tissue::Ventricle);
        assert_eq!(count, lattice_sphere(cfg.volume_shape, 4.0));
        let vol = |r: f64| 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        assert!((count as f64) >= vol(3.0) && (count as f64) <= vol(5.0));
    }

    #[test]
    fn ventricle_grows_with_age() {
        let cfg = quiet(2);
        let mut last = 0;
        for age in [55.0, 60.0, 67.5, 75.0, 82.0, 94.0] {
            let n = generate_subject_at(&cfg, 0, age).unwrap().count(Tissue::Ventricle);
            assert!(n > last, "age {age}: {n} <= {last}");
            last = n;
        }
    }

    #[test]
    fn masks_are_nonempty_and_disjoint_from_ventricle() {
        let cfg = SynthConfig { volume_shape: [48, 48, 48], seed: 5, ..Default::default() };
        for i in 0..20 {
            let s = generate_subject(&cfg, i).unwrap();
            assert!(s.seg_mask.iter().any(|&b| b));
            for (m, t) in s.seg_mask.iter().zip(s.tissue.iter()) {
                assert!(!(*m && *t == Tissue::Ventricle));
                assert_eq!(*m, *t == Tissue::Lesion);
            }
            assert!(s.volume.voxels().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn noise_free_intensities_are_in_unit_range() {
        let s = generate_subject(&quiet(9), 7).unwrap();
        assert!(s.volume.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn r_squared(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let ss_res: f64 = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
        let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn ventricle_size_explains_age() {
        // Ordinary least squares over noise-free subjects. The voxel count
        // grows with the cube of the radius, so the linear signal lives in
        // the equivalent radius; the raw count is still strongly linear.
        let cfg = quiet(21);
        let counts: Vec<(f64, f64)> = (0..100)
            .map(|i| {
                let s = generate_subject(&cfg, i).unwrap();
                (s.count(Tissue::Ventricle) as f64, s.age_years)
            })
            .collect();
        let radii: Vec<(f64, f64)> = counts.iter().map(|&(n, a)| (n.cbrt(), a)).collect();
        let r2_radius = r_squared(&radii);
        assert!(r2_radius > 0.99, "R² on equivalent radius = {r2_radius}");
        let r2_count = r_squared(&counts);
        assert!(r2_count > 0.9, "R² on raw count = {r2_count}");
    }

    #[test]
    fn offsets_age_the_geometry() {
        let cfg = quiet(3);
        let spec_offset = 8.0;
        let ad = generate_cohort_subject(&cfg, 12, spec_offset).unwrap();
        let cn_twin = generate_subject_at(&cfg, 99, ad.age_years + spec_offset).unwrap();
        assert_eq!(ad.count(Tissue::Ventricle), cn_twin.count(Tissue::Ventricle));
        let young = generate_subject_at(&cfg, 99, ad.age_years).unwrap();
        assert!(ad.count(Tissue::Ventricle) > young.count(Tissue::Ventricle));
    }

    #[test]
    fn config_validation() {
        let bad = SynthConfig { age_range: [80.0, 60.0], ..Default::default() };
        assert!(matches!(bad.validate(), Err(SynthError::Config(_))));
        let small = SynthConfig { volume_shape: [64, 40, 64], ..Default::default() };
        assert!(small.validate().is_err());
        let spec = CohortSpec { counts: vec![], group_offsets: [(DiagnosisGroup::CN, 1.0)].into() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn empty_cohort_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CohortSpec {
            counts: Split::ALL.iter().map(|&split| CohortCount { split, group: DiagnosisGroup::CN, count: 0 }).collect(),
            group_offsets: BTreeMap::new(),
        };
        let m = generate_cohort(&SynthConfig::default(), &spec, dir.path()).unwrap();
        assert!(m.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
