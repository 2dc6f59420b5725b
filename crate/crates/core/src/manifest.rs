//! Subject records, dataset manifests and split filtering.
//!
//! A manifest is a CSV file with the header
//! `subject_id,image_ref,age_years,group,split`. Ages are decimal years.
//! `image_ref` is either a path (relative paths resolve against the
//! manifest's directory) or `synth:<seed>` for an on-the-fly synthetic
//! volume.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_HEADER: [&str; 5] = ["subject_id", "image_ref", "age_years", "group", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiagnosisGroup {
    CN,
    MCI,
    AD,
}

impl DiagnosisGroup {
    pub const ALL: [DiagnosisGroup; 3] = [DiagnosisGroup::CN, DiagnosisGroup::MCI, DiagnosisGroup::AD];

    pub fn as_str(self) -> &'static str {
        match self {
            DiagnosisGroup::CN => "CN",
            DiagnosisGroup::MCI => "MCI",
            DiagnosisGroup::AD => "AD",
        }
    }
}

impl fmt::Display for DiagnosisGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DiagnosisGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CN" => Ok(DiagnosisGroup::CN),
            "MCI" => Ok(DiagnosisGroup::MCI),
            "AD" => Ok(DiagnosisGroup::AD),
            other => Err(format!("unknown diagnosis group '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Where a subject's volume comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ImageRef {
    Path(PathBuf),
    /// Synthetic subject generated from the default generator settings with
    /// this seed, rendered at the record's age.
    Synth(u64),
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::Path(p) => write!(f, "{}", p.display()),
            ImageRef::Synth(seed) => write!(f, "synth:{seed}"),
        }
    }
}

impl FromStr for ImageRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(seed) = s.strip_prefix("synth:") {
            return seed
                .parse()
                .map(ImageRef::Synth)
                .map_err(|_| format!("bad synthetic seed in '{s}'"));
        }
        if s.is_empty() {
            return Err("empty image_ref".into());
        }
        Ok(ImageRef::Path(PathBuf::from(s)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub image_ref: ImageRef,
    /// Chronological age in years.
    pub age_years: f64,
    pub group: DiagnosisGroup,
    pub split: Split,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        image_ref: ImageRef,
        age_years: f64,
        group: DiagnosisGroup,
        split: Split,
    ) -> Result<Self, ManifestError> {
        let subject_id = subject_id.into();
        if subject_id.is_empty() {
            return Err(ManifestError::InvalidRecord("empty subject_id".into()));
        }
        if !(age_years > 0.0 && age_years < 130.0) {
            return Err(ManifestError::InvalidRecord(format!(
                "age {age_years} of {subject_id} outside (0, 130)"
            )));
        }
        Ok(Self { subject_id, image_ref, age_years, group, split })
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("missing column '{0}' in manifest header")]
    MissingColumn(&'static str),
    #[error("unparseable age '{value}' at row {row}")]
    BadAge { row: usize, value: String },
    #[error("unknown group '{value}' at row {row}")]
    UnknownGroup { row: usize, value: String },
    #[error("unknown split '{value}' at row {row}")]
    UnknownSplit { row: usize, value: String },
    #[error("invalid row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("duplicate subject_id '{id}' at rows {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("manifest {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest csv: {0}")]
    Csv(#[from] csv::Error),
}

/// An ordered, id-unique list of subjects.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SubjectRecord>,
    /// Isotropic voxel spacing, when known. Manifests loaded from CSV leave
    /// this unset; each volume's own metadata is authoritative.
    pub spacing_mm: Option<f64>,
    /// Directory that relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self, ManifestError> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if let Some(first) = seen.insert(&r.subject_id, i + 1) {
                return Err(ManifestError::DuplicateId { id: r.subject_id.clone(), first, second: i + 1 });
            }
        }
        Ok(Self { records, spacing_mm: None, base_dir: PathBuf::new() })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SubjectRecord> {
        self.records.iter()
    }

    /// Records of one split, optionally restricted to one group. Order is
    /// preserved.
    pub fn filter_split(&self, split: Split, group: Option<DiagnosisGroup>) -> DatasetManifest {
        self.filter(|r| r.split == split && group.is_none_or(|g| r.group == g))
    }

    pub fn filter_group(&self, group: DiagnosisGroup) -> DatasetManifest {
        self.filter(|r| r.group == group)
    }

    pub fn filter(&self, keep: impl Fn(&SubjectRecord) -> bool) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            spacing_mm: self.spacing_mm,
            base_dir: self.base_dir.clone(),
        }
    }

    /// Concatenate two manifests that share a base directory.
    pub fn union(&self, other: &DatasetManifest) -> Result<DatasetManifest, ManifestError> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let mut out = DatasetManifest::new(records)?;
        out.spacing_mm = self.spacing_mm.or(other.spacing_mm);
        out.base_dir = self.base_dir.clone();
        Ok(out)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = MANIFEST_HEADER.join(",");
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.subject_id, r.image_ref, r.age_years, r.group, r.split
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, self.to_csv_string())
            .map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })
    }
}

/// Parse a manifest from CSV text. Row numbers in errors count data rows
/// from 1.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest, ManifestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_HEADER) {
        *slot = header.iter().position(|h| h == name).ok_or(ManifestError::MissingColumn(name))?;
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let field = |c: usize| row.get(cols[c]).unwrap_or("");
        let age_raw = field(2);
        let age: f64 = age_raw
            .parse()
            .map_err(|_| ManifestError::BadAge { row: row_no, value: age_raw.to_string() })?;
        let group = field(3)
            .parse()
            .map_err(|_| ManifestError::UnknownGroup { row: row_no, value: field(3).to_string() })?;
        let split = field(4)
            .parse()
            .map_err(|_| ManifestError::UnknownSplit { row: row_no, value: field(4).to_string() })?;
        let image_ref = field(1)
            .parse()
            .map_err(|reason| ManifestError::BadRow { row: row_no, reason })?;
        let record = SubjectRecord::new(field(0), image_ref, age, group, split).map_err(|e| ManifestError::BadRow {
            row: row_no,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    DatasetManifest::new(records)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })?;
    let mut manifest = parse_manifest(&text)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "subject_id,image_ref,age_years,group,split\n";

    #[test]
    fn maps_row_fields() {
        let m = parse_manifest(&format!("{HEADER}s001,vol1.npz,71.5,CN,train\n")).unwrap();
        let r = &m.records[0];
        assert_eq!(r.subject_id, "s001");
        assert_eq!(r.image_ref, ImageRef::Path("vol1.npz".into()));
        assert_eq!(r.age_years, 71.5);
        assert_eq!(r.group, DiagnosisGroup::CN);
        assert_eq!(r.split, Split::Train);
    }

    #[test]
    fn rejects_unknown_group_with_row() {
        let err = parse_manifest(&format!("{HEADER}a,x,70,CN,train\nb,y,71,HC,val\n")).unwrap_err();
        assert!(matches!(err, ManifestError::UnknownGroup { row: 2, .. }));
        assert_eq!(err.to_string(), "unknown group 'HC' at row 2");
    }

    #[test]
    fn rejects_duplicate_ids_naming_both_rows() {
        let err = parse_manifest(&format!("{HEADER}s001,x,70,CN,train\ns002,y,71,CN,val\ns001,z,72,AD,test\n"))
            .unwrap_err();
        match err {
            ManifestError::DuplicateId { id, first, second } => {
                assert_eq!((id.as_str(), first, second), ("s001", 1, 3));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn other_row_errors() {
        assert!(matches!(
            parse_manifest("subject_id,image_ref,age_years,group\n").unwrap_err(),
            ManifestError::MissingColumn("split")
        ));
        assert!(matches!(
            parse_manifest(&format!("{HEADER}a,x,old,CN,train\n")).unwrap_err(),
            ManifestError::BadAge { row: 1, .. }
        ));
        assert!(matches!(
            parse_manifest(&format!("{HEADER}a,x,70,CN,holdout\n")).unwrap_err(),
            ManifestError::UnknownSplit { row: 1, .. }
        ));
        assert!(matches!(
            parse_manifest(&format!("{HEADER}a,x,140,CN,train\n")).unwrap_err(),
            ManifestError::BadRow { row: 1, .. }
        ));
        assert!(matches!(
            parse_manifest(&format!("{HEADER}a,synth:abc,70,CN,train\n")).unwrap_err(),
            ManifestError::BadRow { row: 1, .. }
        ));
    }

    #[test]
    fn synthetic_refs_parse() {
        let m = parse_manifest(&format!("{HEADER}a,synth:42,70,MCI,test\n")).unwrap();
        assert_eq!(m.records[0].image_ref, ImageRef::Synth(42));
        assert!(m.to_csv_string().contains("a,synth:42,70,MCI,test"));
    }

    fn sample() -> DatasetManifest {
        let rows = [
            ("a", DiagnosisGroup::CN, Split::Train),
            ("b", DiagnosisGroup::MCI, Split::Train),
            ("c", DiagnosisGroup::CN, Split::Train),
            ("d", DiagnosisGroup::AD, Split::Val),
            ("e", DiagnosisGroup::MCI, Split::Train),
            ("f", DiagnosisGroup::CN, Split::Val),
            ("g", DiagnosisGroup::CN, Split::Train),
            ("h", DiagnosisGroup::AD, Split::Val),
        ];
        DatasetManifest::new(
            rows.iter()
                .map(|&(id, g, s)| SubjectRecord::new(id, ImageRef::Synth(1), 70.0, g, s).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn filter_examples() {
        let m = sample();
        assert_eq!(m.filter_split(Split::Train, Some(DiagnosisGroup::CN)).len(), 3);
        assert!(m.filter_split(Split::Test, None).is_empty());
        let ids: Vec<_> = m
            .filter_split(Split::Val, Some(DiagnosisGroup::AD))
            .records
            .into_iter()
            .map(|r| r.subject_id)
            .collect();
        assert_eq!(ids, ["d", "h"]);
    }

    fn arb_record(i: usize) -> impl Strategy<Value = SubjectRecord> {
        (0.01f64..129.99, 0usize..3, 0usize..3, any::<bool>(), any::<u32>()).prop_map(move |(age, g, s, synth, seed)| {
            let image_ref =
                if synth { ImageRef::Synth(seed as u64) } else { ImageRef::Path(format!("vols/s{seed}.vol").into()) };
            SubjectRecord::new(format!("sub-{i}"), image_ref, age, DiagnosisGroup::ALL[g], Split::ALL[s]).unwrap()
        })
    }

    fn arb_manifest() -> impl Strategy<Value = DatasetManifest> {
        (0usize..12)
            .prop_flat_map(|n| (0..n).map(arb_record).collect::<Vec<_>>())
            .prop_map(|records| DatasetManifest::new(records).unwrap())
    }

    proptest! {
        #[test]
        fn csv_round_trip_preserves_records(m in arb_manifest()) {
            let back = parse_manifest(&m.to_csv_string()).unwrap();
            prop_assert_eq!(back.records, m.records);
        }

        #[test]
        fn filters_commute_and_are_idempotent(m in arb_manifest(), s in 0usize..3, g in 0usize..3) {
            let (split, group) = (Split::ALL[s], DiagnosisGroup::ALL[g]);
            let once = m.filter_split(split, Some(group));
            prop_assert_eq!(&once.filter_split(split, Some(group)), &once);
            prop_assert_eq!(&m.filter_group(group).filter_split(split, None), &once);
        }
    }
}
