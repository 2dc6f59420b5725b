//! Evaluation: MAE, Dice, brain-age delta, one-sided Mann-Whitney U tests
//! and multi-run aggregation into report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Dimension;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::manifest::DiagnosisGroup;

/// Largest sample size for which p-values are enumerated exactly.
pub const EXACT_THRESHOLD: usize = 8;

pub const PREDICTIONS_HEADER: [&str; 5] = ["subject_id", "group", "chronological_age", "predicted_age", "delta"];
pub const REPORT_HEADER: [&str; 12] = [
    "backbone",
    "pretraining",
    "split",
    "mae_mean",
    "mae_std",
    "p_cn_mci_mean",
    "p_cn_mci_max",
    "p_cn_ad_mean",
    "p_cn_ad_max",
    "p_mci_ad_mean",
    "p_mci_ad_max",
    "n_runs",
];

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("unsupported alternative '{0}': only a_greater is implemented")]
    Alternative(String),
    #[error("group {0} absent")]
    MissingGroup(DiagnosisGroup),
    #[error("inconsistent runs: {0}")]
    Inconsistent(String),
    #[error("{path}: {reason}")]
    Csv { path: PathBuf, reason: String },
}

/// Mean absolute error over `(predicted, target)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::Empty("pair list"));
    }
    Ok(pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / pairs.len() as f64)
}

/// `2|P∩T| / (|P|+|T|)`; two empty masks score 1.
pub fn dice<D: Dimension>(pred: &ndarray::Array<bool, D>, truth: &ndarray::Array<bool, D>) -> Result<f64, StatsError> {
    if pred.shape() != truth.shape() {
        return Err(StatsError::ShapeMismatch(pred.shape().to_vec(), truth.shape().to_vec()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        inter += usize::from(p && t);
        total += usize::from(p) + usize::from(t);
    }
    Ok(dice_from_counts(inter, total))
}

/// Dice from the intersection size and the summed mask sizes.
pub fn dice_from_counts(intersection: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Sample a is stochastically greater than sample b.
    AGreater,
}

impl FromStr for Alternative {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, StatsError> {
        match s {
            "a_greater" | "greater" => Ok(Alternative::AGreater),
            other => Err(StatsError::Alternative(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MwuResult {
    pub u_statistic: f64,
    pub p_value: f64,
    pub method: MwuMethod,
    pub n_a: usize,
    pub n_b: usize,
    pub tie_correction_applied: bool,
}

/// `#{a > b} + ½·#{a = b}` over all cross pairs.
pub fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &x in a {
        for &y in b {
            twice += if x > y { 2 } else if x == y { 1 } else { 0 };
        }
    }
    twice as f64 / 2.0
}

/// One-sided Mann-Whitney U test with the default exact threshold.
pub fn mwu(a: &[f64], b: &[f64], alternative: Alternative) -> Result<MwuResult, StatsError> {
    mwu_with_threshold(a, b, alternative, EXACT_THRESHOLD)
}

pub fn mwu_with_threshold(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
    exact_threshold: usize,
) -> Result<MwuResult, StatsError> {
    let Alternative::AGreater = alternative;
    if a.is_empty() {
        return Err(StatsError::Empty("sample a"));
    }
    if b.is_empty() {
        return Err(StatsError::Empty("sample b"));
    }
    let (na, nb) = (a.len(), b.len());
    let u = u_statistic(a, b);
    let (twice_ranks, ties) = doubled_midranks(a, b);
    if na.max(nb) <= exact_threshold {
        let p = exact_upper_tail(&twice_ranks, na, u);
        return Ok(MwuResult { u_statistic: u, p_value: p, method: MwuMethod::Exact, n_a: na, n_b: nb, tie_correction_applied: false });
    }
    let n = (na + nb) as f64;
    let tie_sum: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_sum / (n * (n - 1.0)));
    let mean = (na * nb) as f64 / 2.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (u - mean - 0.5) / var.sqrt();
        Normal::standard().sf(z)
    };
    Ok(MwuResult {
        u_statistic: u,
        p_value: p.clamp(0.0, 1.0),
        method: MwuMethod::NormalApprox,
        n_a: na,
        n_b: nb,
        tie_correction_applied: ties.iter().any(|&t| t > 1),
    })
}

/// Twice the midrank of every pooled value (a first, then b) and the tie
/// group sizes.
fn doubled_midranks(a: &[f64], b: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let mut pooled: Vec<(f64, usize)> = a.iter().chain(b).copied().zip(0..).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1, midrank doubled
        let twice = (i + 1 + j + 1) as u64;
        for item in &pooled[i..=j] {
            ranks[item.1] = twice;
        }
        ties.push((j - i + 1) as u64);
        i = j + 1;
    }
    (ranks, ties)
}

/// P(U ≥ u) when `na` of the pooled doubled ranks are assigned to sample a
/// uniformly at random; counts subsets by their rank sum.
fn exact_upper_tail(twice_ranks: &[u64], na: usize, u: f64) -> f64 {
    let total: u64 = twice_ranks.iter().sum();
    let max = total as usize;
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0f64; max + 1]; na + 1];
    ways[0][0] = 1.0;
    for &r in twice_ranks {
        let r = r as usize;
        for k in (1..=na).rev() {
            for s in (r..=max).rev() {
                let add = ways[k - 1][s - r];
                if add != 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    // 2U = 2R_a − na(na+1)
    let offset = (na * (na + 1)) as f64;
    let threshold = 2.0 * u + offset;
    let all: f64 = ways[na].iter().sum();
    let hit: f64 = ways[na].iter().enumerate().filter(|(s, _)| *s as f64 >= threshold - 1e-9).map(|(_, w)| w).sum();
    hit / all
}

/// One subject's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub subject_id: String,
    pub group: DiagnosisGroup,
    pub chronological_age: f64,
    pub predicted_age: f64,
    /// `predicted_age − chronological_age`.
    pub delta: f64,
}

impl PredictionRecord {
    pub fn new(subject_id: impl Into<String>, group: DiagnosisGroup, chronological_age: f64, predicted_age: f64) -> Self {
        Self {
            subject_id: subject_id.into(),
            group,
            chronological_age,
            predicted_age,
            delta: predicted_age - chronological_age,
        }
    }
}

pub fn predictions_to_csv(records: &[PredictionRecord]) -> String {
    let mut out = PREDICTIONS_HEADER.join(",");
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.subject_id, r.group, r.chronological_age, r.predicted_age, r.delta);
    }
    out
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), StatsError> {
    std::fs::write(path, predictions_to_csv(records))
        .map_err(|e| StatsError::Csv { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, StatsError> {
    let fail = |reason: String| StatsError::Csv { path: path.to_path_buf(), reason };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| fail(e.to_string()))?;
    let headers = reader.headers().map_err(|e| fail(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != PREDICTIONS_HEADER {
        return Err(fail(format!("expected header {}", PREDICTIONS_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| fail(e.to_string()))?;
        let num = |j: usize| -> Result<f64, StatsError> {
            row[j].parse::<f64>().map_err(|_| fail(format!("row {}: bad {} '{}'", i + 1, PREDICTIONS_HEADER[j], &row[j])))
        };
        let group: DiagnosisGroup = row[1].parse().map_err(|e: String| fail(format!("row {}: {e}", i + 1)))?;
        let rec = PredictionRecord {
            subject_id: row[0].to_string(),
            group,
            chronological_age: num(2)?,
            predicted_age: num(3)?,
            delta: num(4)?,
        };
        if (rec.delta - (rec.predicted_age - rec.chronological_age)).abs() > 1e-9 {
            return Err(fail(format!("row {}: delta differs from predicted_age - chronological_age", i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// The three directional comparisons: the second group of each pair is
/// tested for a greater delta than the first.
pub const GROUP_PAIRS: [(DiagnosisGroup, DiagnosisGroup); 3] = [
    (DiagnosisGroup::CN, DiagnosisGroup::MCI),
    (DiagnosisGroup::CN, DiagnosisGroup::AD),
    (DiagnosisGroup::MCI, DiagnosisGroup::AD),
];

/// For each pair `(lo, hi)`, test whether `hi` has stochastically greater
/// deltas than `lo`.
pub fn pairwise_group_tests(
    records: &[PredictionRecord],
) -> Result<BTreeMap<(DiagnosisGroup, DiagnosisGroup), MwuResult>, StatsError> {
    let deltas = |g: DiagnosisGroup| -> Vec<f64> { records.iter().filter(|r| r.group == g).map(|r| r.delta).collect() };
    let by_group: BTreeMap<DiagnosisGroup, Vec<f64>> = DiagnosisGroup::ALL.iter().map(|&g| (g, deltas(g))).collect();
    for g in DiagnosisGroup::ALL {
        if by_group[&g].is_empty() {
            return Err(StatsError::MissingGroup(g));
        }
    }
    GROUP_PAIRS
        .iter()
        .map(|&(lo, hi)| Ok(((lo, hi), mwu(&by_group[&hi], &by_group[&lo], Alternative::AGreater)?)))
        .collect()
}

/// Summary of one quantity across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunAggregate, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty("run list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RunAggregate { values: values.to_vec(), mean, std: var.sqrt(), max })
}

/// Predictions of one trained model on one split.
#[derive(Clone, Debug)]
pub struct RunPredictions {
    pub backbone: String,
    pub pretraining: String,
    pub split: String,
    pub seed: u64,
    pub records: Vec<PredictionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub backbone: String,
    pub pretraining: String,
    pub split: String,
    /// MAE on the CN subjects of each run.
    pub mae: RunAggregate,
    /// Keyed like [`GROUP_PAIRS`].
    pub p_values: [RunAggregate; 3],
    pub n_runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Aggregate runs per `(backbone, pretraining)` configuration. Runs of one
/// configuration must share the split and subject set and have distinct
/// seeds.
pub fn evaluation_report(runs: &[RunPredictions]) -> Result<Report, StatsError> {
    if runs.is_empty() {
        return Err(StatsError::Empty("run list"));
    }
    let mut groups: BTreeMap<(String, String), Vec<&RunPredictions>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.backbone.clone(), r.pretraining.clone())).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((backbone, pretraining), members) in groups {
        let first = members[0];
        let first_ids = subject_ids(first);
        let mut seeds = Vec::new();
        for m in &members {
            if m.split != first.split {
                return Err(StatsError::Inconsistent(format!(
                    "{backbone}/{pretraining} mixes splits {} and {}",
                    first.split, m.split
                )));
            }
            if subject_ids(m) != first_ids {
                return Err(StatsError::Inconsistent(format!(
                    "{backbone}/{pretraining} runs cover different subjects (seeds {} and {})",
                    first.seed, m.seed
                )));
            }
            if seeds.contains(&m.seed) {
                return Err(StatsError::Inconsistent(format!("{backbone}/{pretraining} has seed {} twice", m.seed)));
            }
            seeds.push(m.seed);
        }
        let mut maes = Vec::new();
        let mut ps: [Vec<f64>; 3] = Default::default();
        for m in &members {
            let cn: Vec<(f64, f64)> = m
                .records
                .iter()
                .filter(|r| r.group == DiagnosisGroup::CN)
                .map(|r| (r.predicted_age, r.chronological_age))
                .collect();
            maes.push(mae(&cn).map_err(|_| StatsError::MissingGroup(DiagnosisGroup::CN))?);
            let tests = pairwise_group_tests(&m.records)?;
            for (k, pair) in GROUP_PAIRS.iter().enumerate() {
                ps[k].push(tests[pair].p_value);
            }
        }
        rows.push(ReportRow {
            backbone,
            pretraining,
            split: first.split.clone(),
            mae: aggregate_runs(&maes)?,
            p_values: [aggregate_runs(&ps[0])?, aggregate_runs(&ps[1])?, aggregate_runs(&ps[2])?],
            n_runs: members.len(),
        });
    }
    Ok(Report { rows })
}

fn subject_ids(r: &RunPredictions) -> Vec<&str> {
    let mut v: Vec<&str> = r.records.iter().map(|x| x.subject_id.as_str()).collect();
    v.sort_unstable();
    v
}

impl Report {
    /// Full-precision CSV.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{}", r.backbone, r.pretraining, r.split, r.mae.mean, r.mae.std);
            for p in &r.p_values {
                let _ = write!(out, ",{},{}", p.mean, p.max);
            }
            let _ = writeln!(out, ",{}", r.n_runs);
        }
        out
    }

    /// Aligned text table: MAE as `mean (σ=std)`, p-values as
    /// `mean (max)` to three decimals.
    pub fn to_text(&self) -> String {
        let header: Vec<String> = ["backbone", "pretraining", "split", "MAE", "p(CN<MCI)", "p(CN<AD)", "p(MCI<AD)", "runs"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut table = vec![header];
        for r in &self.rows {
            let mut row = vec![
                r.backbone.clone(),
                r.pretraining.clone(),
                r.split.clone(),
                format!("{:.3} (σ={:.3})", r.mae.mean, r.mae.std),
            ];
            row.extend(r.p_values.iter().map(|p| format!("{:.3} ({:.3})", p.mean, p.max)));
            row.push(r.n_runs.to_string());
            table.push(row);
        }
        let cols = table[0].len();
        let widths: Vec<usize> =
            (0..cols).map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
                out.push('\n');
            }
        }
        out.push_str("MAE on CN subjects, mean (σ) over runs; p-values one-sided MWU, mean (max) over runs.\n");
        out.push_str("σ is the population standard deviation.\n");
        out
    }
}
