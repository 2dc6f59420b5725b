//! The experiment protocol driven from a JSON config: synthesize data,
//! pre-train, train with early stopping and retraining, predict, report.
//!
//! Output layout under `<output_dir>/<name>/`:
//!
//! ```text
//! pretrain/seed-<s>/            backbone checkpoint
//! train/seed-<s>/early/         best-epoch age model
//! train/seed-<s>/history.jsonl
//! train/seed-<s>/final/         age model retrained on train + val
//! train/seed-<s>/final_history.jsonl
//! predictions/seed-<s>.csv      plus .meta.json sidecar
//! report.csv, report.txt
//! runs.jsonl                    one RunRecord per completed stage
//! ```

mod commands;
mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use commands::{
    cmd_predict, cmd_pretrain, cmd_report, cmd_synth, cmd_train, PredictFailure, PredictMeta, PredictSummary,
    SeedStop, SynthSummary, TrainSummary,
};
pub use config::{output_dir_from_env, ExperimentConfig, Paths, PretrainSection, SynthSection, DEFAULT_SEEDS, OUT_DIR_ENV};

use crate::evalstats::StatsError;
use crate::manifest::ManifestError;
use crate::models::ModelError;
use crate::synth::SynthError;
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error("leakage guard: {0}")]
    Leakage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("empty cohort")]
    EmptyCohort,
    #[error("pretraining not enabled")]
    PretrainDisabled,
    #[error("no pretrained backbone for seed {seed} at {path}; run pretrain first")]
    MissingPretrain { seed: u64, path: PathBuf },
    #[error("{0}")]
    Manifest(#[from] ManifestError),
    #[error("{0}")]
    Synth(#[from] SynthError),
    #[error("seed {seed}: {source}")]
    Train { seed: u64, source: TrainError },
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Stats(#[from] StatsError),
    #[error("run {run}: {source}")]
    Run { run: String, source: StatsError },
}

impl ExperimentError {
    /// 2 for configuration and validation problems, 4 when training
    /// aborts. Partial prediction failure (3) is not an error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Train { source, .. } => match source {
                TrainError::Config(_) | TrainError::Empty(_) | TrainError::NonCn { .. } | TrainError::TestLeak { .. } => 2,
                _ => 4,
            },
            _ => 2,
        }
    }
}

pub const EXIT_PARTIAL: i32 = 3;

/// Per-invocation switches shared by the commands.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Redo stages whose outputs already exist, overwrite generated data.
    pub force: bool,
    /// Replaces the config's seed list for this invocation.
    pub seeds: Option<Vec<u64>>,
    /// Output root replacing `paths.output_dir`.
    pub out_dir: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl RunOptions {
    fn seeds<'a>(&'a self, cfg: &'a ExperimentConfig) -> Result<&'a [u64], ExperimentError> {
        match &self.seeds {
            Some(s) => {
                let mut probe = cfg.clone();
                probe.seeds = s.clone();
                probe.validate()?;
                Ok(s)
            }
            None => Ok(&cfg.seeds),
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Train,
    FinalTrain,
    Predict,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::FinalTrain => "final_train",
            Stage::Predict => "predict",
            Stage::Report => "report",
        }
    }
}

/// One line of `runs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub stage: Stage,
    pub checkpoint: Option<PathBuf>,
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub started_at: String,
    pub finished_at: String,
}

/// Paths inside one experiment's output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Self {
        Self { root: cfg.run_dir(out_dir) }
    }

    pub fn pretrain(&self, seed: u64) -> PathBuf {
        self.root.join("pretrain").join(format!("seed-{seed}"))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join("train").join(format!("seed-{seed}"))
    }

    pub fn early(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("early")
    }

    pub fn history(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("history.jsonl")
    }

    pub fn final_model(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("final")
    }

    pub fn final_history(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("final_history.jsonl")
    }

    pub fn predictions(&self, seed: u64) -> PathBuf {
        self.root.join("predictions").join(format!("seed-{seed}.csv"))
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs.jsonl")
    }

    fn append_run(&self, record: &RunRecord) -> Result<(), ExperimentError> {
        let path = self.runs();
        let io = |source| ExperimentError::Io { path: path.clone(), source };
        create_dir(&self.root)?;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        let line = serde_json::to_string(record).expect("run record serializes");
        writeln!(f, "{line}").map_err(io)
    }
}

/// Sidecar written next to a predictions CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub(crate) fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn create_dir(dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })
}

fn write_file(path: &Path, text: &str) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests;
