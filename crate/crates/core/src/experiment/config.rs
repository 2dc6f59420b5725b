use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::models::{BackboneSpec, Init};
use crate::preprocess::BandRule;
use crate::synth::{CohortSpec, SynthConfig};
use crate::training::{AgeTrainConfig, SegTrainConfig};

/// Overrides `paths.output_dir` when set.
pub const OUT_DIR_ENV: &str = "BRAINAGE_OUT_DIR";

/// Five seeds, one model each.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// One experiment: a backbone configuration trained over several seeds.
/// Relative paths resolve against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub age_train: AgeTrainConfig,
    /// Band rule profile name (`synth` or `template`).
    #[serde(default = "synth_profile")]
    pub band_rule: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub paths: Paths,
    /// What `synth` generates. Only that command reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    /// SHA-256 of the config file text.
    #[serde(skip)]
    pub hash: String,
}

fn synth_profile() -> String {
    "synth".into()
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default)]
    pub enabled: bool,
    /// Defaults to [`SegTrainConfig::default`] when pretraining is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_config: Option<SegTrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub output_dir: PathBuf,
}

/// Synthetic cohort written by the `synth` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(default)]
    pub config: SynthConfig,
    pub cohort: CohortSpec,
    /// Subjects for the segmentation pre-training manifest, drawn from a
    /// separate stream (seed + 1) so they never coincide with the cohort.
    #[serde(default)]
    pub pretrain_subjects: usize,
    /// Where volumes go; defaults to the train manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    /// Parse and validate without touching paths.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("config: {e}")))?;
        cfg.hash = format!("{:x}", Sha256::digest(text.as_bytes()));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.train_manifest);
        fix(&mut self.paths.val_manifest);
        fix(&mut self.paths.test_manifest);
        fix(&mut self.paths.output_dir);
        if let Some(p) = &mut self.pretrain.data_manifest {
            fix(p);
        }
        if let Some(p) = &mut self.backbone.checkpoint_ref {
            fix(p);
        }
        if let Some(p) = self.synth.as_mut().and_then(|s| s.data_dir.as_mut()) {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name '{}' must be a plain directory name", self.name));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("seed {s} listed twice"));
        }
        self.band()?;
        self.age_train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let p = &self.pretrain;
        if p.enabled {
            if p.data_manifest.is_none() {
                return bad("pretrain.enabled requires pretrain.data_manifest".into());
            }
            if let Some(seg) = &p.seg_config {
                seg.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
            }
            if self.backbone.init == Init::Checkpoint {
                return bad("pretraining starts from random or imagenet weights, not a checkpoint".into());
            }
        } else if p.seg_config.is_some() || p.data_manifest.is_some() {
            return bad("pretrain.seg_config and pretrain.data_manifest must be absent when pretraining is disabled".into());
        }
        let test = &self.paths.test_manifest;
        for (what, path) in [("train", &self.paths.train_manifest), ("val", &self.paths.val_manifest)]
            .into_iter()
            .chain(p.data_manifest.as_ref().map(|d| ("pretrain", d)))
        {
            if path == test {
                return Err(ExperimentError::Leakage(format!("{what} manifest is the test manifest {}", test.display())));
            }
        }
        if let Some(s) = &self.synth {
            s.config.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
            s.cohort.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn band(&self) -> Result<BandRule, ExperimentError> {
        BandRule::profile(&self.band_rule).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn seg_config(&self) -> SegTrainConfig {
        self.pretrain.seg_config.clone().unwrap_or_default()
    }

    /// `paths.output_dir`, or `override_dir` when given, plus the experiment
    /// name.
    pub fn run_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        override_dir.unwrap_or(&self.paths.output_dir).join(&self.name)
    }
}

/// The output directory override from [`OUT_DIR_ENV`], if set and nonempty.
pub fn output_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}
