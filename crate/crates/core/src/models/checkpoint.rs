use std::collections::HashMap;
use std::path::{Path, PathBuf};

use brainage_nn::{load_state_dict, state_dict, StateDict};
use serde::{Deserialize, Serialize};

use super::{assemble_age_model, build_backbone, AgeModel, Arch, Backbone, BackboneSpec, BackboneWeights, ModelError};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone,
    AgeModel,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub arch: Arch,
    pub in_channels: usize,
    pub stage_channel_plan: Vec<usize>,
    /// Slice size the age head was built for; `None` for bare backbones.
    pub input_hw: Option<[usize; 2]>,
    pub init_lineage: Vec<String>,
    pub trained_epochs: usize,
    pub seed: u64,
    pub created_at: String,
}

/// A directory holding `weights.safetensors` and `meta.json`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: StateDict,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::Checkpoint { path: dir.to_path_buf(), reason };
        std::fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
        let mut st_meta = HashMap::new();
        st_meta.insert("arch".to_string(), self.meta.arch.to_string());
        brainage_nn::save_safetensors(&dir.join(WEIGHTS_FILE), &self.weights, Some(st_meta))
            .map_err(|e| fail(e.to_string()))?;
        let text = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        std::fs::write(dir.join(META_FILE), text + "\n").map_err(|e| fail(e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let fail = |reason: String| ModelError::Checkpoint { path: dir.to_path_buf(), reason };
        let text = std::fs::read_to_string(dir.join(META_FILE)).map_err(|e| fail(format!("{META_FILE}: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| fail(format!("{META_FILE}: {e}")))?;
        let weights = brainage_nn::load_safetensors(&dir.join(WEIGHTS_FILE)).map_err(|e| fail(format!("{WEIGHTS_FILE}: {e}")))?;
        Ok(Self { meta, weights })
    }

    /// The encoder part, whichever kind of model was saved.
    pub fn backbone_weights(&self) -> Result<BackboneWeights, ModelError> {
        let state = match self.meta.kind {
            CheckpointKind::Backbone => self.weights.clone(),
            CheckpointKind::AgeModel => self
                .weights
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("backbone.").map(|k| (k.to_string(), v.clone())))
                .collect(),
        };
        Ok(BackboneWeights {
            arch: self.meta.arch,
            in_channels: self.meta.in_channels,
            stage_channel_plan: self.meta.stage_channel_plan.clone(),
            lineage: self.meta.init_lineage.clone(),
            state,
        })
    }

    /// Package transplanted encoder weights.
    pub fn from_backbone(w: &BackboneWeights, seed: u64, trained_epochs: usize) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: CheckpointKind::Backbone,
                arch: w.arch,
                in_channels: w.in_channels,
                stage_channel_plan: w.stage_channel_plan.clone(),
                input_hw: None,
                init_lineage: w.lineage.clone(),
                trained_epochs,
                seed,
                created_at: now(),
            },
            weights: w.state.clone(),
        }
    }

    pub fn from_age_model(model: &mut AgeModel) -> Self {
        let b = model.backbone();
        let meta = CheckpointMeta {
            kind: CheckpointKind::AgeModel,
            arch: b.spec().arch,
            in_channels: b.spec().in_channels,
            stage_channel_plan: b.spec().stage_channel_plan.clone(),
            input_hw: Some([model.input_hw().0, model.input_hw().1]),
            init_lineage: b.lineage().to_vec(),
            trained_epochs: model.trained_epochs(),
            seed: b.seed(),
            created_at: now(),
        };
        Self { meta, weights: state_dict(model) }
    }

    /// Rebuild the age model this checkpoint was saved from.
    pub fn to_age_model(&self, path: &Path) -> Result<AgeModel, ModelError> {
        let fail = |reason: &str| ModelError::Checkpoint { path: PathBuf::from(path), reason: reason.to_string() };
        if self.meta.kind != CheckpointKind::AgeModel {
            return Err(fail("not an age model checkpoint"));
        }
        let [h, w] = self.meta.input_hw.ok_or_else(|| fail("age model checkpoint lacks input_hw"))?;
        let spec = BackboneSpec {
            arch: self.meta.arch,
            in_channels: self.meta.in_channels,
            init: super::Init::Random,
            checkpoint_ref: None,
            stage_channel_plan: self.meta.stage_channel_plan.clone(),
        };
        let mut backbone: Backbone = build_backbone(&spec, self.meta.seed)?;
        for step in &self.meta.init_lineage {
            backbone.push_lineage(step);
        }
        let mut model = assemble_age_model(backbone, (h, w), None)?;
        load_state_dict(&mut model, &self.weights, true)
            .map_err(|e| ModelError::from_load(format!("checkpoint {}", path.display()), e))?;
        model.set_trained_epochs(self.meta.trained_epochs);
        Ok(model)
    }
}
