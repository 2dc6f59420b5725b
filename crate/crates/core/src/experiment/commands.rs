use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{create_dir, now, sidecar_path, write_file, ExperimentConfig, ExperimentError, Layout, RunOptions, RunRecord, Stage};
use crate::data::SliceLoader;
use crate::evalstats::{
    evaluation_report, pairwise_group_tests, read_predictions, write_predictions, PredictionRecord, Report, RunPredictions,
};
use crate::manifest::{load_manifest, DatasetManifest, DiagnosisGroup, ImageRef, Split};
use crate::models::{
    assemble_age_model, assemble_seg_model, build_backbone, predict_volume_age, Backbone, Checkpoint, HasBackbone, Init,
    META_FILE,
};
use crate::synth::{generate_cohort, CohortCount, CohortSpec, SynthConfig};
use crate::training::{retrain_budget, train_age_observed, train_final_observed, train_seg_observed, TrainError, TrainHistory, SEG_PRETRAIN};

/// Lineage entries for the two age-training stages.
const TRAIN_STEP: &str = "train";
const FINAL_STEP: &str = "final_train";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub pretrain: usize,
}

/// Generate the configured synthetic cohort and write the train, val, test
/// and (when pretraining is enabled) pretraining manifests.
pub fn cmd_synth(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SynthSummary, ExperimentError> {
    let section = cfg.synth.as_ref().ok_or_else(|| ExperimentError::Config("config has no synth section".into()))?;
    if section.cohort.total() == 0 && section.pretrain_subjects == 0 {
        return Err(ExperimentError::EmptyCohort);
    }
    let paths = &cfg.paths;
    let data_dir = match &section.data_dir {
        Some(d) => d.clone(),
        None => paths.train_manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let pretrain_manifest = cfg.pretrain.data_manifest.as_ref().filter(|_| section.pretrain_subjects > 0);
    let pretrain_dir = data_dir.join("pretrain");
    let mut targets = vec![&paths.train_manifest, &paths.val_manifest, &paths.test_manifest];
    targets.extend(pretrain_manifest);
    let volumes = [data_dir.join("volumes"), pretrain_dir.join("volumes")];
    let occupied = targets.iter().map(|p| p.as_path()).chain(volumes.iter().map(PathBuf::as_path)).find(|p| nonempty(p));
    if let Some(p) = occupied {
        if !opts.force {
            return Err(ExperimentError::Exists(p.to_path_buf()));
        }
        for v in &volumes {
            if v.exists() {
                std::fs::remove_dir_all(v).map_err(|source| ExperimentError::Io { path: v.clone(), source })?;
            }
        }
    }

    opts.log(format!("synth: {} subjects into {}", section.cohort.total(), data_dir.display()));
    let cohort = generate_cohort(&section.config, &section.cohort, &data_dir)?;
    let mut summary = SynthSummary { train: 0, val: 0, test: 0, pretrain: 0 };
    for (split, path, count) in [
        (Split::Train, &paths.train_manifest, &mut summary.train),
        (Split::Val, &paths.val_manifest, &mut summary.val),
        (Split::Test, &paths.test_manifest, &mut summary.test),
    ] {
        let part = cohort.filter_split(split, None);
        *count = part.len();
        write_manifest(&part, path)?;
    }
    if let Some(path) = pretrain_manifest {
        let synth = SynthConfig { seed: section.config.seed.wrapping_add(1), ..section.config.clone() };
        let spec = CohortSpec {
            counts: vec![CohortCount { split: Split::Train, group: DiagnosisGroup::CN, count: section.pretrain_subjects }],
            group_offsets: Default::default(),
        };
        opts.log(format!("synth: {} pretraining subjects into {}", section.pretrain_subjects, pretrain_dir.display()));
        let m = generate_cohort(&synth, &spec, &pretrain_dir)?;
        summary.pretrain = m.len();
        write_manifest(&m, path)?;
    }
    Ok(summary)
}

fn nonempty(path: &Path) -> bool {
    if path.is_dir() {
        std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
    } else {
        path.exists()
    }
}

/// Write `m` to `path` with image paths made relative to the manifest's
/// own directory where possible, absolute otherwise.
fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), ExperimentError> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    create_dir(&dir)?;
    let mut out = absolutize(m)?;
    let dir = std::path::absolute(&dir).map_err(|source| ExperimentError::Io { path: dir.clone(), source })?;
    for r in &mut out.records {
        if let ImageRef::Path(p) = &mut r.image_ref {
            if let Ok(rel) = p.strip_prefix(&dir) {
                *p = rel.to_path_buf();
            }
        }
    }
    out.write(path)?;
    Ok(())
}

/// Same records with every image path absolute, so manifests from
/// different directories can be combined.
fn absolutize(m: &DatasetManifest) -> Result<DatasetManifest, ExperimentError> {
    let mut out = m.clone();
    for r in &mut out.records {
        if let ImageRef::Path(p) = &mut r.image_ref {
            let full = m.resolve(p);
            *p = std::path::absolute(&full).map_err(|source| ExperimentError::Io { path: full, source })?;
        }
    }
    Ok(out)
}

fn stage_done(dir: &Path) -> bool {
    dir.join(META_FILE).is_file()
}

fn train_err(seed: u64) -> impl Fn(TrainError) -> ExperimentError {
    move |source| ExperimentError::Train { seed, source }
}

/// Segmentation pre-training, one backbone checkpoint per seed.
pub fn cmd_pretrain(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>, ExperimentError> {
    if !cfg.pretrain.enabled {
        return Err(ExperimentError::PretrainDisabled);
    }
    let seeds = opts.seeds(cfg)?;
    let layout = Layout::new(cfg, opts.out_dir.as_deref());
    let data = load_manifest(cfg.pretrain.data_manifest.as_ref().expect("validated"))?;
    let mut loader = SliceLoader::new(cfg.band()?);
    let mut out = Vec::new();
    for &seed in seeds {
        let dir = layout.pretrain(seed);
        if stage_done(&dir) && !opts.force {
            opts.log(format!("pretrain seed {seed}: {} exists, reusing", dir.display()));
            out.push(dir);
            continue;
        }
        let started = now();
        let seg_cfg = crate::training::SegTrainConfig { seed, ..cfg.seg_config() };
        let backbone = build_backbone(&cfg.backbone, seed)?;
        let mut model = assemble_seg_model(backbone, 1)?;
        let hist = train_seg_observed(&mut model, &data, None, &seg_cfg, &mut loader, &mut |r| {
            opts.log(format!(
                "pretrain seed {seed} epoch {}/{}: loss {:.4} dice {:.4}",
                r.epoch, seg_cfg.epochs, r.train_loss, r.train_dice
            ))
        })
        .map_err(train_err(seed))?;
        let mut backbone = model.into_backbone();
        backbone.push_lineage(SEG_PRETRAIN);
        let weights = backbone.weights();
        Checkpoint::from_backbone(&weights, seed, seg_cfg.epochs).save(&dir)?;
        let last = hist.last().expect("at least one epoch");
        let mut metrics = Map::new();
        metrics.insert("epochs".into(), json!(seg_cfg.epochs));
        metrics.insert("train_loss".into(), json!(last.train_loss));
        metrics.insert("train_dice".into(), json!(last.train_dice));
        layout.append_run(&RunRecord {
            config_hash: cfg.hash.clone(),
            seed: Some(seed),
            stage: Stage::Pretrain,
            checkpoint: Some(dir.clone()),
            metrics,
            started_at: started,
            finished_at: now(),
        })?;
        out.push(dir);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedStop {
    pub seed: u64,
    pub stopped_epoch: usize,
    pub best_val_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub early: Vec<SeedStop>,
    pub budget: usize,
    pub finals: Vec<PathBuf>,
}

/// The backbone a seed starts age training from.
fn initial_backbone(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<Backbone, ExperimentError> {
    if cfg.pretrain.enabled {
        let dir = layout.pretrain(seed);
        if !stage_done(&dir) {
            return Err(ExperimentError::MissingPretrain { seed, path: dir });
        }
        let mut spec = cfg.backbone.clone();
        spec.init = Init::Checkpoint;
        spec.checkpoint_ref = Some(dir);
        Ok(build_backbone(&spec, seed)?)
    } else {
        Ok(build_backbone(&cfg.backbone, seed)?)
    }
}

fn mean_age(m: &DatasetManifest) -> Option<f64> {
    (!m.is_empty()).then(|| m.iter().map(|r| r.age_years).sum::<f64>() / m.len() as f64)
}

fn read_history(path: &Path) -> Result<TrainHistory, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    TrainHistory::from_jsonl(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

/// Early-stopped training for every seed, then retraining on train + val
/// for the averaged stopping epoch. The final stage starts only once every
/// seed has a stopping epoch.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainSummary, ExperimentError> {
    let seeds = opts.seeds(cfg)?;
    let layout = Layout::new(cfg, opts.out_dir.as_deref());
    let train = load_manifest(&cfg.paths.train_manifest)?;
    let val = load_manifest(&cfg.paths.val_manifest)?;
    let mut loader = SliceLoader::new(cfg.band()?);
    let in_channels = cfg.backbone.in_channels;
    let first = train.iter().next().ok_or(ExperimentError::Train { seed: seeds[0], source: TrainError::Empty("training") })?;
    let input_hw = loader.age_stack(&train, first, in_channels).map_err(|e| train_err(seeds[0])(e.into()))?.hw();

    let mut early = Vec::new();
    for &seed in seeds {
        let (dir, hist_path) = (layout.early(seed), layout.history(seed));
        let history = if stage_done(&dir) && hist_path.is_file() && !opts.force {
            opts.log(format!("train seed {seed}: {} exists, reusing", dir.display()));
            read_history(&hist_path)?
        } else {
            let started = now();
            let backbone = initial_backbone(cfg, &layout, seed)?;
            let mut model = assemble_age_model(backbone, input_hw, mean_age(&train))?;
            let age_cfg = crate::training::AgeTrainConfig { seed, ..cfg.age_train.clone() };
            let max = age_cfg.max_epochs;
            let history = train_age_observed(&mut model, &train, &val, &age_cfg, &mut loader, &mut |r| {
                opts.log(format!(
                    "train seed {seed} epoch {}/{max}: mse {:.4} val mae {:.4}",
                    r.epoch,
                    r.train_mse,
                    r.val_mae.unwrap_or(f64::NAN)
                ))
            })
            .map_err(train_err(seed))?;
            model.backbone_mut().push_lineage(TRAIN_STEP);
            model.set_trained_epochs(history.stopped_epoch);
            Checkpoint::from_age_model(&mut model).save(&dir)?;
            write_file(&hist_path, &history.to_jsonl())?;
            let mut metrics = Map::new();
            metrics.insert("stopped_epoch".into(), json!(history.stopped_epoch));
            metrics.insert("best_val_mae".into(), json!(best_mae(&history)));
            layout.append_run(&RunRecord {
                config_hash: cfg.hash.clone(),
                seed: Some(seed),
                stage: Stage::Train,
                checkpoint: Some(dir.clone()),
                metrics,
                started_at: started,
                finished_at: now(),
            })?;
            history
        };
        early.push(SeedStop { seed, stopped_epoch: history.stopped_epoch, best_val_mae: best_mae(&history) });
    }

    let stops: Vec<usize> = early.iter().map(|s| s.stopped_epoch).collect();
    let budget = retrain_budget(&stops).map_err(train_err(seeds[0]))?;
    opts.log(format!("stopping epochs {stops:?}: retraining for {budget} epochs"));
    let union = absolutize(&train)?.union(&absolutize(&val)?)?;
    let mut finals = Vec::new();
    for &seed in seeds {
        let (dir, hist_path) = (layout.final_model(seed), layout.final_history(seed));
        if stage_done(&dir) && !opts.force {
            let meta = Checkpoint::load(&dir)?.meta;
            if meta.trained_epochs == budget {
                opts.log(format!("final seed {seed}: {} exists, reusing", dir.display()));
                finals.push(dir);
                continue;
            }
        }
        let started = now();
        let backbone = initial_backbone(cfg, &layout, seed)?;
        let mut model = assemble_age_model(backbone, input_hw, mean_age(&union))?;
        let age_cfg = crate::training::AgeTrainConfig { seed, ..cfg.age_train.clone() };
        let history = train_final_observed(&mut model, &union, budget, &age_cfg, &mut loader, &mut |r| {
            opts.log(format!("final seed {seed} epoch {}/{budget}: mse {:.4}", r.epoch, r.train_mse))
        })
        .map_err(train_err(seed))?;
        model.backbone_mut().push_lineage(FINAL_STEP);
        model.set_trained_epochs(budget);
        Checkpoint::from_age_model(&mut model).save(&dir)?;
        write_file(&hist_path, &history.to_jsonl())?;
        let mut metrics = Map::new();
        metrics.insert("budget".into(), json!(budget));
        metrics.insert("train_mse".into(), json!(history.epochs.last().map(|e| e.train_mse)));
        layout.append_run(&RunRecord {
            config_hash: cfg.hash.clone(),
            seed: Some(seed),
            stage: Stage::FinalTrain,
            checkpoint: Some(dir.clone()),
            metrics,
            started_at: started,
            finished_at: now(),
        })?;
        finals.push(dir);
    }
    Ok(TrainSummary { early, budget, finals })
}

fn best_mae(h: &TrainHistory) -> f64 {
    h.epochs.get(h.stopped_epoch - 1).and_then(|e| e.val_mae).unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictFailure {
    pub subject_id: String,
    pub reason: String,
}

/// Contents of `<predictions>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictMeta {
    pub config: String,
    pub config_hash: String,
    pub backbone: String,
    pub pretraining: String,
    pub split: String,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub predicted: usize,
    pub failures: Vec<PredictFailure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictSummary {
    pub out: PathBuf,
    pub meta: PredictMeta,
}

impl PredictSummary {
    pub fn partial(&self) -> bool {
        !self.meta.failures.is_empty()
    }
}

/// Pre-training steps in a lineage, `none` when there were none.
fn pretraining_label(lineage: &[String]) -> String {
    let steps: Vec<&str> =
        lineage.iter().map(String::as_str).filter(|s| *s != TRAIN_STEP && *s != FINAL_STEP).collect();
    if steps.is_empty() {
        "none".into()
    } else {
        steps.join("+")
    }
}

fn split_label(m: &DatasetManifest) -> String {
    let present: Vec<&str> =
        Split::ALL.iter().filter(|s| m.iter().any(|r| r.split == **s)).map(|s| s.as_str()).collect();
    present.join("+")
}

/// Predict every record of `manifest` (default: the test manifest) with
/// `checkpoint`, or with every seed's final model when no checkpoint is
/// given. Volumes that fail are skipped and listed in the sidecar.
pub fn cmd_predict(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    out: Option<&Path>,
    opts: &RunOptions,
) -> Result<Vec<PredictSummary>, ExperimentError> {
    let layout = Layout::new(cfg, opts.out_dir.as_deref());
    let manifest_path = manifest.unwrap_or(&cfg.paths.test_manifest).to_path_buf();
    let records = load_manifest(&manifest_path)?;
    let jobs: Vec<(PathBuf, Option<PathBuf>)> = match checkpoint {
        Some(c) => vec![(c.to_path_buf(), out.map(Path::to_path_buf))],
        None => {
            if out.is_some() {
                return Err(ExperimentError::Config("--out needs --checkpoint; without it each seed gets its own file".into()));
            }
            opts.seeds(cfg)?.iter().map(|&s| (layout.final_model(s), Some(layout.predictions(s)))).collect()
        }
    };
    let mut loader = SliceLoader::new(cfg.band()?);
    let mut summaries = Vec::new();
    for (ckpt_dir, out) in jobs {
        let started = now();
        let ckpt = Checkpoint::load(&ckpt_dir)?;
        let mut model = ckpt.to_age_model(&ckpt_dir)?;
        let out = out.unwrap_or_else(|| layout.predictions(ckpt.meta.seed));
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        for r in records.iter() {
            let predicted = loader
                .age_stack(&records, r, model.in_channels())
                .map_err(|e| e.to_string())
                .and_then(|stack| predict_volume_age(&mut model, &stack).map_err(|e| e.to_string()));
            match predicted {
                Ok(age) => rows.push(PredictionRecord::new(r.subject_id.clone(), r.group, r.age_years, age)),
                Err(reason) => {
                    opts.log(format!("predict {}: {reason}", r.subject_id));
                    failures.push(PredictFailure { subject_id: r.subject_id.clone(), reason });
                }
            }
        }
        if let Some(parent) = out.parent() {
            create_dir(parent)?;
        }
        write_predictions(&out, &rows)?;
        let meta = PredictMeta {
            config: cfg.name.clone(),
            config_hash: cfg.hash.clone(),
            backbone: ckpt.meta.arch.to_string(),
            pretraining: pretraining_label(&ckpt.meta.init_lineage),
            split: split_label(&records),
            seed: ckpt.meta.seed,
            checkpoint: ckpt_dir.clone(),
            manifest: manifest_path.clone(),
            predicted: rows.len(),
            failures,
        };
        write_file(&sidecar_path(&out), &(serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n"))?;
        let mut metrics = Map::new();
        metrics.insert("predicted".into(), json!(meta.predicted));
        metrics.insert("failed".into(), json!(meta.failures.len()));
        metrics.insert("predictions".into(), Value::String(out.display().to_string()));
        layout.append_run(&RunRecord {
            config_hash: cfg.hash.clone(),
            seed: Some(meta.seed),
            stage: Stage::Predict,
            checkpoint: Some(ckpt_dir),
            metrics,
            started_at: started,
            finished_at: now(),
        })?;
        opts.log(format!("predict seed {}: {} rows -> {}", meta.seed, meta.predicted, out.display()));
        summaries.push(PredictSummary { out, meta });
    }
    Ok(summaries)
}

/// Aggregate prediction CSVs (default: every seed's) into the report CSV
/// and text table. All runs must come from one configuration.
pub fn cmd_report(
    cfg: &ExperimentConfig,
    predictions: &[PathBuf],
    out: Option<&Path>,
    opts: &RunOptions,
) -> Result<Report, ExperimentError> {
    let layout = Layout::new(cfg, opts.out_dir.as_deref());
    let inputs: Vec<PathBuf> = if predictions.is_empty() {
        opts.seeds(cfg)?.iter().map(|&s| layout.predictions(s)).collect()
    } else {
        predictions.to_vec()
    };
    let started = now();
    let mut runs = Vec::with_capacity(inputs.len());
    for path in &inputs {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|source| ExperimentError::Io { path: side.clone(), source })?;
        let meta: PredictMeta =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", side.display())))?;
        let records = read_predictions(path)?;
        let run = RunPredictions {
            backbone: meta.backbone,
            pretraining: meta.pretraining,
            split: meta.split,
            seed: meta.seed,
            records,
        };
        if let Some(first) = runs.first() {
            let first: &RunPredictions = first;
            if (first.backbone.as_str(), first.pretraining.as_str()) != (run.backbone.as_str(), run.pretraining.as_str()) {
                return Err(ExperimentError::Config(format!(
                    "mixed configurations: {}/{} and {}/{} ({})",
                    first.backbone,
                    first.pretraining,
                    run.backbone,
                    run.pretraining,
                    path.display()
                )));
            }
        }
        pairwise_group_tests(&run.records)
            .map_err(|source| ExperimentError::Run { run: format!("{} (seed {})", path.display(), run.seed), source })?;
        runs.push(run);
    }
    let report = evaluation_report(&runs)?;
    let csv_path = out.map(Path::to_path_buf).unwrap_or_else(|| layout.report_csv());
    write_file(&csv_path, &report.to_csv())?;
    let text = report.to_text();
    write_file(&csv_path.with_extension("txt"), &text)?;
    let mut metrics = Map::new();
    metrics.insert("runs".into(), json!(runs.len()));
    metrics.insert("report".into(), Value::String(csv_path.display().to_string()));
    layout.append_run(&RunRecord {
        config_hash: cfg.hash.clone(),
        seed: None,
        stage: Stage::Report,
        checkpoint: None,
        metrics,
        started_at: started,
        finished_at: now(),
    })?;
    opts.log(text);
    Ok(report)
}
