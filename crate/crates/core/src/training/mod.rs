//! Segmentation pre-training and CN-only age regression with
//! moving-average early stopping and the retrain-on-union budget.

use brainage_nn::{load_state_dict, loss, state_dict, Adam, Mode, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, SliceLoader};
use crate::evalstats::{dice_from_counts, mae};
use crate::manifest::{DatasetManifest, DiagnosisGroup, Split};
use crate::models::{predict_volume_age, AgeModel, Arch, ModelError, SegModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} manifest is empty")]
    Empty(&'static str),
    #[error("age training uses CN subjects only; {id} is {group}")]
    NonCn { id: String, group: DiagnosisGroup },
    #[error("test-split record {id} must not reach training")]
    TestLeak { id: String },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("slices of {id} are {got:?}, model expects {want:?}")]
    SliceShape { id: String, got: (usize, usize), want: (usize, usize) },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Hyperparameters for age regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgeTrainConfig {
    /// Slices per optimizer step.
    pub batch_size: usize,
    /// `None` picks [`default_learning_rate`] from the model's lineage.
    pub learning_rate: Option<f64>,
    pub max_epochs: usize,
    pub ma_window: usize,
    pub seed: u64,
}

impl Default for AgeTrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, learning_rate: None, max_epochs: 50, ma_window: 5, seed: 0 }
    }
}

impl AgeTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.ma_window == 0 {
            return Err(TrainError::Config("ma_window must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(TrainError::Config(format!("learning_rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// 1e-3 for a randomly initialized U-Net encoder, 1e-5 for a ResNet-50
/// that went through both ImageNet and segmentation pre-training, 1e-4
/// otherwise.
pub fn default_learning_rate(arch: Arch, lineage: &[String]) -> f64 {
    let has = |s: &str| lineage.iter().any(|l| l == s);
    match arch {
        Arch::UnetEncoder if lineage.is_empty() => 1e-3,
        Arch::Resnet50 if has("imagenet") && has(SEG_PRETRAIN) => 1e-5,
        _ => 1e-4,
    }
}

/// Lineage entry added by segmentation pre-training.
pub const SEG_PRETRAIN: &str = "seg-pretrain";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    Dice,
    DicePlusCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: SegLoss,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, learning_rate: 1e-3, loss: SegLoss::DicePlusCe, seed: 0 }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-slice squared error over the epoch's batches, years².
    pub train_mse: f64,
    /// Volume-level validation MAE; absent when training without validation.
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct StopLine {
    stopped_epoch: usize,
}

impl TrainHistory {
    /// One JSON object per epoch, then `{"stopped_epoch": n}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("record serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&StopLine { stopped_epoch: self.stopped_epoch }).expect("serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let (last, body) = lines.split_last().ok_or("empty history")?;
        let stop: StopLine = serde_json::from_str(last).map_err(|e| format!("final line: {e}"))?;
        let epochs = body
            .iter()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { epochs, stopped_epoch: stop.stopped_epoch })
    }

    pub fn val_maes(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.val_mae).collect()
    }
}

/// Best epoch (1-based) by the trailing moving average of the last
/// `min(e, window)` values; ties go to the earliest epoch.
pub fn moving_average_best(values: &[f64], window: usize) -> Result<usize, TrainError> {
    if values.is_empty() {
        return Err(TrainError::Config("no validation values".into()));
    }
    if window == 0 {
        return Err(TrainError::Config("window must be at least 1".into()));
    }
    let mut best = (1, f64::INFINITY);
    for e in 1..=values.len() {
        let ma = trailing_mean(&values[..e], window);
        if ma < best.1 {
            best = (e, ma);
        }
    }
    Ok(best.0)
}

fn trailing_mean(values: &[f64], window: usize) -> f64 {
    let w = &values[values.len().saturating_sub(window)..];
    w.iter().sum::<f64>() / w.len() as f64
}

/// Mean of the early-stopping epochs rounded half up, at least 1.
pub fn retrain_budget(stop_epochs: &[usize]) -> Result<usize, TrainError> {
    if stop_epochs.is_empty() {
        return Err(TrainError::Config("no stopping epochs".into()));
    }
    if stop_epochs.contains(&0) {
        return Err(TrainError::Config("stopping epochs must be positive".into()));
    }
    let n = stop_epochs.len();
    let sum: usize = stop_epochs.iter().sum();
    Ok(((2 * sum + n) / (2 * n)).max(1))
}

/// Slices of many subjects flattened into one tensor with per-slice ages.
struct SliceSet {
    x: Tensor,
    ages: Vec<f64>,
}

impl SliceSet {
    fn len(&self) -> usize {
        self.ages.len()
    }

    fn batch(&self, idx: &[usize]) -> (Tensor, Vec<f64>) {
        let shape = self.x.shape();
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let mut bs = shape.to_vec();
        bs[0] = idx.len();
        (Tensor::from_vec(&bs, data), idx.iter().map(|&i| self.ages[i]).collect())
    }
}

fn check_cn(manifest: &DatasetManifest) -> Result<(), TrainError> {
    for r in manifest.iter() {
        if r.split == Split::Test {
            return Err(TrainError::TestLeak { id: r.subject_id.clone() });
        }
        if r.group != DiagnosisGroup::CN {
            return Err(TrainError::NonCn { id: r.subject_id.clone(), group: r.group });
        }
    }
    Ok(())
}

fn load_slices(model: &AgeModel, manifest: &DatasetManifest, loader: &mut SliceLoader<'_>) -> Result<SliceSet, TrainError> {
    let c = model.in_channels();
    let (h, w) = model.input_hw();
    let mut data = Vec::new();
    let mut ages = Vec::new();
    for r in manifest.iter() {
        let stack = loader.age_stack(manifest, r, c)?;
        if stack.hw() != (h, w) {
            return Err(TrainError::SliceShape { id: r.subject_id.clone(), got: stack.hw(), want: (h, w) });
        }
        data.extend(stack.slices.iter().copied());
        ages.extend(std::iter::repeat_n(r.age_years, stack.count()));
    }
    Ok(SliceSet { x: Tensor::from_vec(&[ages.len(), c, h, w], data), ages })
}

/// One pass over shuffled slices; returns the mean per-slice loss.
fn age_epoch(model: &mut AgeModel, set: &SliceSet, opt: &mut Adam, batch_size: usize, rng: &mut ChaCha8Rng, epoch: usize) -> Result<f64, TrainError> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for (b, idx) in order.chunks(batch_size).enumerate() {
        let (x, y) = set.batch(idx);
        let pred = model.forward(&x, Mode::Train)?;
        let (l, g) = loss::mse(pred.data(), &y);
        if !l.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: b + 1, loss: l });
        }
        model.backward(&Tensor::from_vec(&[idx.len(), 1], g));
        opt.step(model);
        total += l * idx.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Volume-level MAE over a manifest.
pub fn volume_mae(model: &mut AgeModel, manifest: &DatasetManifest, loader: &mut SliceLoader<'_>) -> Result<f64, TrainError> {
    let mut pairs = Vec::with_capacity(manifest.len());
    for r in manifest.iter() {
        let stack = loader.age_stack(manifest, r, model.in_channels())?;
        pairs.push((predict_volume_age(model, &stack)?, r.age_years));
    }
    mae(&pairs).map_err(|_| TrainError::Empty("evaluation"))
}

/// Mean per-slice squared error of the current weights, evaluation mode.
pub fn slice_mse(model: &mut AgeModel, manifest: &DatasetManifest, loader: &mut SliceLoader<'_>) -> Result<f64, TrainError> {
    let set = load_slices(model, manifest, loader)?;
    if set.len() == 0 {
        return Err(TrainError::Empty("evaluation"));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, y) = set.batch(chunk);
        let pred = model.forward(&x, Mode::Eval)?;
        total += pred.data().iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
    }
    Ok(total / set.len() as f64)
}

fn learning_rate(model: &AgeModel, cfg: &AgeTrainConfig) -> f64 {
    cfg.learning_rate
        .unwrap_or_else(|| default_learning_rate(model.backbone().spec().arch, model.backbone().lineage()))
}

/// Train on CN slices, validating at volume level after every epoch. All
/// `max_epochs` run; the model is left at the weights of the epoch chosen
/// by [`moving_average_best`].
pub fn train_age(
    model: &mut AgeModel,
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &AgeTrainConfig,
    loader: &mut SliceLoader<'_>,
) -> Result<TrainHistory, TrainError> {
    train_age_observed(model, train, val, cfg, loader, &mut |_| {})
}

/// [`train_age`] with a callback after every epoch.
pub fn train_age_observed(
    model: &mut AgeModel,
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &AgeTrainConfig,
    loader: &mut SliceLoader<'_>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    check_cn(train)?;
    check_cn(val)?;
    let set = load_slices(model, train, loader)?;
    let mut opt = Adam::new(learning_rate(model, cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let start_epochs = model.trained_epochs();

    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut maes = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, brainage_nn::StateDict)> = None;
    for epoch in 1..=cfg.max_epochs {
        let train_mse = age_epoch(model, &set, &mut opt, cfg.batch_size, &mut rng, epoch)?;
        let val_mae = volume_mae(model, val, loader)?;
        maes.push(val_mae);
        let ma = trailing_mean(&maes, cfg.ma_window);
        if best.as_ref().is_none_or(|b| ma < b.1) {
            best = Some((epoch, ma, state_dict(model)));
        }
        let rec = EpochRecord { epoch, train_mse, val_mae: Some(val_mae) };
        on_epoch(&rec);
        epochs.push(rec);
    }
    let (stopped, _, weights) = best.expect("at least one epoch");
    debug_assert_eq!(stopped, moving_average_best(&maes, cfg.ma_window)?);
    load_state_dict(model, &weights, true).map_err(|e| TrainError::Model(ModelError::Nn(e)))?;
    model.set_trained_epochs(start_epochs + stopped);
    Ok(TrainHistory { epochs, stopped_epoch: stopped })
}

/// Train for exactly `budget_epochs` on the union of training and
/// validation subjects, without validation. Test-split records are
/// rejected before anything is loaded.
pub fn train_final(
    model: &mut AgeModel,
    train_plus_val: &DatasetManifest,
    budget_epochs: usize,
    cfg: &AgeTrainConfig,
    loader: &mut SliceLoader<'_>,
) -> Result<TrainHistory, TrainError> {
    train_final_observed(model, train_plus_val, budget_epochs, cfg, loader, &mut |_| {})
}

pub fn train_final_observed(
    model: &mut AgeModel,
    train_plus_val: &DatasetManifest,
    budget_epochs: usize,
    cfg: &AgeTrainConfig,
    loader: &mut SliceLoader<'_>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if budget_epochs == 0 {
        return Err(TrainError::Config("budget must be at least 1 epoch".into()));
    }
    if train_plus_val.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    check_cn(train_plus_val)?;
    let set = load_slices(model, train_plus_val, loader)?;
    let mut opt = Adam::new(learning_rate(model, cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut epochs = Vec::with_capacity(budget_epochs);
    for epoch in 1..=budget_epochs {
        let train_mse = age_epoch(model, &set, &mut opt, cfg.batch_size, &mut rng, epoch)?;
        let rec = EpochRecord { epoch, train_mse, val_mae: None };
        on_epoch(&rec);
        epochs.push(rec);
    }
    model.set_trained_epochs(model.trained_epochs() + budget_epochs);
    Ok(TrainHistory { epochs, stopped_epoch: budget_epochs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Hard Dice (logit > 0) pooled over the epoch's training batches.
    pub train_dice: f64,
    /// Mean per-volume Dice on the evaluation subjects, when given.
    pub eval_dice: Option<f64>,
}

struct SegSet {
    x: Tensor,
    y: Vec<f64>,
}

fn load_seg(model: &SegModel, manifest: &DatasetManifest, loader: &mut SliceLoader<'_>) -> Result<Vec<SegSet>, TrainError> {
    let c = model.in_channels();
    manifest
        .iter()
        .map(|r| {
            let (stack, mask) = loader.seg_slices(manifest, r, c)?;
            let shape = stack.slices.shape().to_vec();
            Ok(SegSet {
                x: Tensor::from_vec(&shape, stack.slices.iter().copied().collect()),
                y: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            })
        })
        .collect()
}

fn seg_loss(kind: SegLoss, logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let (d, mut g) = loss::soft_dice(logits, target, 1.0);
    match kind {
        SegLoss::Dice => (d, g),
        SegLoss::DicePlusCe => {
            let (b, gb) = loss::bce_with_logits(logits, target);
            g.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
            (d + b, g)
        }
    }
}

fn hard_counts(logits: &[f64], target: &[f64]) -> (usize, usize) {
    let (mut inter, mut total) = (0, 0);
    for (&z, &t) in logits.iter().zip(target) {
        let p = z > 0.0;
        let t = t > 0.5;
        inter += usize::from(p && t);
        total += usize::from(p) + usize::from(t);
    }
    (inter, total)
}

/// Mean per-volume hard Dice in evaluation mode.
pub fn seg_dice(model: &mut SegModel, manifest: &DatasetManifest, loader: &mut SliceLoader<'_>) -> Result<f64, TrainError> {
    let vols = load_seg(model, manifest, loader)?;
    if vols.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let mut sum = 0.0;
    for v in &vols {
        let mut counts = (0, 0);
        let n = v.x.shape()[0];
        let per = v.y.len() / n;
        for start in (0..n).step_by(16) {
            let end = (start + 16).min(n);
            let parts: Vec<Tensor> = (start..end).map(|i| v.x.sample(i)).collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let logits = model.forward(&Tensor::cat_batch(&refs), Mode::Eval)?;
            let (i, t) = hard_counts(logits.data(), &v.y[start * per..end * per]);
            counts.0 += i;
            counts.1 += t;
        }
        sum += dice_from_counts(counts.0, counts.1);
    }
    Ok(sum / vols.len() as f64)
}

/// Train a single-output segmentation model for exactly `cfg.epochs` on
/// every axial slice of every volume.
pub fn train_seg(
    model: &mut SegModel,
    data: &DatasetManifest,
    eval: Option<&DatasetManifest>,
    cfg: &SegTrainConfig,
    loader: &mut SliceLoader<'_>,
) -> Result<Vec<SegEpochRecord>, TrainError> {
    train_seg_observed(model, data, eval, cfg, loader, &mut |_| {})
}

pub fn train_seg_observed(
    model: &mut SegModel,
    data: &DatasetManifest,
    eval: Option<&DatasetManifest>,
    cfg: &SegTrainConfig,
    loader: &mut SliceLoader<'_>,
    on_epoch: &mut dyn FnMut(&SegEpochRecord),
) -> Result<Vec<SegEpochRecord>, TrainError> {
    cfg.validate()?;
    if model.out_channels() != 1 {
        return Err(TrainError::Config("segmentation training expects a single output channel".into()));
    }
    if data.is_empty() {
        return Err(TrainError::Empty("segmentation"));
    }
    for r in data.iter().chain(eval.into_iter().flat_map(|m| m.iter())) {
        if r.split == Split::Test {
            return Err(TrainError::TestLeak { id: r.subject_id.clone() });
        }
    }
    let vols = load_seg(model, data, loader)?;
    let slices: Vec<(usize, usize)> =
        vols.iter().enumerate().flat_map(|(v, s)| (0..s.x.shape()[0]).map(move |k| (v, k))).collect();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order = slices.clone();
        order.shuffle(&mut rng);
        let (mut total, mut counts) = (0.0, (0, 0));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<Tensor> = chunk.iter().map(|&(v, k)| vols[v].x.sample(k)).collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let x = Tensor::cat_batch(&refs);
            let per = x.numel() / chunk.len() / model.in_channels();
            let y: Vec<f64> = chunk.iter().flat_map(|&(v, k)| vols[v].y[k * per..(k + 1) * per].iter().copied()).collect();
            let logits = model.forward(&x, Mode::Train)?;
            let (l, g) = seg_loss(cfg.loss, logits.data(), &y);
            if !l.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b + 1, loss: l });
            }
            let (i, t) = hard_counts(logits.data(), &y);
            counts.0 += i;
            counts.1 += t;
            model.backward(&Tensor::from_vec(logits.shape(), g));
            opt.step(model);
            total += l * chunk.len() as f64;
        }
        let eval_dice = match eval {
            Some(m) => Some(seg_dice(model, m, loader)?),
            None => None,
        };
        let rec = SegEpochRecord {
            epoch,
            train_loss: total / slices.len() as f64,
            train_dice: dice_from_counts(counts.0, counts.1),
            eval_dice,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
