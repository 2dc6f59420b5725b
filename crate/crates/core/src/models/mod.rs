//! Backbones, heads, model assembly and backbone transplantation.
//!
//! A [`Backbone`] is a convolutional encoder that exposes the feature map
//! of every stage. [`AgeModel`] puts a single linear unit on the flattened
//! final map; [`SegModel`] attaches a U-Net decoder with a skip connection
//! at every stage (a ResUNet when the encoder is [`Arch::Resnet50`]).

mod blocks;
mod checkpoint;
mod decoder;
mod resnet;
mod unet;

use std::path::PathBuf;

use brainage_nn::{join, load_state_dict, state_dict, Layer, Linear, Mode, Module, NnError, Slot, StateDict, StateMismatch, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::SliceStack;

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, META_FILE, WEIGHTS_FILE};
pub use decoder::UnetDecoder;
pub use resnet::ResNet50;
pub use unet::UnetEncoder;

/// Environment variable naming a safetensors file with ImageNet ResNet-50
/// weights in torchvision layout.
pub const IMAGENET_WEIGHTS_ENV: &str = "BRAINAGE_IMAGENET_WEIGHTS";

pub const UNET_DEFAULT_PLAN: [usize; 5] = [32, 64, 128, 256, 512];
pub const RESNET50_PLAN: [usize; 4] = [256, 512, 1024, 2048];

/// Slices per forward pass at inference.
const PREDICT_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone spec: {0}")]
    Spec(String),
    #[error("{context}: {mismatch}")]
    Mismatch { context: String, mismatch: StateMismatch },
    #[error("cannot assemble model: {0}")]
    Assembly(String),
    #[error("input shape {got:?} does not fit the model: {reason}")]
    Input { got: Vec<usize>, reason: String },
    #[error("ImageNet weights requested but {IMAGENET_WEIGHTS_ENV} is not set")]
    ImagenetUnavailable,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Nn(NnError),
}

impl ModelError {
    fn from_load(context: impl Into<String>, e: NnError) -> Self {
        match e {
            NnError::StateMismatch(mismatch) => ModelError::Mismatch { context: context.into(), mismatch },
            other => ModelError::Nn(other),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    UnetEncoder,
    Resnet50,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::UnetEncoder => "unet_encoder",
            Arch::Resnet50 => "resnet50",
        }
    }

    pub fn default_in_channels(self) -> usize {
        match self {
            Arch::UnetEncoder => 1,
            Arch::Resnet50 => 3,
        }
    }

    pub fn default_plan(self) -> Vec<usize> {
        match self {
            Arch::UnetEncoder => UNET_DEFAULT_PLAN.to_vec(),
            Arch::Resnet50 => RESNET50_PLAN.to_vec(),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    Imagenet,
    Checkpoint,
}

/// What to build: architecture, input channels, initialization and
/// per-stage widths. In JSON, `in_channels` and `stage_channel_plan` may be
/// omitted and default per architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct BackboneSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub init: Init,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_ref: Option<PathBuf>,
    pub stage_channel_plan: Vec<usize>,
}

#[derive(Deserialize)]
struct RawSpec {
    arch: Arch,
    in_channels: Option<usize>,
    #[serde(default = "random_init")]
    init: Init,
    checkpoint_ref: Option<PathBuf>,
    stage_channel_plan: Option<Vec<usize>>,
}

fn random_init() -> Init {
    Init::Random
}

impl TryFrom<RawSpec> for BackboneSpec {
    type Error = ModelError;

    fn try_from(r: RawSpec) -> Result<Self, ModelError> {
        let spec = BackboneSpec {
            arch: r.arch,
            in_channels: r.in_channels.unwrap_or(r.arch.default_in_channels()),
            init: r.init,
            checkpoint_ref: r.checkpoint_ref,
            stage_channel_plan: r.stage_channel_plan.unwrap_or_else(|| r.arch.default_plan()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl BackboneSpec {
    /// Randomly initialized backbone with the architecture's defaults.
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            in_channels: arch.default_in_channels(),
            init: Init::Random,
            checkpoint_ref: None,
            stage_channel_plan: arch.default_plan(),
        }
    }

    pub fn with_plan(mut self, plan: &[usize]) -> Self {
        self.stage_channel_plan = plan.to_vec();
        self
    }

    pub fn with_init(mut self, init: Init, checkpoint_ref: Option<PathBuf>) -> Self {
        self.init = init;
        self.checkpoint_ref = checkpoint_ref;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Spec(m));
        if self.in_channels == 0 {
            return err("in_channels must be at least 1".into());
        }
        if self.init == Init::Imagenet && self.arch != Arch::Resnet50 {
            return err(format!("imagenet initialization is only available for resnet50, not {}", self.arch));
        }
        if self.init == Init::Imagenet && self.in_channels != 3 {
            return err("imagenet initialization needs in_channels = 3".into());
        }
        match (self.init, &self.checkpoint_ref) {
            (Init::Checkpoint, None) => return err("init = checkpoint needs checkpoint_ref".into()),
            (Init::Random | Init::Imagenet, Some(_)) => return err("checkpoint_ref is only valid with init = checkpoint".into()),
            _ => {}
        }
        let plan = &self.stage_channel_plan;
        if plan.is_empty() || plan.contains(&0) {
            return err(format!("stage_channel_plan must be nonempty and positive, got {plan:?}"));
        }
        if self.arch == Arch::Resnet50 && (plan.len() != 4 || plan.iter().any(|w| w % 4 != 0)) {
            return err(format!("resnet50 needs four stage widths divisible by 4, got {plan:?}"));
        }
        Ok(())
    }

    /// Total downsampling of the final feature map.
    pub fn downsample_factor(&self) -> usize {
        match self.arch {
            Arch::UnetEncoder => 1 << (self.stage_channel_plan.len() - 1),
            Arch::Resnet50 => 32,
        }
    }
}

/// A multi-stage encoder.
pub(crate) trait Encoder: Module + Send {
    /// Feature maps of every stage, shallowest first.
    fn forward_stages(&mut self, x: &Tensor, mode: Mode) -> Vec<Tensor>;
    /// Back-propagate per-stage gradients; stages without one get `None`.
    fn backward_stages(&mut self, grads: Vec<Option<Tensor>>) -> Tensor;
    fn stage_channels(&self) -> Vec<usize>;
    fn stage_strides(&self) -> Vec<usize>;
}

pub(crate) fn merge(a: Option<Tensor>, b: Option<Tensor>, stage: usize) -> Tensor {
    match (a, b) {
        (Some(a), Some(b)) => a.add(&b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => panic!("no gradient reaches encoder stage {stage}"),
    }
}

/// A built encoder plus its spec and pre-training lineage.
pub struct Backbone {
    spec: BackboneSpec,
    seed: u64,
    lineage: Vec<String>,
    net: Box<dyn Encoder>,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("spec", &self.spec).field("lineage", &self.lineage).finish()
    }
}

/// Build the encoder described by `spec`. Random weights are drawn from a
/// generator seeded with `seed`; ImageNet and checkpoint initializations
/// then overwrite every tensor.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Backbone, ModelError> {
    spec.validate()?;
    let mut backbone = random_backbone(spec, seed);
    match spec.init {
        Init::Random => {}
        Init::Imagenet => {
            let path = std::env::var_os(IMAGENET_WEIGHTS_ENV).ok_or(ModelError::ImagenetUnavailable)?;
            let state = brainage_nn::load_safetensors(std::path::Path::new(&path)).map_err(ModelError::Nn)?;
            load_state_dict(&mut *backbone.net, &state, false)
                .map_err(|e| ModelError::from_load("ImageNet weights do not fit resnet50", e))?;
            backbone.lineage.push("imagenet".into());
        }
        Init::Checkpoint => {
            let dir = spec.checkpoint_ref.as_ref().expect("validated");
            let ckpt = Checkpoint::load(dir)?;
            let weights = ckpt.backbone_weights()?;
            backbone.load_weights(&weights)?;
            backbone.lineage = weights.lineage;
        }
    }
    Ok(backbone)
}

fn random_backbone(spec: &BackboneSpec, seed: u64) -> Backbone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net: Box<dyn Encoder> = match spec.arch {
        Arch::UnetEncoder => Box::new(UnetEncoder::new(spec.in_channels, &spec.stage_channel_plan, &mut rng)),
        Arch::Resnet50 => Box::new(ResNet50::new(spec.in_channels, &spec.stage_channel_plan, &mut rng)),
    };
    Backbone { spec: spec.clone(), seed, lineage: Vec::new(), net }
}

impl Backbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Pre-training steps these weights went through, oldest first.
    pub fn lineage(&self) -> &[String] {
        &self.lineage
    }

    pub fn push_lineage(&mut self, step: &str) {
        self.lineage.push(step.to_string());
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.net.stage_channels()
    }

    pub fn stage_strides(&self) -> Vec<usize> {
        self.net.stage_strides()
    }

    /// Shape `(C, h, w)` of the final feature map for an `h × w` input.
    pub fn feature_shape(&self, hw: (usize, usize)) -> Result<[usize; 3], ModelError> {
        let f = self.spec.downsample_factor();
        if hw.0 == 0 || hw.1 == 0 || !hw.0.is_multiple_of(f) || !hw.1.is_multiple_of(f) {
            return Err(ModelError::Input {
                got: vec![hw.0, hw.1],
                reason: format!("{} with this plan needs height and width that are positive multiples of {f}", self.spec.arch),
            });
        }
        let c = *self.stage_channels().last().expect("nonempty plan");
        Ok([c, hw.0 / f, hw.1 / f])
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let s = x.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != self.spec.in_channels {
            return Err(ModelError::Input {
                got: s.to_vec(),
                reason: format!("expected (N, {}, H, W) with N ≥ 1", self.spec.in_channels),
            });
        }
        self.feature_shape((s[2], s[3])).map(|_| ())
    }

    /// Feature maps of every stage, shallowest first.
    pub fn forward_stages(&mut self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>, ModelError> {
        self.check_input(x)?;
        Ok(self.net.forward_stages(x, mode))
    }

    /// Final feature map in evaluation mode.
    pub fn features(&mut self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward_stages(x, Mode::Eval)?.pop().expect("nonempty plan"))
    }

    pub(crate) fn backward_stages(&mut self, grads: Vec<Option<Tensor>>) -> Tensor {
        self.net.backward_stages(grads)
    }

    /// Copy out the encoder weights.
    pub fn weights(&mut self) -> BackboneWeights {
        BackboneWeights {
            arch: self.spec.arch,
            in_channels: self.spec.in_channels,
            stage_channel_plan: self.spec.stage_channel_plan.clone(),
            lineage: self.lineage.clone(),
            state: state_dict(&mut *self.net),
        }
    }

    /// Overwrite all encoder tensors. Fails without modifying anything
    /// when the weights come from a different spec.
    pub fn load_weights(&mut self, w: &BackboneWeights) -> Result<(), ModelError> {
        let context = format!(
            "{} weights (in_channels {}, plan {:?}) do not fit {} (in_channels {}, plan {:?})",
            w.arch,
            w.in_channels,
            w.stage_channel_plan,
            self.spec.arch,
            self.spec.in_channels,
            self.spec.stage_channel_plan
        );
        load_state_dict(&mut *self.net, &w.state, true).map_err(|e| ModelError::from_load(context, e))?;
        Ok(())
    }
}

impl Module for Backbone {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.net.visit(prefix, f);
    }
}

/// Encoder weights detached from any head or decoder.
#[derive(Clone, Debug)]
pub struct BackboneWeights {
    pub arch: Arch,
    pub in_channels: usize,
    pub stage_channel_plan: Vec<usize>,
    pub lineage: Vec<String>,
    pub state: StateDict,
}

/// Models that contain a backbone.
pub trait HasBackbone {
    fn backbone_mut(&mut self) -> &mut Backbone;
}

/// Extract the encoder weights of a trained or untrained model, dropping
/// its head or decoder.
pub fn transplant_backbone(source: &mut dyn HasBackbone) -> BackboneWeights {
    source.backbone_mut().weights()
}

fn stack_to_tensor(stack: &SliceStack) -> Tensor {
    let s = stack.slices.shape().to_vec();
    Tensor::from_vec(&s, stack.slices.as_standard_layout().iter().copied().collect())
}

/// Age regressor: backbone, flatten, one linear unit.
pub struct AgeModel {
    backbone: Backbone,
    head: Linear,
    input_hw: (usize, usize),
    trained_epochs: usize,
}

/// Attach a linear unit over the flattened final feature map for inputs of
/// size `input_hw`. Head weights are `N(0, 1/fan_in)`; the bias starts at
/// `mean_age` when given, else 0.
pub fn assemble_age_model(backbone: Backbone, input_hw: (usize, usize), mean_age: Option<f64>) -> Result<AgeModel, ModelError> {
    let [c, h, w] = backbone.feature_shape(input_hw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(backbone.seed);
    rng.set_stream(1);
    let mut head = Linear::new(c * h * w, 1, &mut rng);
    head.bias.value.fill(mean_age.unwrap_or(0.0));
    Ok(AgeModel { backbone, head, input_hw, trained_epochs: 0 })
}

impl AgeModel {
    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn in_channels(&self) -> usize {
        self.backbone.spec.in_channels
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn set_trained_epochs(&mut self, n: usize) {
        self.trained_epochs = n;
    }

    fn check_hw(&self, x: &Tensor) -> Result<(), ModelError> {
        let s = x.shape();
        if s.len() != 4 || (s[2], s[3]) != self.input_hw {
            return Err(ModelError::Input {
                got: s.to_vec(),
                reason: format!("age model was assembled for {}×{} slices", self.input_hw.0, self.input_hw.1),
            });
        }
        Ok(())
    }

    /// One scalar per slice, shape `(N, 1)`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ModelError> {
        self.check_hw(x)?;
        let mut stages = self.backbone.forward_stages(x, mode)?;
        let f = stages.pop().expect("nonempty plan");
        Ok(self.head.forward(&f, mode))
    }

    /// Accumulate gradients for `d loss / d output` after a training forward.
    pub fn backward(&mut self, grad: &Tensor) {
        let g = self.head.backward(grad);
        let n = self.backbone.stage_channels().len();
        let mut grads = vec![None; n];
        grads[n - 1] = Some(g);
        self.backbone.backward_stages(grads);
    }

    /// Per-slice predictions in evaluation mode.
    pub fn predict_slices(&mut self, stack: &SliceStack) -> Result<Vec<f64>, ModelError> {
        let x = stack_to_tensor(stack);
        let n = stack.count();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_BATCH).min(n);
            let parts: Vec<Tensor> = (start..end).map(|i| x.sample(i)).collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let y = self.forward(&Tensor::cat_batch(&refs), Mode::Eval)?;
            out.extend_from_slice(y.data());
            start = end;
        }
        Ok(out)
    }
}

impl HasBackbone for AgeModel {
    fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }
}

impl Module for AgeModel {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

/// Volume-level age: the mean of the per-slice outputs.
pub fn predict_volume_age(model: &mut AgeModel, stack: &SliceStack) -> Result<f64, ModelError> {
    if stack.count() == 0 {
        return Err(ModelError::Input { got: stack.slices.shape().to_vec(), reason: "empty slice stack".into() });
    }
    let preds = model.predict_slices(stack)?;
    Ok(preds.iter().sum::<f64>() / preds.len() as f64)
}

/// Segmentation network: backbone plus U-Net decoder.
pub struct SegModel {
    backbone: Backbone,
    decoder: UnetDecoder,
    out_channels: usize,
}

/// Attach a U-Net decoder with a skip connection at every encoder stage.
pub fn assemble_seg_model(backbone: Backbone, out_channels: usize) -> Result<SegModel, ModelError> {
    if out_channels == 0 {
        return Err(ModelError::Assembly("out_channels must be at least 1".into()));
    }
    let channels = backbone.stage_channels();
    if channels.len() < 2 {
        return Err(ModelError::Assembly("encoder exposes no intermediate feature maps to skip-connect".into()));
    }
    let strides = backbone.stage_strides();
    let mut rng = ChaCha8Rng::seed_from_u64(backbone.seed);
    rng.set_stream(2);
    let decoder = UnetDecoder::new(&channels, strides[0], out_channels, &mut rng);
    Ok(SegModel { backbone, decoder, out_channels })
}

impl SegModel {
    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.backbone.spec.in_channels
    }

    /// Logits of shape `(N, out_channels, H, W)`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ModelError> {
        let stages = self.backbone.forward_stages(x, mode)?;
        Ok(self.decoder.forward(&stages, mode))
    }

    pub fn backward(&mut self, grad: &Tensor) {
        let grads = self.decoder.backward(grad);
        self.backbone.backward_stages(grads);
    }

    pub fn into_backbone(self) -> Backbone {
        self.backbone
    }
}

impl HasBackbone for SegModel {
    fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }
}

impl Module for SegModel {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
}
