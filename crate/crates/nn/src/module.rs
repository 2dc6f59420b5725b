use std::collections::BTreeMap;

use crate::{NnError, Tensor};

/// Forward-pass mode.
///
/// `Train` caches activations for [`Layer::backward`] and makes batch
/// normalization use batch statistics. `Eval` caches nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// A named tensor slot exposed by a module: either trainable or a
/// persistent buffer such as batch-norm running statistics.
pub enum Slot<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Tensor),
}

impl Slot<'_> {
    pub fn value(&self) -> &Tensor {
        match self {
            Slot::Param(p) => &p.value,
            Slot::Buffer(t) => t,
        }
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        match self {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(t) => t,
        }
    }
}

/// Anything that owns named parameters or buffers.
pub trait Module {
    /// Visit every tensor slot, in a fixed order, with its dotted name.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>));
}

/// A single-input, single-output differentiable layer.
pub trait Layer: Module {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor;

    /// Accumulate parameter gradients and return the input gradient.
    /// Must follow a `Mode::Train` forward call.
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;
}

/// Join a module prefix and a child name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub type StateDict = BTreeMap<String, Tensor>;

pub fn state_dict(m: &mut dyn Module) -> StateDict {
    let mut out = StateDict::new();
    m.visit("", &mut |name, slot| {
        out.insert(name.to_string(), slot.value().clone());
    });
    out
}

/// Load every slot of `m` from `state`.
///
/// All slots must be present with matching shapes; with `strict`, extra
/// entries in `state` are also rejected. Nothing is written unless the
/// whole dict is compatible.
pub fn load_state_dict(m: &mut dyn Module, state: &StateDict, strict: bool) -> Result<(), NnError> {
    let mut mismatch = StateMismatch::default();
    let mut seen = Vec::new();
    m.visit("", &mut |name, slot| {
        seen.push(name.to_string());
        match state.get(name) {
            None => mismatch.missing.push(name.to_string()),
            Some(t) if t.shape() != slot.value().shape() => mismatch.shape.push((
                name.to_string(),
                slot.value().shape().to_vec(),
                t.shape().to_vec(),
            )),
            Some(_) => {}
        }
    });
    if strict {
        seen.sort();
        for key in state.keys() {
            if seen.binary_search(key).is_err() {
                mismatch.unexpected.push(key.clone());
            }
        }
    }
    if !mismatch.is_empty() {
        return Err(NnError::StateMismatch(mismatch));
    }
    m.visit("", &mut |name, mut slot| {
        *slot.value_mut() = state[name].clone();
        if let Slot::Param(p) = slot {
            p.grad.fill(0.0);
        }
    });
    Ok(())
}

/// Differences between a module's slots and a state dict.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateMismatch {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    /// `(name, expected shape, found shape)`
    pub shape: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl StateMismatch {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape.is_empty()
    }
}

impl std::fmt::Display for StateMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("missing [{}]", self.missing.join(", ")));
        }
        if !self.unexpected.is_empty() {
            parts.push(format!("unexpected [{}]", self.unexpected.join(", ")));
        }
        for (name, want, got) in &self.shape {
            parts.push(format!("{name}: expected {want:?}, found {got:?}"));
        }
        f.write_str(&parts.join("; "))
    }
}

pub fn zero_grad(m: &mut dyn Module) {
    m.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            p.grad.fill(0.0);
        }
    });
}

pub fn num_params(m: &mut dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            n += p.value.numel();
        }
    });
    n
}

/// Names and shapes of all slots, in visit order.
pub fn slot_shapes(m: &mut dyn Module) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, slot| out.push((name.to_string(), slot.value().shape().to_vec())));
    out
}
