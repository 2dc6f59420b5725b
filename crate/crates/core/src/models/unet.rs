use brainage_nn::{join, Layer, Mode, Module, Slot, Tensor};
use rand::RngCore;

use super::blocks::DoubleConv;
use super::{merge, Encoder};

/// U-Net contracting path including the bottleneck: one double-conv stage
/// per plan entry, every stage after the first downsampling by a strided
/// convolution.
pub struct UnetEncoder {
    stages: Vec<DoubleConv>,
    plan: Vec<usize>,
}

impl UnetEncoder {
    pub fn new(in_channels: usize, plan: &[usize], rng: &mut dyn RngCore) -> Self {
        let mut stages = Vec::with_capacity(plan.len());
        let mut cin = in_channels;
        for (i, &w) in plan.iter().enumerate() {
            stages.push(DoubleConv::new(cin, w, if i == 0 { 1 } else { 2 }, rng));
            cin = w;
        }
        Self { stages, plan: plan.to_vec() }
    }
}

impl Module for UnetEncoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), f);
        }
    }
}

impl Encoder for UnetEncoder {
    fn forward_stages(&mut self, x: &Tensor, mode: Mode) -> Vec<Tensor> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let y = stage.forward(if i == 0 { x } else { &outs[i - 1] }, mode);
            outs.push(y);
        }
        outs
    }

    fn backward_stages(&mut self, mut grads: Vec<Option<Tensor>>) -> Tensor {
        let mut carry: Option<Tensor> = None;
        for i in (0..self.stages.len()).rev() {
            let g = merge(carry.take(), grads[i].take(), i);
            carry = Some(self.stages[i].backward(&g));
        }
        carry.expect("encoder has at least one stage")
    }

    fn stage_channels(&self) -> Vec<usize> {
        self.plan.clone()
    }

    fn stage_strides(&self) -> Vec<usize> {
        (0..self.plan.len()).map(|i| 1 << i).collect()
    }
}
