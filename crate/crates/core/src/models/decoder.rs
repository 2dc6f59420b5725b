use brainage_nn::{concat_channels, join, split_channels, Conv2d, ConvTranspose2x2, Layer, Mode, Module, Slot, Tensor};
use rand::RngCore;

use super::blocks::DoubleConv;

struct UpStage {
    up: ConvTranspose2x2,
    conv: DoubleConv,
    skip_channels: usize,
}

/// U-Net expanding path over the stage features of any encoder.
///
/// Each step upsamples ×2, concatenates the matching encoder stage and
/// applies two conv blocks. When the shallowest stage is itself
/// downsampled (the residual encoder) one more upsampling step without a
/// skip restores full resolution before the 1×1 output convolution.
pub struct UnetDecoder {
    ups: Vec<UpStage>,
    restore: Option<(ConvTranspose2x2, DoubleConv)>,
    head: Conv2d,
}

impl UnetDecoder {
    pub fn new(stage_channels: &[usize], first_stride: usize, out_channels: usize, rng: &mut dyn RngCore) -> Self {
        let mut ups = Vec::new();
        for i in (0..stage_channels.len() - 1).rev() {
            let (deep, skip) = (stage_channels[i + 1], stage_channels[i]);
            ups.push(UpStage {
                up: ConvTranspose2x2::new(deep, skip, rng),
                conv: DoubleConv::new(2 * skip, skip, 1, rng),
                skip_channels: skip,
            });
        }
        let c0 = stage_channels[0];
        let restore = (first_stride == 2).then(|| (ConvTranspose2x2::new(c0, c0, rng), DoubleConv::new(c0, c0, 1, rng)));
        Self { ups, restore, head: Conv2d::new(c0, out_channels, 1, 1, 0, true, 1.0, rng) }
    }

    pub fn forward(&mut self, stages: &[Tensor], mode: Mode) -> Tensor {
        let mut x = stages.last().expect("encoder stages").clone();
        for (step, u) in self.ups.iter_mut().enumerate() {
            let skip = &stages[stages.len() - 2 - step];
            let y = u.up.forward(&x, mode);
            x = u.conv.forward(&concat_channels(skip, &y), mode);
        }
        if let Some((up, conv)) = &mut self.restore {
            let y = up.forward(&x, mode);
            x = conv.forward(&y, mode);
        }
        self.head.forward(&x, mode)
    }

    /// Returns the gradient for every encoder stage, shallowest first.
    pub fn backward(&mut self, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.ups.len() + 1;
        let mut out: Vec<Option<Tensor>> = vec![None; n];
        let mut g = self.head.backward(grad);
        if let Some((up, conv)) = &mut self.restore {
            g = up.backward(&conv.backward(&g));
        }
        for (step, u) in self.ups.iter_mut().enumerate().rev() {
            let cat = u.conv.backward(&g);
            let (g_skip, g_up) = split_channels(&cat, u.skip_channels);
            out[n - 2 - step] = Some(g_skip);
            g = u.up.backward(&g_up);
        }
        out[n - 1] = Some(g);
        out
    }
}

impl Module for UnetDecoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.up.visit(&join(prefix, &format!("ups.{i}.up")), f);
            u.conv.visit(&join(prefix, &format!("ups.{i}.conv")), f);
        }
        if let Some((up, conv)) = &mut self.restore {
            up.visit(&join(prefix, "restore.up"), f);
            conv.visit(&join(prefix, "restore.conv"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}
