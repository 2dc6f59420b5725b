use brainage_nn::{init, join, Conv2d, InstanceNorm2d, Layer, LeakyRelu, Mode, Module, Slot, Tensor};
use rand::RngCore;

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

/// 3×3 convolution (no bias) → instance norm → leaky ReLU.
pub(crate) struct ConvBlock {
    conv: Conv2d,
    norm: InstanceNorm2d,
    act: LeakyRelu,
}

impl ConvBlock {
    pub(crate) fn new(cin: usize, cout: usize, stride: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, stride, 1, false, init::leaky_relu_gain(LEAKY_SLOPE), rng),
            norm: InstanceNorm2d::new(cout),
            act: LeakyRelu::new(LEAKY_SLOPE),
        }
    }
}

impl Module for ConvBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
}

impl Layer for ConvBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.conv.forward(x, mode);
        let y = self.norm.forward(&y, mode);
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.act.backward(g);
        let g = self.norm.backward(&g);
        self.conv.backward(&g)
    }
}

/// Two [`ConvBlock`]s; the first may downsample.
pub(crate) struct DoubleConv {
    first: ConvBlock,
    second: ConvBlock,
}

impl DoubleConv {
    pub(crate) fn new(cin: usize, cout: usize, stride: usize, rng: &mut dyn RngCore) -> Self {
        Self { first: ConvBlock::new(cin, cout, stride, rng), second: ConvBlock::new(cout, cout, 1, rng) }
    }
}

impl Module for DoubleConv {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.first.visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
    }
}

impl Layer for DoubleConv {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.first.forward(x, mode);
        self.second.forward(&y, mode)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.second.backward(g);
        self.first.backward(&g)
    }
}
