use brainage_nn::{join, BatchNorm2d, Conv2d, Layer, LeakyRelu, MaxPool2d, Mode, Module, Slot, Tensor};
use rand::RngCore;

use super::{merge, Encoder};

pub(crate) const BLOCKS: [usize; 4] = [3, 4, 6, 3];
const EXPANSION: usize = 4;

fn conv(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut dyn RngCore) -> Conv2d {
    Conv2d::new(cin, cout, k, stride, k / 2, false, std::f64::consts::SQRT_2, rng)
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: LeakyRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: LeakyRelu,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    relu_out: LeakyRelu,
}

impl Bottleneck {
    fn new(cin: usize, width: usize, stride: usize, rng: &mut dyn RngCore) -> Self {
        let cout = width * EXPANSION;
        let downsample = (stride != 1 || cin != cout)
            .then(|| (Conv2d::new(cin, cout, 1, stride, 0, false, 1.0, rng), BatchNorm2d::new(cout)));
        Self {
            conv1: conv(cin, width, 1, 1, rng),
            bn1: BatchNorm2d::new(width),
            relu1: LeakyRelu::relu(),
            conv2: conv(width, width, 3, stride, rng),
            bn2: BatchNorm2d::new(width),
            relu2: LeakyRelu::relu(),
            conv3: conv(width, cout, 1, 1, rng),
            bn3: BatchNorm2d::new(cout),
            downsample,
            relu_out: LeakyRelu::relu(),
        }
    }
}

impl Module for Bottleneck {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some((c, b)) = &mut self.downsample {
            c.visit(&join(prefix, "downsample.0"), f);
            b.visit(&join(prefix, "downsample.1"), f);
        }
    }
}

impl Layer for Bottleneck {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.conv1.forward(x, mode);
        let y = self.bn1.forward(&y, mode);
        let y = self.relu1.forward(&y, mode);
        let y = self.conv2.forward(&y, mode);
        let y = self.bn2.forward(&y, mode);
        let y = self.relu2.forward(&y, mode);
        let y = self.conv3.forward(&y, mode);
        let mut y = self.bn3.forward(&y, mode);
        match &mut self.downsample {
            Some((c, b)) => {
                let s = c.forward(x, mode);
                y.add_assign(&b.forward(&s, mode));
            }
            None => y.add_assign(x),
        }
        self.relu_out.forward(&y, mode)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.relu_out.backward(g);
        let shortcut = match &mut self.downsample {
            Some((c, b)) => c.backward(&b.backward(&g)),
            None => g.clone(),
        };
        let h = self.bn3.backward(&g);
        let h = self.conv3.backward(&h);
        let h = self.relu2.backward(&h);
        let h = self.bn2.backward(&h);
        let h = self.conv2.backward(&h);
        let h = self.relu1.backward(&h);
        let h = self.bn1.backward(&h);
        let mut dx = self.conv1.backward(&h);
        dx.add_assign(&shortcut);
        dx
    }
}

/// ResNet-50 with parameter names matching the common torchvision layout.
///
/// `plan` gives the output width of the four residual layers; the stem
/// and bottleneck widths are a quarter of `plan[0]` and of each entry.
/// The canonical network uses `[256, 512, 1024, 2048]`.
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu: LeakyRelu,
    maxpool: MaxPool2d,
    layers: Vec<Vec<Bottleneck>>,
    plan: Vec<usize>,
}

impl ResNet50 {
    pub fn new(in_channels: usize, plan: &[usize], rng: &mut dyn RngCore) -> Self {
        let stem = plan[0] / EXPANSION;
        let conv1 = conv(in_channels, stem, 7, 2, rng);
        let mut layers = Vec::with_capacity(4);
        let mut cin = stem;
        for (i, (&out, &n)) in plan.iter().zip(BLOCKS.iter()).enumerate() {
            let width = out / EXPANSION;
            let stride = if i == 0 { 1 } else { 2 };
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                blocks.push(Bottleneck::new(cin, width, if b == 0 { stride } else { 1 }, rng));
                cin = out;
            }
            layers.push(blocks);
        }
        Self {
            conv1,
            bn1: BatchNorm2d::new(stem),
            relu: LeakyRelu::relu(),
            maxpool: MaxPool2d::new(3, 2, 1),
            layers,
            plan: plan.to_vec(),
        }
    }
}

impl Module for ResNet50 {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (b, block) in layer.iter_mut().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{b}", i + 1)), f);
            }
        }
    }
}

impl Encoder for ResNet50 {
    /// Stem activation at stride 2 followed by the four residual layers.
    fn forward_stages(&mut self, x: &Tensor, mode: Mode) -> Vec<Tensor> {
        let y = self.conv1.forward(x, mode);
        let y = self.bn1.forward(&y, mode);
        let stem = self.relu.forward(&y, mode);
        let mut cur = self.maxpool.forward(&stem, mode);
        let mut outs = vec![stem];
        for layer in &mut self.layers {
            for block in layer.iter_mut() {
                cur = block.forward(&cur, mode);
            }
            outs.push(cur.clone());
        }
        outs
    }

    fn backward_stages(&mut self, mut grads: Vec<Option<Tensor>>) -> Tensor {
        let mut carry: Option<Tensor> = None;
        for i in (0..4).rev() {
            let mut g = merge(carry.take(), grads[i + 1].take(), i + 1);
            for block in self.layers[i].iter_mut().rev() {
                g = block.backward(&g);
            }
            carry = Some(g);
        }
        let g = self.maxpool.backward(&carry.expect("residual layers produce a gradient"));
        let g = merge(Some(g), grads[0].take(), 0);
        let g = self.relu.backward(&g);
        let g = self.bn1.backward(&g);
        self.conv1.backward(&g)
    }

    fn stage_channels(&self) -> Vec<usize> {
        let mut c = vec![self.plan[0] / EXPANSION];
        c.extend_from_slice(&self.plan);
        c
    }

    fn stage_strides(&self) -> Vec<usize> {
        vec![2, 4, 8, 16, 32]
    }
}
