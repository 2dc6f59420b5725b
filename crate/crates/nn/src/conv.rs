use rand::RngCore;

use crate::gemm::gemm;
use crate::init;
use crate::module::{join, Layer, Mode, Module, Param, Slot};
use crate::Tensor;

/// 2D convolution with square kernel, computed as im2col + GEMM over
/// chunks of the batch.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: Option<Tensor>,
    // Reused column and product buffers; contents are always overwritten.
    cols: Vec<f64>,
    work: Vec<f64>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = init::kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, gain, rng);
        Self {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]))),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
            cols: Vec::new(),
            work: Vec::new(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        assert!(h + 2 * p >= k && w + 2 * p >= k, "conv input {h}x{w} smaller than kernel {k}");
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    /// Output columns `lo..hi` whose input column `oj·s + kj − p` is in bounds.
    fn valid_cols(&self, kj: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfold one sample (`C×H×W`) into rows of `cols`: row `r` of the
    /// `(C·k·k) × Ho·Wo` block lands at `cols[r·ld + off..]`. Every entry of
    /// the block is written.
    fn im2col(&self, plane: &[f64], hw_in: (usize, usize), hw_out: (usize, usize), cols: &mut [f64], ld: usize, off: usize) {
        let ((h, w), (ho, wo)) = (hw_in, hw_out);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for ci in 0..self.in_channels {
            let chan = &plane[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ci * k + ki) * k + kj;
                    let row = &mut cols[r * ld + off..r * ld + off + ho * wo];
                    let (lo, hi) = self.valid_cols(kj, w, wo);
                    for (oi, dst) in row.chunks_exact_mut(wo).enumerate() {
                        let ii = oi * s + ki;
                        if ii < p || ii - p >= h || lo == hi {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &chan[(ii - p) * w..(ii - p + 1) * w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let first = lo * s + kj - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add a column block into one
    /// sample's input gradient.
    fn col2im(&self, cols: &[f64], ld: usize, off: usize, hw_in: (usize, usize), hw_out: (usize, usize), plane: &mut [f64]) {
        let ((h, w), (ho, wo)) = (hw_in, hw_out);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for ci in 0..self.in_channels {
            let chan = &mut plane[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ci * k + ki) * k + kj;
                    let row = &cols[r * ld + off..r * ld + off + ho * wo];
                    let (lo, hi) = self.valid_cols(kj, w, wo);
                    if lo == hi {
                        continue;
                    }
                    for (oi, src) in row.chunks_exact(wo).enumerate() {
                        let ii = oi * s + ki;
                        if ii < p || ii - p >= h {
                            continue;
                        }
                        let dst = &mut chan[(ii - p) * w..(ii - p + 1) * w];
                        let first = lo * s + kj - p;
                        if s == 1 {
                            for (d, v) in dst[first..first + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in dst[first..].iter_mut().step_by(s).zip(&src[lo..hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Samples per GEMM: enough to give the product at least
    /// `MIN_GEMM_COLS` columns, so small deep maps still batch well.
    fn chunk_len(n: usize, hw: usize) -> usize {
        MIN_GEMM_COLS.div_ceil(hw.max(1)).clamp(1, n.max(1))
    }
}

const MIN_GEMM_COLS: usize = 1024;

fn scratch(buf: &mut Vec<f64>, len: usize) -> Vec<f64> {
    let mut v = std::mem::take(buf);
    v.resize(len, 0.0);
    v
}

impl Module for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv expects {} input channels, got {c}", self.in_channels);
        let (ho, wo) = self.output_hw(h, w);
        let (co, kk, hw) = (self.out_channels, c * self.kernel * self.kernel, ho * wo);
        let identity = self.kernel == 1 && self.stride == 1 && self.padding == 0;
        let chunk = Self::chunk_len(n, hw);
        let mut cols = scratch(&mut self.cols, kk * chunk * hw);
        let mut prod = scratch(&mut self.work, if chunk > 1 { co * chunk * hw } else { 0 });
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        let (xd, od) = (x.data(), out.data_mut());
        for n0 in (0..n).step_by(chunk) {
            let len = chunk.min(n - n0);
            let ld = len * hw;
            let wt = self.weight.value.data();
            if len == 1 {
                let plane = &xd[n0 * c * h * w..(n0 + 1) * c * h * w];
                let rhs: &[f64] = if identity {
                    plane
                } else {
                    self.im2col(plane, (h, w), (ho, wo), &mut cols, ld, 0);
                    &cols[..kk * ld]
                };
                gemm(co, kk, hw, wt, false, rhs, false, 0.0, &mut od[n0 * co * hw..(n0 + 1) * co * hw]);
            } else {
                for j in 0..len {
                    let plane = &xd[(n0 + j) * c * h * w..(n0 + j + 1) * c * h * w];
                    self.im2col(plane, (h, w), (ho, wo), &mut cols, ld, j * hw);
                }
                gemm(co, kk, ld, wt, false, &cols[..kk * ld], false, 0.0, &mut prod[..co * ld]);
                for j in 0..len {
                    for o in 0..co {
                        od[((n0 + j) * co + o) * hw..((n0 + j) * co + o + 1) * hw]
                            .copy_from_slice(&prod[o * ld + j * hw..o * ld + (j + 1) * hw]);
                    }
                }
            }
        }
        if let Some(b) = &self.bias {
            for (plane, &bo) in od.chunks_exact_mut(hw).zip(b.value.data().iter().cycle()) {
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
        self.cols = cols;
        self.work = prod;
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("Conv2d::backward without a training forward pass");
        let (n, c, h, w) = x.dims4();
        let (_, co, ho, wo) = grad_out.dims4();
        let (kk, hw) = (c * self.kernel * self.kernel, ho * wo);
        let gd = grad_out.data();
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for (plane, o) in gd.chunks_exact(hw).zip((0..co).cycle()) {
                db[o] += plane.iter().sum::<f64>();
            }
        }
        let chunk = Self::chunk_len(n, hw);
        let mut cols = scratch(&mut self.cols, kk * chunk * hw);
        let mut dcols = scratch(&mut self.work, kk * chunk * hw);
        let mut g = if chunk > 1 { vec![0.0; co * chunk * hw] } else { Vec::new() };
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let (xd, dxd) = (x.data(), dx.data_mut());
        for n0 in (0..n).step_by(chunk) {
            let len = chunk.min(n - n0);
            let ld = len * hw;
            let gm: &[f64] = if len == 1 {
                &gd[n0 * co * hw..(n0 + 1) * co * hw]
            } else {
                for j in 0..len {
                    for o in 0..co {
                        g[o * ld + j * hw..o * ld + (j + 1) * hw]
                            .copy_from_slice(&gd[((n0 + j) * co + o) * hw..((n0 + j) * co + o + 1) * hw]);
                    }
                }
                &g[..co * ld]
            };
            for j in 0..len {
                let plane = &xd[(n0 + j) * c * h * w..(n0 + j + 1) * c * h * w];
                self.im2col(plane, (h, w), (ho, wo), &mut cols, ld, j * hw);
            }
            gemm(co, ld, kk, gm, false, &cols[..kk * ld], true, 1.0, self.weight.grad.data_mut());
            gemm(kk, co, ld, self.weight.value.data(), true, gm, false, 0.0, &mut dcols[..kk * ld]);
            for j in 0..len {
                let plane = &mut dxd[(n0 + j) * c * h * w..(n0 + j + 1) * c * h * w];
                self.col2im(&dcols, ld, j * hw, (h, w), (ho, wo), plane);
            }
        }
        self.cols = cols;
        self.work = dcols;
        dx
    }
}

/// Transposed convolution with kernel 2 and stride 2: exact ×2 upsampling.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    /// Shape `(in, out, 2, 2)`.
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    input: Option<Tensor>,
}

impl ConvTranspose2x2 {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut dyn RngCore) -> Self {
        let weight = init::kaiming_normal(&[in_channels, out_channels, 2, 2], in_channels, 1.0, rng);
        Self {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

impl Module for ConvTranspose2x2 {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

impl Layer for ConvTranspose2x2 {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels);
        let co = self.out_channels;
        let hw = h * w;
        let m = co * 4;
        let mut prod = vec![0.0; m * hw];
        let mut out = Tensor::zeros(&[n, co, 2 * h, 2 * w]);
        let od = out.data_mut();
        for ni in 0..n {
            let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
            // W is (C, Cout·4); prod = Wᵀ · X_n.
            gemm(m, c, hw, self.weight.value.data(), true, xs, false, 0.0, &mut prod);
            for o in 0..co {
                let b = self.bias.value.data()[o];
                let plane = &mut od[(ni * co + o) * 4 * hw..(ni * co + o + 1) * 4 * hw];
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &prod[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                plane[(2 * i + a) * 2 * w + 2 * j + bb] = row[i * w + j] + b;
                            }
                        }
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("ConvTranspose2x2::backward without a training forward pass");
        let (n, c, h, w) = x.dims4();
        let co = self.out_channels;
        let hw = h * w;
        let m = co * 4;
        let mut g = vec![0.0; m * hw];
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            let plane_all = &grad_out.data()[ni * co * 4 * hw..(ni + 1) * co * 4 * hw];
            for o in 0..co {
                let plane = &plane_all[o * 4 * hw..(o + 1) * 4 * hw];
                let mut bsum = 0.0;
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &mut g[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                let v = plane[(2 * i + a) * 2 * w + 2 * j + bb];
                                row[i * w + j] = v;
                                bsum += v;
                            }
                        }
                    }
                }
                self.bias.grad.data_mut()[o] += bsum;
            }
            let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
            // dW (C, Cout·4) += X_n · Gᵀ
            gemm(c, hw, m, xs, false, &g, true, 1.0, self.weight.grad.data_mut());
            // dX_n = W · G
            let dxs = &mut dx.data_mut()[ni * c * hw..(ni + 1) * c * hw];
            gemm(c, m, hw, self.weight.value.data(), false, &g, false, 0.0, dxs);
        }
        dx
    }
}
