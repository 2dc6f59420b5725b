use crate::module::{join, Layer, Mode, Module, Param, Slot};
use crate::Tensor;

const EPS: f64 = 1e-5;

struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Per-sample, per-channel normalization with a learned affine transform.
pub struct InstanceNorm2d {
    pub gamma: Param,
    pub beta: Param,
    cache: Option<NormCache>,
}

impl InstanceNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            cache: None,
        }
    }
}

impl Module for InstanceNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "bias"), Slot::Param(&mut self.beta));
    }
}

impl Layer for InstanceNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.gamma.value.numel());
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let idx = ni * c + ci;
                let plane = &x.data()[idx * hw..(idx + 1) * hw];
                let mean = plane.iter().sum::<f64>() / hw as f64;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                let istd = 1.0 / (var + EPS).sqrt();
                inv_std[idx] = istd;
                let (g, b) = (self.gamma.value.data()[ci], self.beta.value.data()[ci]);
                let xh = &mut xhat[idx * hw..(idx + 1) * hw];
                let o = &mut out.data_mut()[idx * hw..(idx + 1) * hw];
                for ((xh, o), v) in xh.iter_mut().zip(o.iter_mut()).zip(plane) {
                    *xh = (v - mean) * istd;
                    *o = g * *xh + b;
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some(NormCache { xhat, inv_std });
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let NormCache { xhat, inv_std } = self.cache.take().expect("InstanceNorm2d::backward without forward");
        let (n, c, h, w) = grad_out.dims4();
        let hw = h * w;
        let m = hw as f64;
        let mut dx = Tensor::zeros(grad_out.shape());
        for ni in 0..n {
            for ci in 0..c {
                let idx = ni * c + ci;
                let g = self.gamma.value.data()[ci];
                let dy = &grad_out.data()[idx * hw..(idx + 1) * hw];
                let xh = &xhat[idx * hw..(idx + 1) * hw];
                let mut sum_dy = 0.0;
                let mut sum_dy_xh = 0.0;
                for (d, x) in dy.iter().zip(xh) {
                    sum_dy += d;
                    sum_dy_xh += d * x;
                }
                self.gamma.grad.data_mut()[ci] += sum_dy_xh;
                self.beta.grad.data_mut()[ci] += sum_dy;
                let scale = g * inv_std[idx] / m;
                let o = &mut dx.data_mut()[idx * hw..(idx + 1) * hw];
                for ((o, d), x) in o.iter_mut().zip(dy).zip(xh) {
                    *o = scale * (m * d - sum_dy - x * sum_dy_xh);
                }
            }
        }
        dx
    }
}

/// Batch normalization with running statistics (PyTorch semantics:
/// momentum 0.1, unbiased running variance).
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    momentum: f64,
    cache: Option<NormCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            cache: None,
        }
    }

    /// Zero-initialize the scale, so a residual branch starts as identity.
    pub fn zero_gamma(mut self) -> Self {
        self.gamma.value.fill(0.0);
        self
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "bias"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

impl Layer for BatchNorm2d {
    #[allow(clippy::needless_range_loop)]
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = n * hw;
        let mut out = Tensor::zeros(x.shape());
        match mode {
            Mode::Eval => {
                for ci in 0..c {
                    let istd = 1.0 / (self.running_var.data()[ci] + EPS).sqrt();
                    let mean = self.running_mean.data()[ci];
                    let (g, b) = (self.gamma.value.data()[ci], self.beta.value.data()[ci]);
                    for ni in 0..n {
                        let idx = ni * c + ci;
                        let src = &x.data()[idx * hw..(idx + 1) * hw];
                        let dst = &mut out.data_mut()[idx * hw..(idx + 1) * hw];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = g * (v - mean) * istd + b;
                        }
                    }
                }
            }
            Mode::Train => {
                let mut xhat = vec![0.0; x.numel()];
                let mut inv_std = vec![0.0; c];
                for ci in 0..c {
                    let mut sum = 0.0;
                    for ni in 0..n {
                        let idx = ni * c + ci;
                        sum += x.data()[idx * hw..(idx + 1) * hw].iter().sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for ni in 0..n {
                        let idx = ni * c + ci;
                        sq += x.data()[idx * hw..(idx + 1) * hw]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let istd = 1.0 / (var + EPS).sqrt();
                    inv_std[ci] = istd;
                    let unbiased = if count > 1 { sq / (count - 1) as f64 } else { var };
                    let rm = &mut self.running_mean.data_mut()[ci];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
                    let rv = &mut self.running_var.data_mut()[ci];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
                    let (g, b) = (self.gamma.value.data()[ci], self.beta.value.data()[ci]);
                    for ni in 0..n {
                        let idx = ni * c + ci;
                        for k in idx * hw..(idx + 1) * hw {
                            let xh = (x.data()[k] - mean) * istd;
                            xhat[k] = xh;
                            out.data_mut()[k] = g * xh + b;
                        }
                    }
                }
                self.cache = Some(NormCache { xhat, inv_std });
            }
        }
        out
    }

    #[allow(clippy::needless_range_loop)]
    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let NormCache { xhat, inv_std } = self.cache.take().expect("BatchNorm2d::backward without forward");
        let (n, c, h, w) = grad_out.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut dx = Tensor::zeros(grad_out.shape());
        for ci in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for ni in 0..n {
                let idx = ni * c + ci;
                for k in idx * hw..(idx + 1) * hw {
                    sum_dy += grad_out.data()[k];
                    sum_dy_xh += grad_out.data()[k] * xhat[k];
                }
            }
            self.gamma.grad.data_mut()[ci] += sum_dy_xh;
            self.beta.grad.data_mut()[ci] += sum_dy;
            let scale = self.gamma.value.data()[ci] * inv_std[ci] / m;
            for ni in 0..n {
                let idx = ni * c + ci;
                for k in idx * hw..(idx + 1) * hw {
                    dx.data_mut()[k] = scale * (m * grad_out.data()[k] - sum_dy - xhat[k] * sum_dy_xh);
                }
            }
        }
        dx
    }
}
