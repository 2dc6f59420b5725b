use crate::module::{Layer, Mode, Module, Slot};
use crate::Tensor;

/// Max pooling with implicit `-inf` padding.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding, cache: None }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = 2 * self.padding;
        ((h + p - self.kernel) / self.stride + 1, (w + p - self.kernel) / self.stride + 1)
    }
}

impl Module for MaxPool2d {
    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, Slot<'_>)) {}
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = self.output_hw(h, w);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let p = self.padding as isize;
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ki in 0..self.kernel {
                        let ii = (oi * self.stride + ki) as isize - p;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let jj = (oj * self.stride + kj) as isize - p;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let k = ii as usize * w + jj as usize;
                            if src[k] > best {
                                best = src[k];
                                at = k;
                            }
                        }
                    }
                    let o = (plane * ho + oi) * wo + oj;
                    out.data_mut()[o] = best;
                    argmax[o] = plane * h * w + at;
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((argmax, x.shape().to_vec()));
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (argmax, shape) = self.cache.take().expect("MaxPool2d::backward without forward");
        let mut dx = Tensor::zeros(&shape);
        for (&src, g) in argmax.iter().zip(grad_out.data()) {
            dx.data_mut()[src] += g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_layer_grads, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn picks_window_maximum() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0]);
        let y = MaxPool2d::new(2, 2, 0).forward(&x, Mode::Eval);
        assert_eq!(y.data(), &[5.0, 9.0]);
    }

    #[test]
    fn padded_pool_shape_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pool = MaxPool2d::new(3, 2, 1);
        let x = rand_tensor(&[2, 2, 8, 8], &mut rng);
        assert_eq!(pool.forward(&x, Mode::Eval).shape(), &[2, 2, 4, 4]);
        check_layer_grads(&mut pool, &x, 1e-6);
    }
}
