use rand::RngCore;

use crate::gemm::gemm;
use crate::init;
use crate::module::{join, Layer, Mode, Module, Param, Slot};
use crate::Tensor;

/// Fully connected layer over the flattened trailing dimensions of its
/// input. Output shape is `(N, out_features)`.
#[derive(Clone, Debug)]
pub struct Linear {
    /// Shape `(out, in)`.
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
    input_shape: Vec<usize>,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in_features)`, zero bias.
    pub fn new(in_features: usize, out_features: usize, rng: &mut dyn RngCore) -> Self {
        let weight = init::kaiming_normal(&[out_features, in_features], in_features, 1.0, rng);
        Self {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_features])),
            input: None,
            input_shape: Vec::new(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl Module for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let n = x.shape()[0];
        let fin = x.numel() / n;
        assert_eq!(fin, self.in_features(), "linear expects {} features, got {fin}", self.in_features());
        let fo = self.out_features();
        let mut out = Tensor::zeros(&[n, fo]);
        for row in out.data_mut().chunks_mut(fo) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(n, fin, fo, x.data(), false, self.weight.value.data(), true, 1.0, out.data_mut());
        if mode == Mode::Train {
            self.input_shape = x.shape().to_vec();
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("Linear::backward without forward");
        let n = grad_out.shape()[0];
        let fo = self.out_features();
        let fin = self.in_features();
        for row in grad_out.data().chunks(fo) {
            for (b, g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        gemm(fo, n, fin, grad_out.data(), true, x.data(), false, 1.0, self.weight.grad.data_mut());
        let mut dx = Tensor::zeros(&self.input_shape);
        gemm(n, fo, fin, grad_out.data(), false, self.weight.value.data(), false, 0.0, dx.data_mut());
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
    fn flattens_and_projects() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new(2 * 2 * 2, 1, &mut rng);
        lin.weight.value.fill(0.0);
        lin.bias.value.fill(3.5);
        let x = rand_tensor(&[5, 2, 2, 2], &mut rng);
        let y = lin.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), &[5, 1]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(12, 3, &mut rng);
        let x = rand_tensor(&[4, 3, 2, 2], &mut rng);
        check_layer_grads(&mut lin, &x, 1e-6);
    }
}
