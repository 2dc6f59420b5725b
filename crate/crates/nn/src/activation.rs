use crate::module::{Layer, Mode, Module, Slot};
use crate::Tensor;

/// Leaky rectifier; `slope = 0` gives a plain ReLU.
#[derive(Clone, Debug)]
pub struct LeakyRelu {
    slope: f64,
    positive: Option<Vec<bool>>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope, positive: None }
    }

    pub fn relu() -> Self {
        Self::new(0.0)
    }
}

impl Module for LeakyRelu {
    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, Slot<'_>)) {}
}

impl Layer for LeakyRelu {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut out = x.clone();
        for v in out.data_mut() {
            if *v <= 0.0 {
                *v *= self.slope;
            }
        }
        if mode == Mode::Train {
            self.positive = Some(x.data().iter().map(|&v| v > 0.0).collect());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let positive = self.positive.take().expect("LeakyRelu::backward without forward");
        let mut dx = grad_out.clone();
        for (d, &p) in dx.data_mut().iter_mut().zip(&positive) {
            if !p {
                *d *= self.slope;
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut act = LeakyRelu::new(0.1);
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![-2.0, 0.5, 3.0]);
        let y = act.forward(&x, Mode::Train);
        assert_eq!(y.data(), &[-0.2, 0.5, 3.0]);
        let dx = act.backward(&Tensor::full(&[1, 1, 1, 3], 1.0));
        assert_eq!(dx.data(), &[0.1, 1.0, 1.0]);
    }
}
