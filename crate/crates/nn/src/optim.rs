use std::collections::BTreeMap;

use crate::module::{Module, Slot};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, m: &mut dyn Module) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let moments = &mut self.moments;
        m.visit("", &mut |name, slot| {
            let Slot::Param(p) = slot else { return };
            let (mv, vv) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.value.numel()], vec![0.0; p.value.numel()]));
            let grads = p.grad.data().to_vec();
            for (((w, g), m1), m2) in p.value.data_mut().iter_mut().zip(&grads).zip(mv.iter_mut()).zip(vv.iter_mut()) {
                *m1 = b1 * *m1 + (1.0 - b1) * g;
                *m2 = b2 * *m2 + (1.0 - b2) * g * g;
                let mhat = *m1 / c1;
                let vhat = *m2 / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.grad.fill(0.0);
        });
    }
}
