use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::module::{Layer, Mode, Slot};
use crate::Tensor;

pub fn rand_tensor(shape: &[usize], rng: &mut dyn RngCore) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn probe(layer: &mut dyn Layer, x: &Tensor, r: &Tensor) -> f64 {
    let y = layer.forward(x, Mode::Train);
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Compare analytic input and parameter gradients of `L = Σ r·layer(x)`
/// against central differences.
pub fn check_layer_grads(layer: &mut dyn Layer, x: &Tensor, h: f64) {
    let mut rng = rand_chacha::ChaCha8Rng::from_seed_u64(99);
    let y = layer.forward(x, Mode::Train);
    let r = rand_tensor(y.shape(), &mut rng);
    let dx = layer.backward(&r);

    let close = |a: f64, n: f64, what: &str| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        assert!(err < 1e-5, "{what}: analytic {a} vs numeric {n}");
    };
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let num = (probe(layer, &xp, &r) - probe(layer, &xm, &r)) / (2.0 * h);
        close(dx.data()[i], num, &format!("input[{i}]"));
    }

    let mut grads = Vec::new();
    layer.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            grads.push((name.to_string(), p.grad.clone()));
        }
    });
    for (name, grad) in grads {
        for i in 0..grad.numel() {
            nudge(layer, &name, i, h);
            let lp = probe(layer, x, &r);
            nudge(layer, &name, i, -2.0 * h);
            let lm = probe(layer, x, &r);
            nudge(layer, &name, i, h);
            close(grad.data()[i], (lp - lm) / (2.0 * h), &format!("{name}[{i}]"));
        }
    }
}

fn nudge(layer: &mut dyn Layer, name: &str, i: usize, delta: f64) {
    layer.visit("", &mut |n, slot| {
        if let Slot::Param(p) = slot {
            if n == name {
                p.value.data_mut()[i] += delta;
            }
        }
    })
}

trait SeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl SeedU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}
