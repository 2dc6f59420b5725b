//! Scalar losses returning `(value, d value / d input)`.

/// Mean squared error over all elements.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits, numerically stable form.
pub fn bce_with_logits(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), target.len());
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - y) / n
        })
        .collect();
    (loss / n, grad)
}

/// Soft Dice loss `1 - (2·Σpg + s) / (Σp + Σg + s)` with `p = sigmoid(logit)`,
/// pooled over every element. The smoothing `s` makes an all-empty target
/// with an all-negative prediction score a loss near zero.
pub fn soft_dice(logits: &[f64], target: &[f64], smooth: f64) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), target.len());
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let inter: f64 = probs.iter().zip(target).map(|(p, g)| p * g).sum();
    let total: f64 = probs.iter().sum::<f64>() + target.iter().sum::<f64>();
    let num = 2.0 * inter + smooth;
    let den = total + smooth;
    let loss = 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let dl_dp = -(2.0 * g * den - num) / (den * den);
            dl_dp * p * (1.0 - p)
        })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64]) {
        let (_, g) = f(x);
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let num = (f(&xp).0 - f(&xm).0) / 2e-6;
            assert!((num - g[i]).abs() < 1e-7 * (1.0 + num.abs()), "{num} vs {}", g[i]);
        }
    }

    #[test]
    fn mse_value_and_gradient() {
        let (l, _) = mse(&[1.0, 3.0], &[0.0, 0.0]);
        assert_eq!(l, 5.0);
        fd_check(|x| mse(x, &[0.5, -1.0, 2.0]), &[0.1, 0.2, -0.3]);
    }

    #[test]
    fn bce_gradient() {
        fd_check(|x| bce_with_logits(x, &[1.0, 0.0, 1.0]), &[0.3, -2.0, 5.0]);
    }

    #[test]
    fn dice_gradient_and_perfect_overlap() {
        fd_check(|x| soft_dice(x, &[1.0, 0.0, 1.0, 0.0], 1.0), &[0.3, -2.0, 1.5, 0.2]);
        let (l, _) = soft_dice(&[40.0, -40.0], &[1.0, 0.0], 1.0);
        assert!(l < 1e-12);
        let (empty, _) = soft_dice(&[-40.0, -40.0], &[0.0, 0.0], 1.0);
        assert!(empty < 1e-12);
    }
}
