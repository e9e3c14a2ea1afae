//! Finite-difference gradient verification.
//!
//! The oracle never touches the reverse-mode path: it re-evaluates the
//! forward function at `x ± h` with recording disabled and compares the
//! central difference against the gradient produced by `backward`.
//! Intended to run with `S = f64`, where `h = 1e-4` leaves ~8 digits of
//! headroom.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};

pub const DEFAULT_H: f64 = 1e-4;

/// Weighted-sum head turning an arbitrary op output into a scalar with a
/// deterministic pseudo-random cotangent, so every output element
/// contributes to the checked gradient.
fn weighted_scalar(y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::new(&y.shape().to_vec(), w).expect("finite weights");
    y.mul(&w).expect("shapes match").sum().expect("sum")
}

/// Deterministically sample up to `k` coordinates of an `n`-element buffer.
pub fn sample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < k {
        picked.insert(rng.random_range(0..n));
    }
    picked.into_iter().collect()
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `sum(W . f(inputs))` w.r.t. `inputs[wrt]` at `coords`.
///
/// Near-zero gradient pairs (both below 1e-7) are treated as matching.
pub fn max_rel_err<F>(inputs: &[Tensor<f64>], f: &F, wrt: usize, coords: &[usize], h: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.requires_grad()).collect();
    let loss = weighted_scalar(&f(&tracked), 7);
    loss.backward().expect("backward");
    let auto = tracked[wrt]
        .grad()
        .expect("gradient populated for checked input");

    let eval = |data: Vec<f64>| -> f64 {
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        probe[wrt] = Tensor::new(&inputs[wrt].shape().to_vec(), data).expect("finite probe");
        no_grad(|| weighted_scalar(&f(&probe), 7).item())
    };

    let base = inputs[wrt].data().to_vec();
    let mut worst = 0.0f64;
    for &c in coords {
        let mut plus = base.clone();
        plus[c] += h;
        let mut minus = base.clone();
        minus[c] -= h;
        let fd = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = auto[c];
        let scale = a.abs().max(fd.abs());
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((a - fd).abs() / scale);
    }
    worst
}

/// Convenience: check every coordinate of `inputs[wrt]`.
pub fn max_rel_err_full<F>(inputs: &[Tensor<f64>], f: &F, wrt: usize, h: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let coords: Vec<usize> = (0..inputs[wrt].numel()).collect();
    max_rel_err(inputs, f, wrt, &coords, h)
}

/// Random tensor in `[-1, 1)` with a fixed seed, for building check inputs.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(shape, data).expect("finite random tensor")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // mul has a correct VJP; composing it with an untracked constant
        // shift makes the FD oracle and autodiff agree...
        let x = random_tensor(&[6], 3);
        let f = |ins: &[Tensor<f64>]| ins[0].mul(&ins[0]).unwrap();
        let err = max_rel_err_full(&[x.clone()], &f, 0, DEFAULT_H);
        assert!(err <= 1e-6, "square should check out, err={err}");

        // ...while an intentionally mismatched forward (evaluating a
        // different function than the recorded one) must be caught.
        let g = |ins: &[Tensor<f64>]| {
            if ins[0].is_tracked() {
                ins[0].mul(&ins[0]).unwrap()
            } else {
                ins[0].scale(3.0)
            }
        };
        let err = max_rel_err_full(&[x], &g, 0, DEFAULT_H);
        assert!(err > 1e-2, "oracle failed to flag a mismatch, err={err}");
    }
}
