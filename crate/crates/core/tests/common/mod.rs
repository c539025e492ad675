//! Shared test oracles. Deliberately independent of the library's own
//! numerics: finite differences, naive loops, closed forms.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbctm::tensor::{Graph, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-2, 2].
pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-2.0..2.0))
}

/// Values in [-2, -0.1] U [0.1, 2], away from kinks at zero.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.gen_range(0.1..2.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Normwise relative error between two gradient vectors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
        .max(1e-12);
    diff / scale
}

/// Compares reverse-mode gradients of `sum(f(inputs) * weights)` with central
/// finite differences for every input element. Returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>, TensorError>,
{
    // Random projection so every output element influences the scalar.
    let project = |g: &Graph<f64>, out: Var<'_, f64>| -> f64 {
        let v = out.value();
        let mut r = rng(4242);
        let w: Vec<f64> = (0..v.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let _ = g;
        v.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone()).unwrap()).collect();
        let out = f(&g, &vars).unwrap();
        project(&g, out)
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone()).unwrap()).collect();
    let out = f(&g, &vars).unwrap();
    let v = out.value();
    let mut r = rng(4242);
    let w = Tensor::from_fn(v.shape(), |_| r.gen_range(-1.0..1.0));
    let wv = g.constant(w).unwrap();
    let loss = out.mul(wv).unwrap().sum().unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var).to_vec();
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = plus[k].to_vec();
            d[i] += FD_STEP;
            plus[k] = Tensor::new(inputs[k].shape(), d).unwrap();
            let mut d = minus[k].to_vec();
            d[i] -= FD_STEP;
            minus[k] = Tensor::new(inputs[k].shape(), d).unwrap();
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// `int_0^t g^2` for `g^2(tau) = 2 ln(smax/smin) smin^2 (smax/smin)^(2 tau)`,
/// by the composite trapezoid rule.
pub fn quadrature_sigma_sq(smin: f64, smax: f64, t: f64, panels: usize) -> f64 {
    let k = smax / smin;
    let g2 = |tau: f64| 2.0 * k.ln() * smin * smin * k.powf(2.0 * tau);
    let h = t / panels as f64;
    let inner: f64 = (1..panels).map(|i| g2(i as f64 * h)).sum();
    h * (0.5 * (g2(0.0) + g2(t)) + inner)
}

/// Mean and standard deviation at accumulated variance `v_t` of a driftless
/// diffusion pinned to `x0` at variance 0 and to `x1` at variance `v_total`
/// (a time-changed Brownian bridge).
pub fn pinned_walk_moments(x0: f64, x1: f64, v_t: f64, v_total: f64) -> (f64, f64) {
    let frac = v_t / v_total;
    (x0 + frac * (x1 - x0), (v_t * (v_total - v_t) / v_total).sqrt())
}
