#![allow(dead_code)]

pub mod cases;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsnn::grad::{Tape, Var};
use wsnn::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..=scale))
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Loss `Σ r ⊙ f(inputs)` for a fixed random `r`.
fn weighted_loss(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    weights: &Tensor,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Worst relative error over all inputs between tape gradients of
/// `Σ r ⊙ f(inputs)` and central differences.
pub fn check_gradients(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    seed: u64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let mut r = rng(seed ^ 0xabcdef);
    let weights = random_tensor(&mut r, tape.shape(out), 1.0);
    let grads = tape.backward_with(out, weights.clone());
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].shape());
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = perturb(&inputs[i], j, eps);
            minus[i] = perturb(&inputs[i], j, -eps);
            let fp = weighted_loss(&plus, build, &weights);
            let fm = weighted_loss(&minus, build, &weights);
            numeric.push((fp - fm) / (2.0 * eps));
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

pub fn perturb(t: &Tensor, j: usize, eps: f64) -> Tensor {
    let mut d = t.data().to_vec();
    d[j] += eps;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// Legendre polynomial.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Tensor-product Gauss-Legendre integral of `f` over `[a, b]²`.
pub fn integrate_square(f: impl Fn(f64, f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let nodes = gauss_legendre(n);
    let (half, mid) = ((b - a) / 2.0, (a + b) / 2.0);
    let mut s = 0.0;
    for &(x, wx) in &nodes {
        for &(y, wy) in &nodes {
            s += wx * wy * f(mid + half * x, mid + half * y);
        }
    }
    s * half * half
}
