//! Random gradient-check instances shared by the gradient tests and the
//! acceptance run. Each returns the worst relative error of one instance.

use rand::Rng;
use wsnn::fusion::FusionConfig;
use wsnn::grad::{SurrogateSpec, Tape, Var};
use wsnn::lif::{record_update, LifParams, Threshold};
use wsnn::tensor::Tensor;

use super::{check_gradients, random_tensor, rel_err, rng};

pub fn omega(seed: u64) -> f64 {
    let mut r = rng(seed);
    let theta = r.gen_range(0.1..0.9);
    let n = r.gen_range(1..6);
    let a = random_tensor(&mut r, &[n], 3.0);
    let b = random_tensor(&mut r, &[n], 3.0);
    check_gradients(&[a, b], &|t, v| t.omega(v[0], v[1], theta).unwrap(), seed)
}

pub fn conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, ci, co) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
    let k = r.gen_range(1..4);
    let stride = r.gen_range(1..3);
    let pad = r.gen_range(0..2);
    let h = r.gen_range(k.max(2)..6);
    let x = random_tensor(&mut r, &[b, ci, h, h + 1], 1.0);
    let w = random_tensor(&mut r, &[co, ci, k, k], 1.0);
    check_gradients(
        &[x, w],
        &|t, v| t.conv2d(v[0], v[1], stride, pad).unwrap(),
        seed,
    )
}

pub fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let a = random_tensor(&mut r, &[m, k], 1.0);
    let b = random_tensor(&mut r, &[k, n], 1.0);
    check_gradients(&[a, b], &|t, v| t.matmul(v[0], v[1]).unwrap(), seed)
}

pub fn fused_membrane(
    t: &mut Tape,
    v: &[Var],
    o_prev: &Tensor,
    theta: f64,
    alpha: f64,
    detach: bool,
) -> (Var, Var) {
    let params = LifParams {
        detach_reset: detach,
        ..LifParams::with_alpha_delta(alpha, 0.5)
    };
    let fusion = FusionConfig::with_theta(theta);
    let fused = fusion.fuse(t, v[0], v[1]).unwrap();
    let o = match v.get(3) {
        Some(&o) => o,
        None => t.constant(o_prev.clone()),
    };
    record_update(
        t,
        fused,
        v[2],
        o,
        &params,
        Threshold::Fixed(0.5),
        SurrogateSpec::default(),
    )
    .unwrap()
}

/// `[m_group, m_layer, current, o_prev]`, θ and α.
pub fn lif_instance(seed: u64) -> (Vec<Tensor>, f64, f64) {
    let mut r = rng(seed);
    let n = r.gen_range(1..6);
    let inputs = vec![
        random_tensor(&mut r, &[n], 2.0),
        random_tensor(&mut r, &[n], 2.0),
        random_tensor(&mut r, &[n], 1.0),
        Tensor::from_fn(&[n], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }),
    ];
    (inputs, r.gen_range(0.1..0.9), r.gen_range(0.5..1.0))
}

/// Membrane path by finite differences, with the reset detached and attached.
pub fn fused_lif_membrane(seed: u64) -> f64 {
    let (inputs, theta, alpha) = lif_instance(seed);
    let o = inputs[3].clone();
    let detached = check_gradients(
        &inputs[..3],
        &|t, v| fused_membrane(t, v, &o, theta, alpha, true).0,
        seed,
    );
    // Reset term attached: previous spikes get the -δ gradient as well.
    let attached = check_gradients(
        &inputs,
        &|t, v| fused_membrane(t, v, &o, theta, alpha, false).0,
        seed,
    );
    detached.max(attached)
}

/// Spike path: d(Σ r·s)/d inputs must equal d(Σ r·σ'(v)·v)/d inputs with
/// the surrogate factor σ'(v) frozen at the evaluation point.
pub fn fused_lif_spikes(seed: u64) -> f64 {
    let surrogate = SurrogateSpec::default();
    let (inputs, theta, alpha) = lif_instance(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let (v, s) = fused_membrane(&mut tape, &vars[..3], &inputs[3], theta, alpha, true);
    let mut r = rng(seed + 1000);
    let w = random_tensor(&mut r, tape.shape(s), 1.0);
    let grads = tape.backward_with(s, w.clone());
    let factor = tape.value(v).map(|x| surrogate.derivative(x, 0.5));
    let seed_v = w.zip_map(&factor, |a, b| a * b).unwrap();
    let reference = tape.backward_with(v, seed_v);
    vars[..3]
        .iter()
        .map(|x| {
            let a = grads.get_or_zeros(*x, tape.shape(*x));
            let b = reference.get_or_zeros(*x, tape.shape(*x));
            rel_err(a.data(), b.data())
        })
        .fold(0.0, f64::max)
}
