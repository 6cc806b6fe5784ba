mod common;

use common::{cases, check_gradients, random_tensor, rng};
use rand::Rng;
use wsnn::grad::{SurrogateSpec, Var};
use wsnn::lif::{record_update, LifParams, Threshold};
use wsnn::tensor::Tensor;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 50;

fn all_instances(case: fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let e = case(seed);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn omega_gradients() {
    all_instances(cases::omega);
}

#[test]
fn conv_gradients() {
    all_instances(cases::conv);
}

#[test]
fn matmul_gradients() {
    all_instances(cases::matmul);
}

#[test]
fn fused_lif_membrane_gradients() {
    all_instances(cases::fused_lif_membrane);
}

#[test]
fn fused_lif_spike_gradients_follow_surrogate() {
    all_instances(cases::fused_lif_spikes);
}

#[test]
fn window_op_gradients() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 2, 8, 8], 1.0);
        let e = check_gradients(
            std::slice::from_ref(&x),
            &|t, v| {
                let parts: Vec<Var> = [(0, 0), (0, 2), (2, 0), (2, 2)]
                    .iter()
                    .map(|&(y, x)| t.crop(v[0], y, x, 6, 6).unwrap())
                    .collect();
                t.condense([parts[0], parts[1], parts[2], parts[3]])
                    .unwrap()
            },
            seed,
        );
        assert!(e < TOL, "condense seed {seed}: {e}");
        let e = check_gradients(
            std::slice::from_ref(&x),
            &|t, v| {
                let parts: Vec<Var> = [(0, 0), (0, 4), (4, 0), (4, 4)]
                    .iter()
                    .map(|&(y, x)| t.crop(v[0], y, x, 4, 4).unwrap())
                    .collect();
                let tiled = t.tile(&parts, 2, 2).unwrap();
                t.mul(tiled, tiled).unwrap()
            },
            seed,
        );
        assert!(e < TOL, "tile seed {seed}: {e}");
        let e = check_gradients(
            std::slice::from_ref(&x),
            &|t, v| t.resample_nearest(v[0], 3, 5, 4).unwrap(),
            seed,
        );
        assert!(e < TOL, "resample seed {seed}: {e}");
        let e = check_gradients(&[x], &|t, v| t.mean_spatial(v[0]).unwrap(), seed);
        assert!(e < TOL, "mean seed {seed}: {e}");
    }
}

#[test]
fn layer_op_gradients() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 3, 2, 2], 1.0);
        let b = random_tensor(&mut r, &[3], 1.0);
        let e = check_gradients(
            &[x.clone(), b],
            &|t, v| {
                let y = t.add_channel_bias(v[0], v[1]).unwrap();
                let s = t.sigmoid(y);
                let h = t.tanh(y);
                t.mul(s, h).unwrap()
            },
            seed,
        );
        assert!(e < TOL, "gate seed {seed}: {e}");
        let w = random_tensor(&mut r, &[4, 5], 1.0);
        let rb = random_tensor(&mut r, &[5], 1.0);
        let e = check_gradients(
            &[x, w, rb],
            &|t, v| {
                let flat = t.reshape(v[0], &[6, 4]).unwrap();
                let y = t.matmul(flat, v[1]).unwrap();
                let y = t.add_row_bias(y, v[2]).unwrap();
                t.softmax_cross_entropy(y, &[0, 1, 4, 2, 3, 0]).unwrap()
            },
            seed,
        );
        assert!(e < TOL, "head seed {seed}: {e}");
    }
}

#[test]
fn learned_threshold_gradient() {
    // With v fixed, the reset term δ·o contributes -o to dv/dδ.
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let n = r.gen_range(1..5);
        let carried = random_tensor(&mut r, &[n], 1.0);
        let input = random_tensor(&mut r, &[n], 1.0);
        let o = Tensor::from_fn(&[n], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
        let delta = Tensor::scalar(r.gen_range(0.3..0.8));
        let e = check_gradients(
            &[carried, input, o, delta],
            &|t, v| {
                let p = LifParams {
                    detach_reset: false,
                    ..LifParams::with_alpha_delta(0.9, 0.5)
                };
                record_update(
                    t,
                    v[0],
                    v[1],
                    v[2],
                    &p,
                    Threshold::Learned(v[3]),
                    SurrogateSpec::default(),
                )
                .unwrap()
                .0
            },
            seed,
        );
        assert!(e < TOL, "seed {seed}: {e}");
    }
}
