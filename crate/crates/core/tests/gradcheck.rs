//! Finite-difference checks of every differentiable op.

mod common;

use std::sync::Arc;

use common::{fd_check, readout};
use maskvid::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SINGLE_OP_TOL: f64 = 1e-6;

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conv2d_gradients() {
    let inputs = [rnd(&[1, 2, 5, 5], 1), rnd(&[3, 2, 3, 3], 2), rnd(&[3], 3)];
    let err = fd_check(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1).unwrap();
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "conv2d rel err {err}");
}

#[test]
fn strided_conv2d_gradients() {
    let inputs = [rnd(&[2, 3, 6, 6], 4), rnd(&[4, 3, 2, 2], 5), rnd(&[4], 6)];
    let err = fd_check(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 0, 1).unwrap();
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "strided conv2d rel err {err}");
}

#[test]
fn depthwise_conv2d_gradients() {
    let inputs = [rnd(&[2, 3, 5, 5], 7), rnd(&[3, 1, 7, 7], 8), rnd(&[3], 9)];
    let err = fd_check(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 3, 3).unwrap();
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "depthwise conv2d rel err {err}");
}

#[test]
fn grouped_conv2d_gradients() {
    let inputs = [rnd(&[1, 4, 4, 4], 10), rnd(&[6, 2, 3, 3], 11)];
    let err = fd_check(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 1, 2).unwrap();
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "grouped conv2d rel err {err}");
}

#[test]
fn layer_norm_gradients() {
    let inputs = [rnd(&[2, 5, 3, 3], 12), rnd(&[5], 13), rnd(&[5], 14)];
    let err = fd_check(&inputs, |g, v| {
        let y = g.layer_norm_channels(v[0], v[1], v[2], 1e-6).unwrap();
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "layer norm rel err {err}");
}

#[test]
fn grn_gradients() {
    let inputs = [rnd(&[2, 4, 3, 3], 15), rnd(&[4], 16), rnd(&[4], 17)];
    let err = fd_check(&inputs, |g, v| {
        let y = g.grn(v[0], v[1], v[2], None).unwrap();
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "grn rel err {err}");
}

#[test]
fn masked_grn_gradients() {
    let keep: Arc<[bool]> = (0..18).map(|i| i % 3 != 1).collect::<Vec<_>>().into();
    let inputs = [rnd(&[2, 4, 3, 3], 18), rnd(&[4], 19), rnd(&[4], 20)];
    let err = fd_check(&inputs, |g, v| {
        let y = g.grn(v[0], v[1], v[2], Some(keep.clone())).unwrap();
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "masked grn rel err {err}");
}

#[test]
fn gelu_gradients() {
    let inputs = [Tensor::rand_uniform(&[40], -4.0, 4.0, &mut ChaCha8Rng::seed_from_u64(21))];
    let err = fd_check(&inputs, |g, v| {
        let y = g.gelu(v[0]);
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "gelu rel err {err}");
}

#[test]
fn linear_gradients() {
    let inputs = [rnd(&[3, 5], 22), rnd(&[4, 5], 23), rnd(&[4], 24)];
    let err = fd_check(&inputs, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        readout(g, y)
    });
    assert!(err < SINGLE_OP_TOL, "linear rel err {err}");
}

#[test]
fn mask_fill_and_patch_gradients() {
    let keep: Arc<[bool]> = (0..8).map(|i| i % 2 == 0).collect::<Vec<_>>().into();
    let inputs = [rnd(&[2, 3, 2, 2], 25), rnd(&[3], 26)];
    let err = fd_check(&inputs, |g, v| {
        let m = g.mask_sites(v[0], keep.clone()).unwrap();
        let f = g.fill_masked(m, v[1], keep.clone()).unwrap();
        let p = g.to_patches(f).unwrap();
        readout(g, p)
    });
    assert!(err < SINGLE_OP_TOL, "mask/fill/patch rel err {err}");
}

#[test]
fn masked_patch_mse_gradients() {
    let masked: Arc<[bool]> = vec![true, false, true, true, false, false].into();
    let inputs = [rnd(&[2, 3, 4], 27), rnd(&[2, 3, 4], 28)];
    let err = fd_check(&inputs, |g, v| g.masked_patch_mse(v[0], v[1], masked.clone()).unwrap());
    assert!(err < SINGLE_OP_TOL, "masked mse rel err {err}");
}

#[test]
fn composed_graph_gradients() {
    let inputs = [
        rnd(&[2, 3, 6, 6], 29),
        rnd(&[4, 3, 3, 3], 30),
        rnd(&[4], 31),
        rnd(&[4], 32),
        rnd(&[4, 1, 3, 3], 33),
    ];
    let err = fd_check(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 1, 1).unwrap();
        let y = g.layer_norm_channels(y, v[2], v[3], 1e-6).unwrap();
        let y = g.gelu(y);
        let z = g.conv2d(y, v[4], None, 1, 1, 4).unwrap();
        let y = g.add(y, z).unwrap();
        let y = g.grn(y, v[2], v[3], None).unwrap();
        readout(g, y)
    });
    assert!(err < 1e-3, "composed rel err {err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = rnd(&[1, 2, 4, 4], 34);
    let w = rnd(&[3, 2, 3, 3], 35);
    let grads = |a: f64, b: f64| {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let y = g.conv2d(xv, wv, None, 1, 1, 1).unwrap();
        let y = g.gelu(y);
        let l1 = readout(&mut g, y);
        let l2 = g.sum(y);
        let s1 = g.scale(l1, a);
        let s2 = g.scale(l2, b);
        let l = g.add(s1, s2).unwrap();
        g.backward(l).unwrap();
        (g.grad(xv).unwrap(), g.grad(wv).unwrap())
    };
    let (a, b) = (0.7, -1.3);
    let (gx1, gw1) = grads(1.0, 0.0);
    let (gx2, gw2) = grads(0.0, 1.0);
    let (gx, gw) = grads(a, b);
    for (full, (p1, p2)) in [(gx, (gx1, gx2)), (gw, (gw1, gw2))] {
        for i in 0..full.len() {
            let want = a * p1.data()[i] + b * p2.data()[i];
            assert!((full.data()[i] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_replay_is_bitwise_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(rnd(&[2, 3, 8, 8], 36));
        let w = g.constant(rnd(&[5, 3, 3, 3], 37));
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        let y = g.gelu(y);
        g.value(y).clone()
    };
    assert!(run().bit_eq(&run()));
}
