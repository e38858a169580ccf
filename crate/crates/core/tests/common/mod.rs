//! Finite-difference gradient oracles shared by the integration tests.
#![allow(dead_code)]

use psrnn::layers::{gru_backward, gru_sequence, ConvLayer, GateActivation, GruParams, PRelu};
use psrnn::model::{Model, NetworkConfig, PsRnnNetwork, PsRnnUnit};
use psrnn::tensor::ConvSpec;
use psrnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// `|a - f| / max(|a|, |f|, floor)`; the floor keeps vanishing gradients
/// from turning round-off into a large ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random linear read-out `L = sum(w * y)`: the upstream gradient is `w`.
pub fn dot(w: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    w.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Central difference of `loss` at entry `i` of the tensor chosen by `select`.
pub fn central<S>(state: &mut S, select: impl Fn(&mut S) -> &mut Tensor<f64>, i: usize, loss: impl Fn(&S) -> f64) -> f64 {
    let x0 = select(state).data()[i];
    select(state).data_mut()[i] = x0 + FD_STEP;
    let up = loss(state);
    select(state).data_mut()[i] = x0 - FD_STEP;
    let down = loss(state);
    select(state).data_mut()[i] = x0;
    (up - down) / (2.0 * FD_STEP)
}

/// Central difference that shrinks the step while the one-sided differences
/// disagree, so a PReLU kink inside the step does not corrupt the estimate.
pub fn kink_safe_central<S>(
    state: &mut S,
    select: impl Fn(&mut S) -> &mut Tensor<f64>,
    i: usize,
    loss: impl Fn(&S) -> f64,
) -> f64 {
    let x0 = select(state).data()[i];
    let mid = loss(state);
    let mut estimate = 0.0;
    for step in [FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0] {
        select(state).data_mut()[i] = x0 + step;
        let up = loss(state);
        select(state).data_mut()[i] = x0 - step;
        let down = loss(state);
        select(state).data_mut()[i] = x0;
        estimate = (up - down) / (2.0 * step);
        let (fwd, bwd) = ((up - mid) / step, (mid - down) / step);
        if (fwd - bwd).abs() <= 1e-4 * fwd.abs().max(bwd.abs()) + 1e-8 {
            break;
        }
    }
    estimate
}

/// Max absolute error relative to the largest entry of either vector.
/// Entries whose true value cancels to zero have no meaningful elementwise
/// relative error, so the comparison is scaled by the whole vector.
pub fn normwise_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let num = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let den = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-12, f64::max);
    num / den
}

/// Indices to probe: all when `len <= k`, else `k` distinct random ones.
pub fn sample_indices(len: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, k).into_vec()
}

/// Worst relative error over conv weights, bias, slopes and input of one random layer.
pub fn conv_check(seed: u64, transposed: bool) -> f64 {
    let mut r = rng(seed);
    let k = [1, 3, 4][r.random_range(0..3)];
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..k.max(1));
    let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
    let spec = ConvSpec { kernel_h: k, kernel_w: k, stride, padding: pad, in_channels: ci, out_channels: co };
    let act = r.random_bool(0.5);
    let mut layer = ConvLayer::<f64>::init(spec, transposed, act, &mut r).unwrap();
    layer.bias = random_tensor(layer.bias.shape(), &mut r, -0.5, 0.5);
    let in_c = if transposed { co } else { ci };
    let h = r.random_range(k.max(2)..=6);
    let w = r.random_range(k.max(2)..=6);
    let x = random_tensor(&[h, w, in_c], &mut r, -1.0, 1.0);
    let (y, cache) = layer.forward(&x).unwrap();
    let g = random_tensor(y.shape(), &mut r, -1.0, 1.0);
    let (gx, grads) = layer.backward(&cache, &g).unwrap();
    let mut state = (layer, x);
    let loss = |s: &(ConvLayer<f64>, Tensor<f64>)| dot(&g, &s.0.forward(&s.1).unwrap().0);
    let mut worst: f64 = 0.0;
    for i in sample_indices(grads.weights.len(), 12, &mut r) {
        let fd = central(&mut state, |s| &mut s.0.weights, i, loss);
        worst = worst.max(rel_err(grads.weights.data()[i], fd));
    }
    for i in 0..grads.bias.len() {
        let fd = central(&mut state, |s| &mut s.0.bias, i, loss);
        worst = worst.max(rel_err(grads.bias.data()[i], fd));
    }
    if let Some(ga) = &grads.alpha {
        for i in 0..ga.len() {
            let fd = central(&mut state, |s| &mut s.0.prelu.as_mut().unwrap().alpha, i, loss);
            worst = worst.max(rel_err(ga.data()[i], fd));
        }
    }
    for i in sample_indices(gx.len(), 12, &mut r) {
        let fd = central(&mut state, |s| &mut s.1, i, loss);
        worst = worst.max(rel_err(gx.data()[i], fd));
    }
    worst
}

pub fn prelu_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..=4);
    let mut p = PRelu::<f64>::new(c, 0.25).unwrap();
    p.alpha = random_tensor(&[c], &mut r, -0.5, 0.9);
    // Keep inputs away from the kink at zero.
    let x = Tensor::new(
        &[3, 3, c],
        (0..9 * c)
            .map(|_| {
                let v: f64 = r.random_range(0.05..1.0);
                if r.random_bool(0.5) { v } else { -v }
            })
            .collect(),
    )
    .unwrap();
    let g = random_tensor(x.shape(), &mut r, -1.0, 1.0);
    let (gx, ga) = p.backward(&x, &g).unwrap();
    let mut state = (p, x);
    let loss = |s: &(PRelu<f64>, Tensor<f64>)| dot(&g, &s.0.forward(&s.1).unwrap());
    let mut worst: f64 = 0.0;
    for i in 0..c {
        let fd = central(&mut state, |s| &mut s.0.alpha, i, loss);
        worst = worst.max(rel_err(ga.data()[i], fd));
    }
    for i in 0..gx.len() {
        let fd = central(&mut state, |s| &mut s.1, i, loss);
        worst = worst.max(rel_err(gx.data()[i], fd));
    }
    worst
}

/// Eight-step BPTT through a small GRU, every parameter and input checked.
pub fn gru_check(seed: u64) -> f64 {
    const STEPS: usize = 8;
    let mut r = rng(seed);
    let (id, hd) = (r.random_range(1..=4), r.random_range(1..=4));
    let mut p = GruParams::<f64>::init(id, hd, &mut r).unwrap();
    p.b = random_tensor(&[hd], &mut r, -0.5, 0.5);
    let xs = random_tensor(&[STEPS, id], &mut r, -1.0, 1.0);
    let h0 = random_tensor(&[hd], &mut r, -0.5, 0.5);
    let g = random_tensor(&[STEPS, hd], &mut r, -1.0, 1.0);
    let act = GateActivation::Sigmoid;
    let run = |p: &GruParams<f64>, xs: &Tensor<f64>, h0: &Tensor<f64>| {
        gru_sequence(p, xs.data().chunks(id).map(|c| c.to_vec()), h0.data(), act).unwrap()
    };
    let steps = run(&p, &xs, &h0);
    let per: Vec<Vec<f64>> = g.data().chunks(hd).map(|c| c.to_vec()).collect();
    let back = gru_backward(&steps, &p, act, None, Some(&per)).unwrap();
    let loss = |s: &(GruParams<f64>, Tensor<f64>, Tensor<f64>)| {
        run(&s.0, &s.1, &s.2)
            .iter()
            .enumerate()
            .map(|(t, st)| st.h.iter().zip(&per[t]).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
    };
    let mut state = (p, xs, h0);
    let mut worst: f64 = 0.0;
    let names = ["wz", "uz", "wr", "ur", "w", "u", "b"];
    for (k, name) in names.iter().enumerate() {
        let analytic = back.params.tensors()[k].1.clone();
        for i in 0..analytic.len() {
            let fd = central(&mut state, |s| s.0.tensors_mut().into_iter().nth(k).unwrap().1, i, loss);
            let e = rel_err(analytic.data()[i], fd);
            assert!(e.is_finite(), "{name}");
            worst = worst.max(e);
        }
    }
    let gx: Vec<f64> = back.x.concat();
    for i in 0..gx.len() {
        let fd = central(&mut state, |s| &mut s.1, i, loss);
        worst = worst.max(rel_err(gx[i], fd));
    }
    for i in 0..hd {
        let fd = central(&mut state, |s| &mut s.2, i, loss);
        worst = worst.max(rel_err(back.h0[i], fd));
    }
    worst
}

/// One PS-RNN unit on a small feature tensor; sampled parameters and inputs.
pub fn unit_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let extent = r.random_range(2..=4);
    let (c, cells) = (r.random_range(1..=2), r.random_range(1..=2));
    let mut u = PsRnnUnit::<f64>::init(extent, c, cells, 3, &mut r).unwrap();
    for g in [&mut u.gru_h, &mut u.gru_v] {
        g.b = random_tensor(g.b.shape(), &mut r, -0.5, 0.5);
    }
    let x = random_tensor(&[extent, extent, c], &mut r, -1.0, 1.0);
    let act = GateActivation::Sigmoid;
    let (y, cache) = u.forward(&x, act).unwrap();
    let g = random_tensor(y.shape(), &mut r, -1.0, 1.0);
    let (gx, grads) = u.backward(&cache, &g, act).unwrap();
    let grads = grads.into_tensors();
    let loss = |s: &(PsRnnUnit<f64>, Tensor<f64>)| dot(&g, &s.0.forward(&s.1, act).unwrap().0);
    let mut state = (u, x);
    let mut worst: f64 = 0.0;
    for (k, ga) in grads.iter().enumerate() {
        for i in sample_indices(ga.len(), 4, &mut r) {
            let fd = central(&mut state, |s| s.0.tensors_mut().into_iter().nth(k).unwrap().1, i, loss);
            worst = worst.max(rel_err(ga.data()[i], fd));
        }
    }
    for i in sample_indices(gx.len(), 6, &mut r) {
        let fd = central(&mut state, |s| &mut s.1, i, loss);
        worst = worst.max(rel_err(gx.data()[i], fd));
    }
    worst
}

/// Full network: `per_layer` sampled entries of every trainable tensor.
/// Returns the worst error and the number of tensors checked.
pub fn network_check(n: usize, seed: u64, per_layer: usize) -> (f64, usize) {
    let mut r = rng(seed);
    let net = PsRnnNetwork::<f64>::init(NetworkConfig::with_pu_size(n), &mut r).unwrap();
    let ctx = random_tensor(&[2 * n, 2 * n], &mut r, 0.0, 1.0);
    let (pred, cache) = net.forward(&ctx).unwrap();
    assert!(pred.data().iter().all(|&v| v > 0.0 && v < 1.0), "prediction saturated the clip");
    let g = random_tensor(pred.shape(), &mut r, -1.0, 1.0);
    let grads = net.backward(&cache, &g).unwrap();
    let loss = |m: &PsRnnNetwork<f64>| dot(&g, &m.predict(&ctx).unwrap());
    let mut m = net;
    let mut worst: f64 = 0.0;
    let count = grads.len();
    for (k, ga) in grads.iter().enumerate() {
        let idx = sample_indices(ga.len(), per_layer, &mut r);
        let analytic: Vec<f64> = idx.iter().map(|&i| ga.data()[i]).collect();
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&i| kink_safe_central(&mut m, |m| m.trainable_mut().into_iter().nth(k).unwrap().1, i, loss))
            .collect();
        worst = worst.max(normwise_err(&analytic, &numeric));
    }
    (worst, count)
}
