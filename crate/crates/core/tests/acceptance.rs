//! Acceptance suite: one PASS/FAIL line per criterion, all run in sequence
//! so the timing limits hold on a single core.

mod common;

use std::io::Write;
use std::time::Instant;

use common::*;
use psrnn::data::{synth_texture, synthetic_corpus, CorpusSpec, GrayImage, TextureFamily};
use psrnn::eval::{audit_report, evaluate, EvalConfig, ModelSet, Predictor};
use psrnn::intra::{
    best_mode_search, block_satd, predict_mode, Choice, IntraConfig, IntraMode, ReferenceSamples,
};
use psrnn::layers::{gru_forward, gru_sequence, GateActivation, GruParams};
use psrnn::model::{Model, NetworkConfig, PsRnnNetwork, PsRnnPlus, PsRnnUnit, SavedModel};
use psrnn::satd::{satd, satd_loss_grad, smoothed_satd, HadamardMatrix, SatdConfig};
use psrnn::train::{compare_losses, init_network, split_validation, train_split, LossKind, TrainConfig};
use psrnn::Tensor;
use rand::Rng;

struct Outcome {
    results: Vec<(String, bool)>,
}

impl Outcome {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        // Direct writes bypass the test harness capture, so the lines always show.
        let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
        let _ = std::io::stderr().write_all(line.as_bytes());
        self.results.push((name.to_string(), pass));
    }
}

fn naive_satd(d: &[f64], n: usize) -> f64 {
    let h = HadamardMatrix::new(n).unwrap();
    let hm = |i: usize, j: usize| h.get(i, j) as f64;
    let mut hd = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            hd[i * n + j] = (0..n).map(|k| hm(i, k) * d[k * n + j]).sum();
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += (0..n).map(|k| hd[i * n + k] * hm(k, j)).sum::<f64>().abs();
        }
    }
    total
}

fn satd_oracle(out: &mut Outcome) {
    let t = Instant::now();
    let mut r = rng(101);
    let mut mismatches = 0;
    for i in 0..500 {
        let n = if i % 2 == 0 { 4 } else { 8 };
        // Residues on a 1/256 grid keep every partial sum exact in f64.
        let d: Vec<f64> = (0..n * n).map(|_| r.random_range(-512..=512) as f64 / 256.0).collect();
        let cfg = SatdConfig { partition: n, ..SatdConfig::default() };
        if satd(&Tensor::new(&[n, n], d.clone()).unwrap(), &cfg).unwrap() != naive_satd(&d, n) {
            mismatches += 1;
        }
    }
    let mut orth = true;
    for n in [1usize, 2, 4, 8, 16, 32] {
        let h = HadamardMatrix::new(n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let s: i64 = (0..n).map(|k| (h.get(i, k) * h.get(j, k)) as i64).sum();
                orth &= s == if i == j { n as i64 } else { 0 };
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    out.record(
        "1 satd-oracle",
        mismatches == 0 && orth && secs < 5.0,
        format!("{mismatches}/500 mismatches, H*H^T=nI for n<=32: {orth}, {secs:.2} s"),
    );
}

fn satd_gradient(out: &mut Outcome) {
    let t = Instant::now();
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = if i % 2 == 0 { 4 } else { 8 };
        let eps = if i % 4 < 2 { 1e-6 } else { 1e-8 };
        let cfg = SatdConfig { partition: 4, epsilon: eps };
        let d = random_tensor(&[n, n], &mut r, -1.0, 1.0);
        let g = satd_loss_grad(&d, &cfg).unwrap();
        let mut state = d.clone();
        let fd: Vec<f64> = (0..n * n).map(|k| central(&mut state, |s| s, k, |s| smoothed_satd(s, &cfg).unwrap())).collect();
        worst = worst.max(normwise_err(g.data(), &fd));
    }
    let ones = Tensor::<f64>::full(&[8, 8], 1.0).unwrap();
    let g1 = satd_loss_grad(&ones, &SatdConfig::default()).unwrap();
    let ones_err = g1.data().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    out.record(
        "2 satd-gradient",
        worst < 1e-4 && ones_err < 1e-3 && secs < 10.0,
        format!("max normwise rel err {worst:.2e} on 200 residues, all-ones |err| {ones_err:.2e}, {secs:.2} s"),
    );
}

fn layer_gradients(out: &mut Outcome) {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut layer = |name: &str, f: &dyn Fn(u64) -> f64| {
        let worst = (0..100).map(|s| f(s)).fold(0.0, f64::max);
        ok &= worst < 1e-3;
        lines.push(format!("{name} {worst:.1e}"));
    };
    layer("conv", &|s| conv_check(s, false));
    layer("deconv", &|s| conv_check(1000 + s, true));
    layer("prelu", &prelu_check);
    layer("gru8", &gru_check);
    layer("unit", &unit_check);
    for n in [4, 8] {
        let (worst, tensors) = network_check(n, 7, 20);
        ok &= worst < 1e-3;
        lines.push(format!("net{n} {worst:.1e} normwise over {tensors} tensors"));
    }
    let secs = t.elapsed().as_secs_f64();
    out.record(
        "3 layer-gradients",
        ok && secs < 300.0,
        format!("{} (100 instances per layer, 20 params per network tensor), {secs:.1} s", lines.join(", ")),
    );
}

fn gru_contract(out: &mut Outcome) {
    let mut r = rng(303);
    let mut gates_ok = true;
    for _ in 0..100 {
        let (id, hd) = (r.random_range(1..=6), r.random_range(1..=6));
        let p = GruParams::<f64>::init(id, hd, &mut r).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..id).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        for s in gru_sequence(&p, xs, &vec![0.0; hd], GateActivation::Sigmoid).unwrap() {
            gates_ok &= s.z.iter().chain(&s.r).all(|&g| g > 0.0 && g < 1.0);
        }
    }
    // Update gate saturated by a +20 offset: the state is copied.
    let mut copy_worst: f64 = 0.0;
    for _ in 0..50 {
        let (id, hd) = (r.random_range(2..=5), r.random_range(1..=5));
        let mut p = GruParams::<f64>::init(id, hd, &mut r).unwrap();
        p.uz = Tensor::zeros(&[hd, hd]).unwrap();
        p.wz = Tensor::zeros(&[hd, id]).unwrap();
        for k in 0..hd {
            p.wz.set(&[k, 0], 20.0);
        }
        let mut x: Vec<f64> = (0..id).map(|_| r.random_range(-0.1..0.1)).collect();
        x[0] = 1.0;
        let h: Vec<f64> = (0..hd).map(|_| r.random_range(-1.0..1.0)).collect();
        let s = gru_forward(&p, &x, &h, GateActivation::Sigmoid).unwrap();
        let d = s.h.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        copy_worst = copy_worst.max(d);
    }
    // Perturbing plane k leaves every earlier plane of the sweep unchanged and changes plane k.
    let mut causal = true;
    let unit = PsRnnUnit::<f64>::init(6, 2, 3, 3, &mut r).unwrap();
    let x = random_tensor(&[6, 6, 2], &mut r, -1.0, 1.0);
    let act = GateActivation::Sigmoid;
    let (h0, v0) = (unit.horizontal_states(&x, act).unwrap(), unit.vertical_states(&x, act).unwrap());
    for k in 0..6 {
        let mut xr = x.clone();
        for c in 0..6 {
            xr.set(&[k, c, 0], x.get(&[k, c, 0]) + 0.5);
        }
        let hr = unit.horizontal_states(&xr, act).unwrap();
        let mut xc = x.clone();
        for row in 0..6 {
            xc.set(&[row, k, 1], x.get(&[row, k, 1]) - 0.5);
        }
        let vc = unit.vertical_states(&xc, act).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                for c in 0..3 {
                    let dh = hr.get(&[a, b, c]) != h0.get(&[a, b, c]);
                    let dv = vc.get(&[b, a, c]) != v0.get(&[b, a, c]);
                    causal &= if a < k { !dh && !dv } else { true };
                }
            }
        }
        causal &= (0..6).any(|b| hr.get(&[k, b, 0]) != h0.get(&[k, b, 0]));
        causal &= (0..6).any(|b| vc.get(&[b, k, 0]) != v0.get(&[b, k, 0]));
    }
    out.record(
        "4 gru-contract",
        gates_ok && copy_worst < 1e-6 && causal,
        format!("gates in (0,1): {gates_ok}, copy-gate max |h_t-h_(t-1)| {copy_worst:.1e}, sweep causality: {causal}"),
    );
}

fn refs_from(n: usize, f: impl Fn(i32, i32) -> f64) -> ReferenceSamples {
    let top: Vec<_> = (-1..2 * n as i32).map(|x| Some(f(x, -1))).collect();
    let left: Vec<_> = (0..2 * n as i32).map(|y| Some(f(-1, y))).collect();
    ReferenceSamples::from_samples(n, &top, &left, 0.5).unwrap()
}

fn baseline(out: &mut Outcome) {
    let mut golden = true;
    let mut r = rng(404);
    for n in [4usize, 8, 16, 32] {
        let c = r.random_range(0.0..1.0);
        let flat = refs_from(n, |_, _| c);
        let dc = predict_mode(&flat, IntraMode::DC, true).unwrap();
        golden &= dc.data().iter().all(|&v| (v - c).abs() < 1e-12);
        let refs = refs_from(n, |x, y| ((x * 5 + y * 11).rem_euclid(23)) as f64 / 22.0);
        let h = predict_mode(&refs, IntraMode::HORIZONTAL, false).unwrap();
        let v = predict_mode(&refs, IntraMode::VERTICAL, false).unwrap();
        for y in 0..n {
            for x in 0..n {
                golden &= h.get(&[y, x]) == refs.left[y] && v.get(&[y, x]) == refs.top[x + 1];
            }
        }
        // Planar is the mean of the horizontal and vertical linear blends.
        let (a, b, c0) = (0.004, 0.006, 0.2);
        let lin = refs_from(n, |x, y| c0 + a * x as f64 + b * y as f64);
        let p = predict_mode(&lin, IntraMode::PLANAR, false).unwrap();
        let mut worst: f64 = 0.0;
        for y in 0..n {
            for x in 0..n {
                let top_right = c0 + a * n as f64 - b;
                let bottom_left = c0 - a + b * n as f64;
                let hor = (n - 1 - x) as f64 * (c0 - a + b * y as f64) + (x + 1) as f64 * top_right;
                let ver = (n - 1 - y) as f64 * (c0 + a * x as f64 - b) + (y + 1) as f64 * bottom_left;
                worst = worst.max((p.get(&[y, x]) - (hor + ver) / (2 * n) as f64).abs());
            }
        }
        golden &= worst < 1.0 / 255.0;
    }
    let cfg = IntraConfig::default();
    let mut agree = 0;
    for i in 0..200 {
        let n = [4, 8, 16, 32][i % 4];
        let top: Vec<Option<f64>> = (0..=2 * n).map(|_| r.random_bool(0.9).then(|| r.random_range(0.0..1.0))).collect();
        let left: Vec<Option<f64>> = (0..2 * n).map(|_| r.random_bool(0.9).then(|| r.random_range(0.0..1.0))).collect();
        let refs = ReferenceSamples::from_samples(n, &top, &left, 0.5).unwrap();
        let target = Tensor::new(&[n, n], (0..n * n).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
        let lambda = r.random_range(0.0..60.0);
        let best = best_mode_search(&refs, &target, lambda, &cfg).unwrap();
        let costs: Vec<f64> = IntraMode::all()
            .map(|m| {
                let p = predict_mode(&refs, m, cfg.smoothing).unwrap();
                block_satd(&p, &target, &cfg.satd).unwrap() + lambda * cfg.mode_bits
            })
            .collect();
        let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let first = costs.iter().position(|&c| c == min).unwrap();
        if best.total == min && best.choice == Choice::Mode(IntraMode::new(first).unwrap()) {
            agree += 1;
        }
    }
    out.record(
        "5 baseline",
        golden && agree == 200,
        format!("golden DC/H/V/planar: {golden}, exhaustive oracle agreement {agree}/200"),
    );
}

fn held_out_images() -> Vec<GrayImage> {
    let mut r = rng(9_999);
    (0..8)
        .map(|i| {
            let fam = [TextureFamily::Directional, TextureFamily::Sinusoid][i % 2];
            synth_texture(&fam.draw(64, &mut r), 64, 64, 0.0, r.random()).unwrap()
        })
        .collect()
}

fn smoke_and_rdo(out: &mut Outcome) {
    let t = Instant::now();
    let data = synthetic_corpus(&CorpusSpec::new(8, 50_000), 1).unwrap();
    let cfg = TrainConfig::default();
    let (tr, val) = split_validation(&data, cfg.validation_fraction, cfg.seed).unwrap();
    let net = init_network(NetworkConfig::with_pu_size(8), 1).unwrap();
    let result = train_split(net, &tr, &val, &cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (init, best) = (result.initial().val_satd, result.best().val_satd);
    let drop = 100.0 * (init - best) / init;
    out.record(
        "6 smoke-training",
        drop >= 30.0 && secs < 900.0,
        format!("val SATD {init:.3} -> {best:.3} ({drop:.1}% drop, best iteration {}), {secs:.0} s", result.best_iteration),
    );

    let images = held_out_images();
    let ecfg = EvalConfig::default();
    let mut set = ModelSet::new();
    set.insert(SavedModel::Network(result.model));
    let predictor = Predictor::Models(set);
    let report = evaluate(&predictor, &images, 32, &ecfg).unwrap();
    let audited = audit_report(&report, &predictor, &images, 32, &ecfg).is_ok();
    let oracle = evaluate(&Predictor::Oracle, &images, 32, &ecfg).unwrap();
    let s = &report.summary;
    out.record(
        "8 rdo-utility",
        s.selection_rate_pct > 10.0
            && s.cost_reduction_pct > 0.0
            && oracle.summary.selection_rate_pct == 100.0
            && audited,
        format!(
            "{} blocks at qp 32: selection {:.1}%, cost reduction {:.2}%, oracle selection {:.1}%, audit {audited}",
            s.blocks, s.selection_rate_pct, s.cost_reduction_pct, oracle.summary.selection_rate_pct
        ),
    );
}

fn loss_ordering(out: &mut Outcome) {
    let t = Instant::now();
    let data = synthetic_corpus(&CorpusSpec::new(4, 12_000), 21).unwrap();
    let cfg = TrainConfig { total_iters: 1500, batch_size: 16, pu_size: 4, validation_fraction: 0.05, ..TrainConfig::default() };
    let net = NetworkConfig::with_pu_size(4);
    let cmp = compare_losses(&data, &net, &cfg, &[1, 2, 3], (LossKind::Satd, LossKind::Mse)).unwrap();
    let per: Vec<String> = cmp
        .rows
        .iter()
        .map(|r| format!("seed {} {:.3}/{:.3}", r.seed, r.satd_model.satd, r.mse_model.satd))
        .collect();
    out.record(
        "7 satd-vs-mse",
        cmp.median_satd_of_satd < cmp.median_satd_of_mse,
        format!(
            "median val SATD: SATD-trained {:.4} vs MSE-trained {:.4} ({}), {:.0} s",
            cmp.median_satd_of_satd,
            cmp.median_satd_of_mse,
            per.join(", "),
            t.elapsed().as_secs_f64()
        ),
    );
}

fn variable_sizes(out: &mut Outcome) {
    let mut r = rng(505);
    let mut shapes = true;
    for n in [4usize, 8, 16, 32] {
        let net = PsRnnNetwork::<f32>::init(NetworkConfig::with_pu_size(n), &mut r).unwrap();
        let ctx = Tensor::full(&[2 * n, 2 * n], 0.3f32).unwrap();
        let p = net.predict(&ctx).unwrap();
        shapes &= p.shape() == [n, n] && p.data().iter().all(|v| (0.0..=1.0).contains(v));
    }
    let base = PsRnnNetwork::<f32>::init(NetworkConfig::default(), &mut r).unwrap();
    let mut ratios = Vec::new();
    let mut plus_shapes = true;
    for n in [4usize, 16, 32] {
        let plus = PsRnnPlus::build(base.clone(), n, &mut r).unwrap();
        let ctx = Tensor::full(&[2 * n, 2 * n], 0.3f32).unwrap();
        let p = plus.predict(&ctx).unwrap();
        plus_shapes &= p.shape() == [n, n] && p.data().iter().all(|v| (0.0..=1.0).contains(v));
        ratios.push((n, plus.overhead_ratio()));
    }
    let base_pred = base.predict(&Tensor::full(&[16, 16], 0.3f32).unwrap()).unwrap();
    plus_shapes &= base_pred.shape() == [8, 8];
    let worst = ratios.iter().map(|r| r.1).fold(0.0, f64::max);
    let listed: Vec<String> = ratios.iter().map(|(n, x)| format!("N={n} {:.1}%", 100.0 * x)).collect();
    out.record(
        "9 variable-block-size",
        shapes && plus_shapes && worst <= 0.10,
        format!("per-N shapes: {shapes}, PS-RNN+ shapes: {plus_shapes}, overhead {}", listed.join(", ")),
    );
}

fn determinism(out: &mut Outcome) {
    let data = synthetic_corpus(&CorpusSpec::new(4, 2_000), 31).unwrap();
    let images = held_out_images();
    let run = |threads: usize| {
        let cfg = TrainConfig { total_iters: 60, batch_size: 8, pu_size: 4, validation_fraction: 0.05, threads, ..TrainConfig::default() };
        let (tr, val) = split_validation(&data, cfg.validation_fraction, cfg.seed).unwrap();
        let res = train_split(init_network(NetworkConfig::with_pu_size(4), 5).unwrap(), &tr, &val, &cfg).unwrap();
        let weights = SavedModel::Network(res.model.clone()).to_file().to_bytes().unwrap();
        let mut set = ModelSet::new();
        set.insert(SavedModel::Network(res.model));
        let ecfg = EvalConfig { block_sizes: vec![4], threads, ..EvalConfig::default() };
        let rep = evaluate(&Predictor::Models(set), &images, 32, &ecfg).unwrap();
        (res.log.to_csv(), weights, rep.blocks_csv(), rep.summary_json())
    };
    let a = run(1);
    let b = run(1);
    let c = run(2);
    out.record(
        "10 determinism",
        a == b && a == c,
        format!("repeat identical: {}, 2-thread identical: {}", a == b, a == c),
    );
}

#[test]
fn acceptance() {
    let mut out = Outcome { results: Vec::new() };
    satd_oracle(&mut out);
    satd_gradient(&mut out);
    layer_gradients(&mut out);
    gru_contract(&mut out);
    baseline(&mut out);
    smoke_and_rdo(&mut out);
    loss_ordering(&mut out);
    variable_sizes(&mut out);
    determinism(&mut out);
    let failed: Vec<&str> = out.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    let summary = format!("{} of {} criteria passed\n", out.results.len() - failed.len(), out.results.len());
    let _ = std::io::stderr().write_all(summary.as_bytes());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
