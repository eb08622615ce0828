//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or exceeds its time limit.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fenkit::cost::{conv_macs, fen_cost, fen_layer_costs, lda_overhead, LdaOverheadParams};
use fenkit::data::{parse_cifar10, SyntheticSpec, CIFAR_RECORD_BYTES};
use fenkit::eval::{evaluate_fen, fit_reconstructor, psnr, psnr_from_mse, EvalHyper, TrainHyper, DEFAULT_PSNR_CAP};
use fenkit::fen::{derive_fen, FenConfig};
use fenkit::linalg::Matrix;
use fenkit::net::{load_netspec, save_netspec, InputShape, LayerSpec, PretrainedNet};
use fenkit::planner::{
    choose_topology, compare_settings, fisher_scores_at, full_representations, per_channel_entries,
    CharacterizationTable, CompareOptions, ConstraintSet, GridEntry, Provenance, PruneCounts, Topology,
};
use fenkit::repr::{decode, encode, read_representations};
use fenkit::scoring::{class_scatter, fisher_score, prune_and_select, rank_channels, ScatterWeighting};
use fenkit::seed::rng_for;
use fenkit::tensor::{conv2d, maxpool2x2, relu, FilterBank, Tensor};
use fenkit::zoo;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Largest generalized eigenvalue through `S_w^{-1/2}` from a full symmetric
/// eigendecomposition.
fn dense_fisher(sb: &Matrix, sw: &Matrix, eps: f64) -> f64 {
    let n = sb.rows();
    let mut w = nalgebra::DMatrix::from_row_slice(n, n, sw.data());
    for i in 0..n {
        w[(i, i)] += eps;
    }
    let b = nalgebra::DMatrix::from_row_slice(n, n, sb.data());
    let eig = w.symmetric_eigen();
    let inv_sqrt = nalgebra::DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    let w_is = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let m = &w_is * b * &w_is;
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigen().eigenvalues.max()
}

fn fisher_oracle() -> Outcome {
    let mut rng = rng_for(1, "acceptance/fisher", 0);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let dim = rng.random_range(1..=10);
        let k = rng.random_range(2..=4);
        let n = dim + k + rng.random_range(4..40);
        let offsets: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| 2.0 * gaussian(&mut rng)).collect()).collect();
        let spread: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..dim).map(|d| offsets[l][d] + spread[d] * gaussian(&mut rng)).collect())
            .collect();
        let rows = Matrix::from_rows(&rows).map_err(fail)?;
        let weighting = if case % 2 == 0 { ScatterWeighting::Unweighted } else { ScatterWeighting::ClassSize };
        let sp = class_scatter(&rows, &labels, weighting).map_err(fail)?;
        let eps = if case % 3 == 0 { 0.0 } else { rng.random_range(1e-4..1.0) };
        let got = fisher_score(&sp, eps).map_err(fail)?;
        let want = dense_fisher(&sp.s_b, &sp.s_w, eps);
        let e = rel_err(got, want);
        ensure(e <= 1e-8, || format!("case {case} (dim {dim}, K {k}): {got} vs oracle {want}"))?;
        worst = worst.max(e);
    }

    let mut worst_1d = 0.0f64;
    for case in 0..50 {
        let k = rng.random_range(2..=4);
        let n = rng.random_range(k + 2..30);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let xs: Vec<f64> = labels.iter().map(|&l| l as f64 * 1.5 + gaussian(&mut rng)).collect();
        let grand = xs.iter().sum::<f64>() / n as f64;
        let means: Vec<f64> = (0..k)
            .map(|c| {
                let v: Vec<f64> = xs.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(x, _)| *x).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        let s_b: f64 = means.iter().map(|m| (m - grand).powi(2)).sum();
        let s_w: f64 = xs.iter().zip(&labels).map(|(x, &l)| (x - means[l]).powi(2)).sum();
        let rows = Matrix::from_vec(n, 1, xs).map_err(fail)?;
        let sp = class_scatter(&rows, &labels, ScatterWeighting::Unweighted).map_err(fail)?;
        let eps = if case % 2 == 0 { 0.0 } else { rng.random_range(0.0..2.0) };
        let got = fisher_score(&sp, eps).map_err(fail)?;
        let exact = sp.s_b.data()[0] / (sp.s_w.data()[0] + eps);
        let by_hand = s_b / (s_w + eps);
        let e = rel_err(got, exact).max(rel_err(got, by_hand));
        ensure(e <= 1e-12, || format!("1-D case {case}: {got} vs {exact} (hand {by_hand})"))?;
        worst_1d = worst_1d.max(e);
    }
    Ok(format!("200 instances, max rel err {worst:.1e}; 1-D max rel err {worst_1d:.1e}"))
}

fn conv_reference(x: &Tensor, f: &FilterBank) -> Tensor {
    let (n, _, h, w) = x.dims();
    let oh = (h + 2 * f.padding - f.kernel_h) / f.stride + 1;
    let ow = (w + 2 * f.padding - f.kernel_w) / f.stride + 1;
    let mut out = Tensor::zeros(n, f.out_channels, oh, ow).into_data();
    let mut idx = 0;
    for s in 0..n {
        for o in 0..f.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = f.bias[o];
                    for i in 0..f.in_channels {
                        for ky in 0..f.kernel_h {
                            for kx in 0..f.kernel_w {
                                let iy = (y * f.stride + ky) as isize - f.padding as isize;
                                let ix = (xx * f.stride + kx) as isize - f.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += f.weight(o, i, ky, kx) * x.get(s, i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_vec(n, f.out_channels, oh, ow, out).unwrap()
}

fn pool_reference(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims();
    let mut out = Vec::new();
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let v = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| x.get(s, ch, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.push(v);
                }
            }
        }
    }
    Tensor::from_vec(n, c, h / 2, w / 2, out).unwrap()
}

fn compare_tensors(got: &Tensor, want: &Tensor, what: &str) -> Result<f64, String> {
    ensure(got.dims() == want.dims(), || format!("{what}: dims {:?} vs {:?}", got.dims(), want.dims()))?;
    let mut worst = 0.0f64;
    for (g, w) in got.data().iter().zip(want.data()) {
        let e = (g - w).abs() / w.abs().max(1.0);
        ensure(e <= 1e-12, || format!("{what}: {g} vs {w}"))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| gaussian(rng)).collect()).unwrap()
}

fn conv_oracle() -> Outcome {
    let mut rng = rng_for(2, "acceptance/conv", 0);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let (h, w) = (2 * rng.random_range(1..=5), 2 * rng.random_range(1..=5));
        let x = random_tensor(&mut rng, n, c, h, w);
        let (kh, kw) = (rng.random_range(1..=3.min(h)), rng.random_range(1..=3.min(w)));
        let (stride, padding) = (rng.random_range(1..=2), rng.random_range(0..=2));
        let o = rng.random_range(1..=5);
        let bank = FilterBank::new(
            o,
            c,
            kh,
            kw,
            stride,
            padding,
            (0..o * c * kh * kw).map(|_| gaussian(&mut rng)).collect(),
            (0..o).map(|_| gaussian(&mut rng)).collect(),
        )
        .map_err(fail)?;
        let got = conv2d(&x, &bank).map_err(fail)?;
        worst = worst.max(compare_tensors(&got, &conv_reference(&x, &bank), &format!("conv case {case}"))?);
        worst = worst.max(compare_tensors(&maxpool2x2(&x).map_err(fail)?, &pool_reference(&x), &format!("pool case {case}"))?);
        let r = relu(&x);
        ensure(r.data().iter().zip(x.data()).all(|(a, b)| *a == b.max(0.0)), || format!("relu case {case}"))?;
    }
    Ok(format!("100 cases (conv, maxpool, relu), max rel err {worst:.1e}"))
}

fn planted_pruning() -> Outcome {
    let (mut lda_total, mut random_total) = (0.0, 0.0);
    let noise = zoo::PLANTED_NOISE_CHANNELS;
    for seed in 0..20u64 {
        let net = zoo::planted_net(seed);
        let ds = SyntheticSpec::planted(seed).generate().map_err(fail)?;
        let scores = fisher_scores_at(&net, &ds, 1, None, ScatterWeighting::Unweighted).map_err(fail)?;
        let order = rank_channels(&scores).map_err(fail)?;
        let decision = prune_and_select(&order, &[], noise, 0, zoo::PLANTED_CHANNELS - noise, seed).map_err(fail)?;
        lda_total += decision.pruned_utility.iter().filter(|&&c| c < noise).count() as f64 / noise as f64;
        let mut rng = rng_for(seed, "acceptance/random-prune", 0);
        let random = sample(&mut rng, zoo::PLANTED_CHANNELS, noise);
        random_total += random.iter().filter(|&c| c < noise).count() as f64 / noise as f64;
    }
    let (lda, random) = (lda_total / 20.0, random_total / 20.0);
    let msg = format!("LDA removes {:.1}% of noise channels, random {:.1}%", 100.0 * lda, 100.0 * random);
    ensure(lda >= 0.9, || msg.clone())?;
    ensure((random - 0.5).abs() <= 0.1, || msg.clone())?;
    Ok(msg)
}

fn three_settings() -> Outcome {
    let seed = 0;
    let net = zoo::planted_net(seed);
    let ds = SyntheticSpec::planted(seed).generate().map_err(fail)?;
    let hyper = EvalHyper::default();
    let (train, test) = full_representations(&net, &ds, 1).map_err(fail)?;
    let privacy: Vec<f64> = per_channel_entries(&train, &test, &ds, 1, &hyper, seed)
        .map_err(fail)?
        .into_iter()
        .map(|e| e.psnr)
        .collect();
    let opts = CompareOptions {
        m: 1,
        d_prime: 4,
        prune: PruneCounts {
            n_utility: 4,
            n_privacy: 8,
        },
        n_trials: 20,
        seed,
        hyper,
        lda_samples: None,
    };
    let report = compare_settings(&net, &ds, &privacy, &opts).map_err(fail)?;
    let [s1, s2, s3] = [&report.settings[0], &report.settings[1], &report.settings[2]];
    let msg = format!(
        "utility {:.3}/{:.3}/{:.3}, PSNR {:.2}/{:.2}/{:.2} dB (settings 1/2/3)",
        s1.utility_mean, s2.utility_mean, s3.utility_mean, s1.psnr_mean, s2.psnr_mean, s3.psnr_mean
    );
    ensure(s3.utility_mean >= s1.utility_mean, || format!("setting 3 utility below setting 1: {msg}"))?;
    ensure(s3.psnr_mean <= s1.psnr_mean, || format!("setting 3 PSNR above setting 1: {msg}"))?;
    for s in [s2, s3] {
        if let Some((t, e)) = s.trials.iter().enumerate().find(|(_, e)| e.privacy > s1.psnr_mean) {
            return Err(format!("setting {} trial {t} PSNR {:.2} above setting-1 mean: {msg}", s.setting, e.privacy));
        }
    }
    Ok(msg)
}

const GRID_D: [usize; 6] = [2, 4, 8, 16, 32, 64];
const GRID_PSNR: [[f64; 6]; 6] = [
    [24.5, 27.6, 30.2, 33.0, 35.5, 38.0],
    [22.0, 24.8, 27.3, 29.8, 32.1, 34.4],
    [19.3, 21.6, 23.9, 26.2, 28.4, 30.5],
    [16.2, 18.3, 20.4, 22.5, 24.4, 26.3],
    [15.4, 17.2, 19.1, 21.0, 22.8, 24.5],
    [14.6, 16.8, 18.6, 20.3, 22.0, 23.6],
];

fn topology_rule() -> Outcome {
    let mut grid = Vec::new();
    for (mi, row) in GRID_PSNR.iter().enumerate() {
        for (di, &p) in row.iter().enumerate() {
            grid.push(GridEntry {
                m: mi + 1,
                d_prime: GRID_D[di],
                utility_mean: 0.5,
                utility_std: 0.0,
                psnr_mean: p,
                psnr_std: 0.0,
                macs: ((mi + 1) * GRID_D[di] * 1000) as u64,
                bytes: ((mi + 1) * GRID_D[di] * 100) as u64,
                trials: 1,
            });
        }
    }
    let table = CharacterizationTable {
        provenance: Provenance {
            net: "hand".into(),
            net_checksum: "0".into(),
            dataset_id: "hand".into(),
            seed: 0,
            seeds_per_cell: 1,
            hyper: EvalHyper::default(),
        },
        grid,
        channels: Vec::new(),
    };
    table.validate().map_err(fail)?;
    let at28 = choose_topology(&table, &ConstraintSet::psnr_only(28.0)).map_err(fail)?;
    let at17 = choose_topology(&table, &ConstraintSet::psnr_only(17.0)).map_err(fail)?;
    let msg = format!("28 dB -> (m={}, D'={}), 17 dB -> (m={}, D'={})", at28.m, at28.d_prime, at17.m, at17.d_prime);
    ensure(at28 == Topology { m: 1, d_prime: 4 } && at17 == Topology { m: 6, d_prime: 4 }, || msg.clone())?;
    Ok(msg)
}

fn counted_macs(oh: usize, ow: usize, kh: usize, kw: usize, din: usize, dout: usize) -> u64 {
    let mut count = 0u64;
    for _y in 0..oh {
        for _x in 0..ow {
            for _o in 0..dout {
                for _i in 0..din {
                    for _ky in 0..kh {
                        for _kx in 0..kw {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    count
}

fn random_config(net: &PretrainedNet, m: usize, rng: &mut ChaCha8Rng) -> FenConfig {
    let full = FenConfig::full(net, m).unwrap();
    let kept: Vec<Vec<usize>> = full
        .kept_channels
        .iter()
        .map(|all| {
            let k = rng.random_range(1..=all.len());
            let mut s = sample(rng, all.len(), k).into_vec();
            s.sort_unstable();
            s
        })
        .collect();
    let last = kept.last().unwrap();
    let d = rng.random_range(1..=last.len());
    let mut out: Vec<usize> = sample(rng, last.len(), d).into_iter().map(|i| last[i]).collect();
    out.sort_unstable();
    FenConfig {
        m,
        kept_channels: kept,
        output_channels: out,
        seed: 0,
    }
}

fn cost_model() -> Outcome {
    let mut rng = rng_for(6, "acceptance/macs", 0);
    for case in 0..50 {
        let (din, dout) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (kh, kw) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (stride, padding) = (rng.random_range(1..=3), rng.random_range(0..=2));
        let h = rng.random_range(kh.max(kw)..=20);
        let w = rng.random_range(kh.max(kw)..=20);
        let spec = LayerSpec::Conv {
            in_channels: din,
            out_channels: dout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let got = conv_macs(&spec, (din, h, w)).map_err(fail)?;
        let want = counted_macs(oh, ow, kh, kw, din, dout);
        ensure(got == want, || format!("spec {case} {spec:?} on {h}x{w}: {got} vs counted {want}"))?;
    }
    let vgg_first = LayerSpec::Conv {
        in_channels: 3,
        out_channels: 64,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
    };
    ensure(conv_macs(&vgg_first, (3, 32, 32)).map_err(fail)? == 1_769_472, || "3x3 3->64 on 32x32".into())?;

    let config = Config {
        cases: 100,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&(0usize..4, 0u64..50, any::<u64>()), |(which, seed, pick)| {
            let net = match which {
                0 => zoo::vgg_like(seed),
                1 => zoo::conv_chain(seed),
                2 => zoo::redundant_net(seed),
                _ => zoo::planted_net(seed),
            };
            let stages = net.stage_count();
            let mut rng = rng_for(pick, "acceptance/cost-prop", 0);
            let m = rng.random_range(1..=stages);
            let here = fen_cost(&net, &FenConfig::full(&net, m).unwrap()).unwrap();
            if m < stages {
                let next = fen_cost(&net, &FenConfig::full(&net, m + 1).unwrap()).unwrap();
                prop_assert!(here.total_macs <= next.total_macs && here.bytes <= next.bytes);
            }
            let cfg = random_config(&net, m, &mut rng);
            let before = fen_cost(&net, &cfg).unwrap();
            prop_assert!(before.total_macs <= here.total_macs && before.bytes <= here.bytes);
            let layer = rng.random_range(0..cfg.kept_channels.len());
            let mut thinner = cfg.clone();
            if thinner.kept_channels[layer].len() > 1 {
                let at = rng.random_range(0..thinner.kept_channels[layer].len());
                let drop = thinner.kept_channels[layer].remove(at);
                if layer + 1 == thinner.kept_channels.len() {
                    thinner.output_channels.retain(|&c| c != drop);
                    if thinner.output_channels.is_empty() {
                        thinner.output_channels.push(thinner.kept_channels[layer][0]);
                    }
                }
            } else if thinner.output_channels.len() > 1 {
                thinner.output_channels.pop();
            }
            let after = fen_cost(&net, &thinner).unwrap();
            prop_assert!(after.total_macs <= before.total_macs && after.bytes <= before.bytes);
            prop_assert!(after.params <= before.params);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let p = LdaOverheadParams {
        n_lda: 6400,
        w_out: 8,
        h_out: 8,
        w_k: 3,
        h_k: 3,
        d_f: 128,
        d_r: 128,
        d_prime: 8,
        classes: 10,
    };
    let o = lda_overhead(&p).map_err(fail)?;
    let extra: u128 = 6400 * 8 * 8 * 3 * 3 * 128 * (128 - 8);
    let scatter: u128 = (10 + 6400) * (8 * 8) * (8 * 8);
    let eigen: u128 = (8 * 8) * (8 * 8) * (8 * 8);
    for (name, got, want) in [
        ("extra_forward", o.extra_forward, extra),
        ("scatter", o.scatter, scatter),
        ("eigensolve", o.eigensolve, eigen),
        ("total", o.total, extra + scatter + eigen),
    ] {
        ensure(got == want as f64, || format!("lda_overhead {name}: {got} vs {want}"))?;
    }
    Ok(format!(
        "50 MAC specs exact, 100 monotonicity cases, reference-scale LDA overhead {:.4e} ops",
        o.total
    ))
}

fn psnr_analytics() -> Outcome {
    let cap = DEFAULT_PSNR_CAP;
    ensure((psnr_from_mse(0.01, 1.0, cap) - 20.0).abs() <= 1e-12, || "MSE 0.01".into())?;
    ensure((psnr_from_mse(0.25, 1.0, cap) - 10.0 * 4f64.log10()).abs() <= 1e-12, || "MSE 0.25".into())?;
    ensure(psnr_from_mse(0.0, 1.0, cap) == cap, || "zero MSE".into())?;
    let img = Tensor::filled(1, 1, 2, 2, 0.5);
    let off = Tensor::filled(1, 1, 2, 2, 0.6);
    let p = psnr(&off, &img, 1.0, cap).map_err(fail)?[0];
    ensure((p - 20.0).abs() <= 1e-9, || format!("0.1 offset gives {p}"))?;

    let mut rng = rng_for(7, "acceptance/psnr", 0);
    for i in 0..1000 {
        let a: f64 = 10f64.powf(rng.random_range(-9.0..0.0));
        let b: f64 = 10f64.powf(rng.random_range(-9.0..0.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (p_lo, p_hi) = (psnr_from_mse(lo, 1.0, cap), psnr_from_mse(hi, 1.0, cap));
        ensure(p_lo >= p_hi && p_lo <= cap, || format!("pair {i}: mse {lo} -> {p_lo}, {hi} -> {p_hi}"))?;
        ensure(lo == hi || p_lo > p_hi || p_hi == cap, || format!("pair {i} not strictly monotone"))?;
    }
    Ok("analytic values exact, 1000 monotone pairs".into())
}

fn sum_sq(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum()
}

fn reconstructor_nesting() -> Outcome {
    let mut rng = rng_for(8, "acceptance/nesting", 0);
    let lambda = 1e-8;
    let mut checks = 0;
    for design in 0..50 {
        let wide = design % 5 == 4;
        let n = if wide { rng.random_range(6..12) } else { rng.random_range(20..60) };
        let p = if wide { n + rng.random_range(2..6) } else { rng.random_range(3..12) };
        let q = rng.random_range(1..6);
        let x = Matrix::from_vec(n, p, (0..n * p).map(|_| gaussian(&mut rng)).collect()).map_err(fail)?;
        let y = Matrix::from_vec(n, q, (0..n * q).map(|_| gaussian(&mut rng)).collect()).map_err(fail)?;
        let floor = 1e-12 * sum_sq(&y);
        let mut prev = f64::INFINITY;
        for k in 1..=p {
            let cols: Vec<usize> = (0..k).collect();
            let r = fit_reconstructor(&x.select_columns(&cols), &y, lambda).map_err(fail)?.residual;
            ensure(r <= prev * (1.0 + 1e-10) + floor, || {
                format!("design {design} ({n}x{p}): residual rose from {prev} to {r} at {k} columns")
            })?;
            prev = r;
            checks += 1;
        }
    }

    let shape = InputShape {
        channels: 3,
        height: 4,
        width: 4,
    };
    let spec = SyntheticSpec {
        height: 4,
        width: 4,
        n_train: 200,
        n_test: 80,
        ..SyntheticSpec::blobs(2)
    };
    let ds = spec.generate().map_err(fail)?;
    let hyper = EvalHyper {
        lambda,
        ..EvalHyper::default()
    };
    let id = zoo::identity_net(shape);
    let ev = evaluate_fen(&derive_fen(&id, &FenConfig::full(&id, 1).map_err(fail)?).map_err(fail)?, &ds, &hyper)
        .map_err(fail)?;
    ensure(ev.privacy == hyper.psnr_cap, || format!("identity FEN PSNR {} below cap", ev.privacy))?;

    let zero = zoo::zero_net(shape, 2);
    let ev0 = evaluate_fen(&derive_fen(&zero, &FenConfig::full(&zero, 1).map_err(fail)?).map_err(fail)?, &ds, &hyper)
        .map_err(fail)?;
    let px = ds.train.images.sample_len();
    let mut mean = vec![0.0; px];
    for i in 0..ds.train.len() {
        mean.iter_mut()
            .zip(ds.train.images.sample(i))
            .for_each(|(m, v)| *m += v / ds.train.len() as f64);
    }
    let analytic = (0..ds.test.len())
        .map(|i| {
            let mse = ds.test.images.sample(i).iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / px as f64;
            psnr_from_mse(mse, 1.0, hyper.psnr_cap)
        })
        .sum::<f64>()
        / ds.test.len() as f64;
    ensure((ev0.privacy - analytic).abs() <= 1e-6, || {
        format!("zero FEN PSNR {} vs mean-image {analytic}", ev0.privacy)
    })?;
    Ok(format!(
        "{checks} nested fits non-increasing; identity FEN {:.1} dB (cap); zero FEN {:.6} dB vs {analytic:.6}",
        ev.privacy, ev0.privacy
    ))
}

/// Manifest with the wall-clock fields removed.
fn stable_manifest(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("wall_clock_ms");
    obj.remove("started_unix_s");
    v
}

fn run_pipeline(dir: &Path) {
    use common::fenkit_ok;
    let eval = ["--epochs", "10"];
    common::planted_workspace(dir);
    fs::write(dir.join("c.json"), r#"{"psnr_budget_db": 40.0}"#).unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["profile", "--netspec", "net.json", "--reps", "0", "--out", "cost.csv", "--json", "cost.json"],
        vec![
            "score", "--netspec", "net.json", "--dataset", "ds.json", "--m", "1", "--out", "scores.csv", "--decision",
            "decision.json", "--table", "table.json", "--prune-utility", "4", "--prune-privacy", "4", "--d-prime", "4",
        ],
        vec![
            "plan", "--netspec", "net.json", "--table", "table.json", "--constraints", "c.json", "--dataset", "ds.json",
            "--prune-utility", "4", "--prune-privacy", "4", "--d-prime", "4", "--out", "plan",
        ],
        vec!["extract", "--netspec", "net.json", "--config", "plan/fen_config.json", "--dataset", "ds.json", "--out", "reps.bin"],
        vec![
            "compare-settings", "--netspec", "net.json", "--dataset", "ds.json", "--table", "table.json", "--m", "1",
            "--d-prime", "4", "--prune-utility", "4", "--prune-privacy", "8", "--trials", "3", "--out", "cmp.csv",
            "--json", "cmp.json",
        ],
    ];
    for mut step in steps {
        if matches!(step[0], "plan" | "compare-settings") {
            step.extend(eval);
        }
        fenkit_ok(dir, &step);
    }
}

fn list_files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        if entry.file_type().unwrap().is_dir() {
            out.extend(list_files(&entry.path()).into_iter().map(|f| format!("{name}/{f}")));
        } else {
            out.push(name);
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(fail)?, tempfile::tempdir().map_err(fail)?);
    run_pipeline(a.path());
    run_pipeline(b.path());
    let files = list_files(a.path());
    ensure(files == list_files(b.path()), || "runs produced different file sets".into())?;
    let commands = files.iter().filter(|f| f.ends_with("manifest.json")).count();
    for f in &files {
        let (pa, pb) = (a.path().join(f), b.path().join(f));
        if f.ends_with("manifest.json") {
            ensure(stable_manifest(&pa) == stable_manifest(&pb), || format!("{f} differs"))?;
        } else {
            ensure(fs::read(&pa).unwrap() == fs::read(&pb).unwrap(), || format!("{f} differs between runs"))?;
        }
    }

    let dir = a.path();
    for name in zoo::NAMES {
        let net = zoo::by_name(name, 9).unwrap();
        let path = dir.join(format!("{name}.json"));
        save_netspec(&net, &path).map_err(fail)?;
        let back = load_netspec(&path).map_err(fail)?;
        ensure(back == net && back.blob_bytes() == net.blob_bytes(), || format!("{name} weights changed on reload"))?;
    }

    let mut rng = rng_for(9, "acceptance/repr", 0);
    let values: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| gaussian(&mut rng) as f32 as f64).collect();
    let t = Tensor::from_vec(2, 3, 4, 5, values).map_err(fail)?;
    let (back, hash) = decode(&encode(&t, 42), Path::new("mem"), Some(42)).map_err(fail)?;
    ensure(back == t && hash == 42, || "representations encode/decode not bit-exact".into())?;
    let net = load_netspec(&dir.join("net.json")).map_err(fail)?;
    let cfg: FenConfig = serde_json::from_str(&fs::read_to_string(dir.join("plan/fen_config.json")).unwrap()).unwrap();
    let ds = fenkit::data::DatasetSource::from_file(&dir.join("ds.json")).map_err(fail)?.load().map_err(fail)?;
    let want = derive_fen(&net, &cfg).map_err(fail)?.forward(&ds.test.images).map_err(fail)?;
    let (got, _) = read_representations(&dir.join("reps.bin"), Some(cfg.config_hash(&net))).map_err(fail)?;
    ensure(got.data().iter().zip(want.data()).all(|(g, w)| *g == *w as f32 as f64) && got.dims() == want.dims(), || {
        "extracted representations differ from the forward pass".into()
    })?;

    let mut bytes = Vec::with_capacity(3 * CIFAR_RECORD_BYTES);
    for r in 0..3usize {
        bytes.push([7u8, 0, 9][r]);
        bytes.extend((0..CIFAR_RECORD_BYTES - 1).map(|j| ((r * 31 + j * 7) % 256) as u8));
    }
    let parsed = parse_cifar10(&bytes, Path::new("three.bin")).map_err(fail)?;
    ensure(parsed.labels == vec![7, 0, 9], || format!("labels {:?}", parsed.labels))?;
    for r in 0..3usize {
        for c in 0..3 {
            for (y, x) in [(0, 0), (0, 31), (17, 5), (31, 31)] {
                let j = c * 1024 + y * 32 + x;
                let want = ((r * 31 + j * 7) % 256) as f64 / 255.0;
                ensure(parsed.images.get(r, c, y, x) == want, || format!("pixel ({r},{c},{y},{x})"))?;
            }
        }
    }
    ensure(parse_cifar10(&bytes[..bytes.len() - 1], Path::new("short.bin")).is_err(), || "truncated file accepted".into())?;
    Ok(format!(
        "{} files from {commands} commands byte-identical across runs; weights, representations and CIFAR records exact",
        files.len()
    ))
}

fn anonymity_slicing() -> Outcome {
    let m = 6;
    let (mut max_du, mut max_dp, mut min_cut) = (0.0f64, 0.0f64, 1.0f64);
    for seed in 0..10u64 {
        let net = zoo::redundant_net(seed);
        let ds = SyntheticSpec::blobs(seed).generate().map_err(fail)?;
        let hyper = EvalHyper {
            train: TrainHyper {
                seed,
                ..TrainHyper::default()
            },
            ..EvalHyper::default()
        };
        let full = FenConfig::full(&net, m).map_err(fail)?;
        let mut sliced = full.clone();
        sliced.kept_channels[0] = vec![0, 2, 4, 6];
        let (fen_full, fen_sliced) = (derive_fen(&net, &full).map_err(fail)?, derive_fen(&net, &sliced).map_err(fail)?);
        let (a, b) = (evaluate_fen(&fen_full, &ds, &hyper).map_err(fail)?, evaluate_fen(&fen_sliced, &ds, &hyper).map_err(fail)?);
        let (du, dp) = ((a.utility - b.utility).abs(), (a.privacy - b.privacy).abs());
        let macs = |f| fen_layer_costs(f).map(|c| c[0].macs as f64);
        let cut = 1.0 - macs(&fen_sliced).map_err(fail)? / macs(&fen_full).map_err(fail)?;
        ensure(du <= 0.1 && dp <= 2.0 && cut >= 0.45, || {
            format!("seed {seed}: utility change {du:.3}, PSNR change {dp:.2} dB, layer-1 MAC cut {:.0}%", 100.0 * cut)
        })?;
        max_du = max_du.max(du);
        max_dp = max_dp.max(dp);
        min_cut = min_cut.min(cut);
    }
    Ok(format!(
        "10 seeds: max utility change {max_du:.3}, max PSNR change {max_dp:.2} dB, layer-1 MACs cut >= {:.0}%",
        100.0 * min_cut
    ))
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "fisher_oracle_equivalence", limit: Duration::from_secs(10), run: fisher_oracle },
    Criterion { id: 2, name: "conv_pool_oracle_equivalence", limit: Duration::from_secs(5), run: conv_oracle },
    Criterion { id: 3, name: "planted_channel_pruning", limit: Duration::from_secs(120), run: planted_pruning },
    Criterion { id: 4, name: "three_setting_dominance", limit: Duration::from_secs(300), run: three_settings },
    Criterion { id: 5, name: "topology_rule_worked_example", limit: Duration::from_secs(1), run: topology_rule },
    Criterion { id: 6, name: "cost_model_exactness", limit: Duration::from_secs(5), run: cost_model },
    Criterion { id: 7, name: "psnr_analytics", limit: Duration::from_secs(1), run: psnr_analytics },
    Criterion { id: 8, name: "reconstructor_nesting", limit: Duration::from_secs(30), run: reconstructor_nesting },
    Criterion { id: 9, name: "determinism_and_round_trips", limit: Duration::from_secs(30), run: determinism },
    Criterion { id: 10, name: "anonymity_slicing_trend", limit: Duration::from_secs(180), run: anonymity_slicing },
];

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if let Some(f) = &filter {
            if !c.name.contains(f.as_str()) {
                continue;
            }
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded the {}s limit", c.limit.as_secs())),
            Err(e) => (false, e),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {} {}: {detail} [{:.2}s / {}s]",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
