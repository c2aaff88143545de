//! Acceptance criteria. Runs without the libtest harness so that every
//! `criterion N: PASS|FAIL ...` line reaches the output, captured or not.
//! A substring argument runs only the matching criteria.

use std::path::Path;
use std::panic::catch_unwind;
use std::process::ExitCode;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitscd::backbone::{Unet, UnetConfig};
use sitscd::data::SceneTimeSeries;
use sitscd::evaluation::{confusion, metrics, ConfusionCounts};
use sitscd::gradcheck::check_gradients;
use sitscd::losses::{
    crw_affinity, crw_cycle_loss, crw_round_trip, crw_walk, info_nce, round_trip_loss, supervised_contrastive,
    SampleBatch,
};
use sitscd::nn::{l2_normalize, BnMode, Initializer, Parameterized};
use sitscd::pipeline::{desk_settings, desk_suite, pooled_baseline_f1, run_pipeline, run_with_labels, PipelineOutcome};
use sitscd::pseudolabel::{
    generate_pseudo_labels, neighbourhood_weights, propagate_labels, threshold_only_labels, ContextQueues,
    EmbeddingField, LabelField, LabelSource, PropagationConfig, SpectralProvider,
};
use sitscd::synth::{generate_scene, ChangeEvent, Region, SynthSpec};
use sitscd::temporal::{bi_convlstm_forward, convlstm_step, BiConvLstm, ConvLstmCell, ConvLstmState};
use sitscd::training::{save_checkpoint, write_log, Adam, Objective};

static REPORTED: AtomicU32 = AtomicU32::new(0);

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    REPORTED.store(n, Ordering::SeqCst);
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// Metric oracle

struct Expected {
    precision: f64,
    recall: f64,
    oa: f64,
    f1: f64,
    kappa: f64,
}

fn hand_examples() -> Vec<(ConfusionCounts, Expected)> {
    vec![
        // n = 10, p_e = (3·3 + 7·7) / 100 = 0.58.
        (
            ConfusionCounts::new(2, 1, 1, 6),
            Expected {
                precision: 2.0 / 3.0,
                recall: 2.0 / 3.0,
                oa: 0.8,
                f1: 2.0 / 3.0,
                kappa: 11.0 / 21.0,
            },
        ),
        // n = 100, p_e = (50·60 + 50·40) / 10⁴ = 0.5.
        (
            ConfusionCounts::new(45, 5, 15, 35),
            Expected {
                precision: 0.9,
                recall: 0.75,
                oa: 0.8,
                f1: 9.0 / 11.0,
                kappa: 0.6,
            },
        ),
        // Nothing predicted: precision and F1 fall back to 0, kappa is 0.
        (
            ConfusionCounts::new(0, 0, 10, 90),
            Expected {
                precision: 0.0,
                recall: 0.0,
                oa: 0.9,
                f1: 0.0,
                kappa: 0.0,
            },
        ),
    ]
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<u8> {
    let density: f64 = rng.random();
    Array2::from_shape_fn((h, w), |_| u8::from(rng.random::<f64>() < density))
}

fn criterion_1_metric_oracle() {
    let start = Instant::now();
    let mut hand_ok = true;
    for (counts, e) in hand_examples() {
        let r = metrics(&counts).unwrap();
        hand_ok &= close(r.precision, e.precision, 1e-9)
            && close(r.recall, e.recall, 1e-9)
            && close(r.overall_accuracy, e.oa, 1e-9)
            && close(r.f1, e.f1, 1e-9)
            && close(r.kappa, e.kappa, 1e-9);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut prop_failures = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let pred = random_map(&mut rng, h, w);
        let truth = random_map(&mut rng, h, w);
        let a = metrics(&confusion(&pred, &truth, None).unwrap()).unwrap();
        let b = metrics(&confusion(&truth, &pred, None).unwrap()).unwrap();
        let swap_ok = close(a.f1, b.f1, 1e-12)
            && close(a.kappa, b.kappa, 1e-12)
            && close(a.overall_accuracy, b.overall_accuracy, 1e-12)
            && close(a.precision, b.recall, 1e-12)
            && close(a.recall, b.precision, 1e-12);
        let same = metrics(&confusion(&truth, &truth, None).unwrap()).unwrap();
        let mixed = truth.iter().any(|&v| v == 1) && truth.iter().any(|&v| v == 0);
        let identity_ok = same.overall_accuracy == 1.0
            && (!mixed || (close(same.f1, 1.0, 1e-12) && close(same.kappa, 1.0, 1e-12)));
        let constant_ok = [0u8, 1].iter().all(|&c| {
            let p = Array2::from_elem((h, w), c);
            metrics(&confusion(&p, &truth, None).unwrap()).unwrap().kappa.abs() < 1e-12
        });
        if !(swap_ok && identity_ok && constant_ok) {
            prop_failures += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = hand_ok && prop_failures == 0 && elapsed < Duration::from_secs(5);
    report(
        1,
        pass,
        &format!("hand examples exact: {hand_ok}, property failures: {prop_failures}/1000, {elapsed:.2?}"),
    );
    assert!(pass);
}

// Gradient checks

const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

fn f64_var(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Var {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
}

fn f64_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    f64_var(rng, shape, 1.0).as_tensor().clone()
}

fn weighted_sum(ts: &[Tensor], weights: &[Tensor]) -> sitscd::Result<Tensor> {
    let mut total = Tensor::zeros((), DType::F64, &Device::Cpu)?;
    for (t, w) in ts.iter().zip(weights) {
        total = (total + (t * w)?.sum_all()?)?;
    }
    Ok(total)
}

fn grad_error(name: &str, f: impl Fn() -> sitscd::Result<Tensor>, vars: &[Var]) -> (String, f64) {
    let r = check_gradients(f, vars, 12, FD_STEP, 7).unwrap();
    (name.to_string(), r.max_relative_error)
}

fn criterion_2_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut results = Vec::new();

    let v1 = f64_var(&mut rng, &[6, 5], 1.0);
    let v2 = f64_var(&mut rng, &[6, 5], 1.0);
    results.push(grad_error(
        "info_nce",
        || info_nce(&l2_normalize(v1.as_tensor(), 1)?, &l2_normalize(v2.as_tensor(), 1)?, 0.1),
        &[v1.clone(), v2.clone()],
    ));

    let z = f64_var(&mut rng, &[8, 5], 1.0);
    let labels = vec![0, 1, 1, 0, 0, 1, 1, 0];
    results.push(grad_error(
        "supervised_contrastive",
        || supervised_contrastive(&SampleBatch::new(l2_normalize(z.as_tensor(), 1)?, labels.clone())?, 0.1),
        &[z.clone()],
    ));

    let frames: Vec<Var> = (0..3).map(|_| f64_var(&mut rng, &[5, 4], 1.0)).collect();
    results.push(grad_error(
        "crw_cycle_loss",
        || {
            let nodes = frames
                .iter()
                .map(|v| l2_normalize(v.as_tensor(), 1))
                .collect::<sitscd::Result<Vec<_>>>()?;
            crw_cycle_loss(&nodes, 0.2)
        },
        &frames,
    ));

    let mut init = Initializer::new(3, DType::F64);
    let cell = ConvLstmCell::new(&mut init, 3, 4).unwrap();
    let x = f64_var(&mut rng, &[1, 3, 8, 8], 1.0);
    let h0 = f64_var(&mut rng, &[1, 4, 8, 8], 0.5);
    let c0 = f64_var(&mut rng, &[1, 4, 8, 8], 0.5);
    let (wh, wc) = (f64_tensor(&mut rng, &[1, 4, 8, 8]), f64_tensor(&mut rng, &[1, 4, 8, 8]));
    let mut vars = vec![x.clone(), h0.clone(), c0.clone()];
    vars.extend(cell.trainable_vars());
    results.push(grad_error(
        "convlstm_step",
        || {
            let state = ConvLstmState {
                hidden: h0.as_tensor().clone(),
                cell: c0.as_tensor().clone(),
            };
            let s = convlstm_step(x.as_tensor(), &state, &cell)?;
            weighted_sum(&[s.hidden, s.cell], &[wh.clone(), wc.clone()])
        },
        &vars,
    ));

    let layer = BiConvLstm::new(&mut init, 3, 4).unwrap();
    let seq: Vec<Var> = (0..3).map(|_| f64_var(&mut rng, &[1, 3, 8, 8], 1.0)).collect();
    let ws: Vec<Tensor> = (0..3).map(|_| f64_tensor(&mut rng, &[1, 4, 8, 8])).collect();
    let mut vars = seq.clone();
    vars.extend(layer.trainable_vars());
    results.push(grad_error(
        "bi_convlstm_forward",
        || {
            let xs: Vec<Tensor> = seq.iter().map(|v| v.as_tensor().clone()).collect();
            weighted_sum(&bi_convlstm_forward(&xs, &layer)?, &ws)
        },
        &vars,
    ));

    let unet = Unet::new(
        &UnetConfig {
            in_channels: 2,
            encoder_widths: [3, 3, 4, 4, 5],
            decoder_width: 3,
        },
        &mut init,
    )
    .unwrap();
    let images = f64_var(&mut rng, &[2, 2, 16, 16], 1.0);
    let wu = f64_tensor(&mut rng, &[1, 3, 16, 16]);
    let mut vars = vec![images.clone()];
    vars.extend(unet.trainable_vars());
    results.push(grad_error(
        "unet_forward",
        || weighted_sum(&[unet.forward_scene(images.as_tensor(), BnMode::BatchStats)?], &[wu.clone()]),
        &vars,
    ));

    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pass = worst <= GRAD_TOL && elapsed < Duration::from_secs(300);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(2, pass, &format!("max relative error {worst:.2e} [{}], {elapsed:.1?}", detail.join(", ")));
    assert!(pass);
}

// Cycle-consistent random walk

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let (n, d) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.concat(), (n, d), &Device::Cpu).unwrap()
}

/// Row softmax of `a bᵀ / τ` computed directly.
fn oracle_affinity(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| {
            let s: Vec<f64> = b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / tau).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, row)| x * row[j]).sum()).collect())
        .collect()
}

fn max_abs_diff(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    let got = t.to_vec2::<f64>().unwrap();
    got.iter()
        .flatten()
        .zip(rows.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Two frames of nodes dominated by a shared component; the second frame is
/// a permuted, noisy copy. A linear map applied to both learns to track.
fn tracking_toy_reduction(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (8, 8);
    let common: Vec<f64> = unit_rows(&mut rng, 1, d).remove(0);
    let first: Vec<Vec<f64>> = (0..n)
        .map(|_| common.iter().map(|c| 3.0 * c + 0.5 * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let second: Vec<Vec<f64>> = perm
        .iter()
        .map(|&p| first[p].iter().map(|v| v + 0.05 * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .collect();
    let (x0, x1) = (to_tensor(&first), to_tensor(&second));
    let eye = Tensor::eye(d, DType::F64, &Device::Cpu).unwrap();
    let noise = f64_tensor(&mut rng, &[d, d]);
    let w = Var::from_tensor(&(eye + (noise * 0.05).unwrap()).unwrap()).unwrap();
    let loss = || -> sitscd::Result<Tensor> {
        let q0 = l2_normalize(&x0.matmul(w.as_tensor())?, 1)?;
        let q1 = l2_normalize(&x1.matmul(w.as_tensor())?, 1)?;
        crw_cycle_loss(&[q0, q1], 0.07)
    };
    let initial = loss().unwrap().to_scalar::<f64>().unwrap();
    let mut opt = Adam::new(vec![w.clone()], 0.9, 0.999, 1e-8).unwrap();
    for _ in 0..200 {
        let grads = loss().unwrap().backward().unwrap();
        opt.step(&grads, 0.01).unwrap();
    }
    let last = loss().unwrap().to_scalar::<f64>().unwrap();
    1.0 - last / initial
}

fn criterion_3_cycle_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_row = 0f64;
    for _ in 0..1000 {
        let (n, m, d) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..8));
        let tau = rng.random_range(0.01..1.0);
        let a = crw_affinity(&to_tensor(&unit_rows(&mut rng, n, d)), &to_tensor(&unit_rows(&mut rng, m, d)), tau)
            .unwrap();
        for row in a.values.to_vec2::<f64>().unwrap() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let rows_ok = worst_row <= 1e-6;

    let frames: Vec<Vec<Vec<f64>>> = (0..3).map(|_| unit_rows(&mut rng, 6, 4)).collect();
    let tensors: Vec<Tensor> = frames.iter().map(|f| to_tensor(f)).collect();
    let expected = matmul(&oracle_affinity(&frames[0], &frames[1], 0.1), &oracle_affinity(&frames[1], &frames[2], 0.1));
    let walk_err = max_abs_diff(&crw_walk(&tensors, 0.1).unwrap(), &expected);
    let walk_ok = walk_err <= 1e-6;

    let identity = round_trip_loss(&Tensor::eye(5, DType::F64, &Device::Cpu).unwrap())
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    let identity_ok = identity.abs() <= 1e-9;

    // Two indistinguishable nodes: every step is uniform, so the loss is 2 ln 2.
    let same = to_tensor(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
    let uniform = crw_cycle_loss(&[same.clone(), same.clone()], 0.07)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    let trip = crw_round_trip(&[same.clone(), same], 0.07).unwrap();
    let uniform_ok = close(uniform, 4f64.ln(), 1e-3) && max_abs_diff(&trip, &[vec![0.5; 2], vec![0.5; 2]]) < 1e-12;

    let reductions: Vec<f64> = (0..20).map(tracking_toy_reduction).collect();
    let halved = reductions.iter().filter(|&&r| r >= 0.5).count();
    let toy_ok = halved >= 18;

    let pass = rows_ok && walk_ok && identity_ok && uniform_ok && toy_ok;
    report(
        3,
        pass,
        &format!(
            "row sums ±{worst_row:.1e}, walk ±{walk_err:.1e}, identity loss {identity:.1e}, \
             uniform loss {uniform:.4}, toy halved in {halved}/20 seeds"
        ),
    );
    assert!(pass);
}

// Pseudo-label propagation

fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize, pair: usize) -> EmbeddingField {
    let v = Array3::from_shape_fn((h, w, n), |_| 2.0 * rng.random::<f32>() - 1.0);
    EmbeddingField::normalized(v, pair).unwrap()
}

fn prop_cfg(window: usize, context: usize, top_k: usize, temperature: f64) -> PropagationConfig {
    PropagationConfig {
        window,
        context,
        top_k,
        temperature,
        ..Default::default()
    }
}

fn constant_invariance(rng: &mut ChaCha8Rng) -> bool {
    let embs: Vec<_> = (1..6).map(|t| random_field(rng, 12, 10, 4, t)).collect();
    [0u8, 1].iter().all(|&c| {
        let seed = LabelField::from_hard(Array2::from_elem((12, 10), c));
        propagate_labels(&embs, &seed, &PropagationConfig::default())
            .unwrap()
            .iter()
            .all(|l| l.soft.iter().all(|&s| s == c as f32))
    })
}

fn worst_convexity(rng: &mut ChaCha8Rng) -> f64 {
    let mut q = ContextQueues::new(random_field(rng, 10, 10, 5, 1), Array2::zeros((10, 10)), 3).unwrap();
    q.push(random_field(rng, 10, 10, 5, 2), Array2::zeros((10, 10)));
    q.push(random_field(rng, 10, 10, 5, 3), Array2::zeros((10, 10)));
    let query = random_field(rng, 10, 10, 5, 4);
    let mut worst = 0f64;
    for temperature in [0.005, 0.05, 1.0] {
        let c = prop_cfg(10, 3, 10, temperature);
        for i in 0..10 {
            for j in 0..10 {
                let nb = neighbourhood_weights(&query, &q, i, j, &c);
                if nb.iter().any(|n| n.weight < 0.0) {
                    return f64::INFINITY;
                }
                worst = worst.max((nb.iter().map(|n| n.weight).sum::<f64>() - 1.0).abs());
            }
        }
    }
    worst
}

fn translation_equivariant(rng: &mut ChaCha8Rng) -> bool {
    let (h, w, p, pairs) = (30, 32, 6, 3);
    let (di, dj) = (3usize, 2usize);
    let embs: Vec<_> = (1..=pairs).map(|t| random_field(rng, h, w, 4, t)).collect();
    let seed_map = Array2::from_shape_fn((h, w), |_| u8::from(rng.random::<f32>() < 0.4));
    let roll3 = |a: &Array3<f32>| Array3::from_shape_fn(a.dim(), |(i, j, k)| a[[(i + h - di) % h, (j + w - dj) % w, k]]);
    let roll2 = |a: &Array2<u8>| Array2::from_shape_fn(a.dim(), |(i, j)| a[[(i + h - di) % h, (j + w - dj) % w]]);
    let shifted: Vec<_> = embs
        .iter()
        .map(|e| EmbeddingField::new(roll3(&e.values), e.pair_index).unwrap())
        .collect();
    let c = prop_cfg(p, 3, 10, 0.005);
    let a = propagate_labels(&embs, &LabelField::from_hard(seed_map.clone()), &c).unwrap();
    let b = propagate_labels(&shifted, &LabelField::from_hard(roll2(&seed_map)), &c).unwrap();
    // Wrap-around only affects pixels within reach of the border; each
    // propagation step extends that reach by half a window.
    let margin = p + (pairs - 1) * p / 2;
    a.iter().zip(&b).all(|(la, lb)| {
        (margin..h - margin - di).all(|i| (margin..w - margin - dj).all(|j| la.soft[[i, j]] == lb.soft[[i + di, j + dj]]))
    })
}

/// The query pixel has an exact match in the context; every other candidate
/// has similarity at most 0.1, so at τ = 0.005 the match takes all weight.
fn sharp_temperature_error() -> f64 {
    let n = 16;
    let basis = |k: usize| {
        let mut v = vec![0f32; n];
        v[k] = 1.0;
        v
    };
    let mut ctx = Array3::<f32>::zeros((5, 5, n));
    for i in 0..5 {
        for j in 0..5 {
            let mut v = basis(1 + (i * 5 + j) % 14);
            v[0] = 0.1;
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            for k in 0..n {
                ctx[[i, j, k]] = v[k] / norm;
            }
        }
    }
    let mut query = ctx.clone();
    for k in 0..n {
        query[[2, 2, k]] = basis(15)[k];
        ctx[[1, 3, k]] = basis(15)[k];
    }
    let mut hard = Array2::<u8>::zeros((5, 5));
    hard[[1, 3]] = 1;
    let embs = vec![EmbeddingField::new(ctx, 1).unwrap(), EmbeddingField::new(query, 2).unwrap()];
    let out = propagate_labels(&embs, &LabelField::from_hard(hard), &prop_cfg(4, 1, 10, 0.005)).unwrap();
    (out[1].soft[[2, 2]] as f64 - 1.0).abs()
}

/// A single land-cover change at t = 1, seasonal amplitude twice the noise.
fn step_change_scene(seed: u64) -> SceneTimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57E9);
    let from = rng.random_range(0..4);
    let spec = SynthSpec {
        noise_sigma: 0.02,
        seasonal_amplitude: 0.04,
        seed,
        change_events: vec![ChangeEvent {
            region: Region::Rectangle {
                top: rng.random_range(4..36),
                left: rng.random_range(4..36),
                height: 24,
                width: 24,
            },
            t_change: 1,
            class_from: from,
            class_to: (from + rng.random_range(1..4)) % 4,
        }],
        ..Default::default()
    };
    generate_scene(&spec).unwrap()
}

/// Counts of hard labels against the truth over every pair.
fn label_counts(labels: &[LabelField], scene: &SceneTimeSeries) -> ConfusionCounts {
    let gt = scene.ground_truth.as_ref().unwrap();
    labels
        .iter()
        .enumerate()
        .map(|(k, l)| confusion(&l.hard, &gt.maps[&(k + 1)], None).unwrap())
        .sum()
}

fn iou(c: &ConfusionCounts) -> f64 {
    c.tp as f64 / (c.tp + c.fp + c.fn_).max(1) as f64
}

fn criterion_4_propagation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let constant_ok = (0..5).all(|_| constant_invariance(&mut rng));
    let convexity = (0..5).map(|_| worst_convexity(&mut rng)).fold(0.0, f64::max);
    let translation_ok = (0..3).all(|_| translation_equivariant(&mut rng));
    let sharp = sharp_temperature_error();

    let cfg = PropagationConfig::default();
    let provider = SpectralProvider { sigma: cfg.smoothing_sigma };
    let (mut tracked, mut thresholded) = (ConfusionCounts::default(), ConfusionCounts::default());
    for seed in 0..5 {
        let scene = step_change_scene(seed);
        tracked = tracked + label_counts(&generate_pseudo_labels(&scene, &provider, &cfg).unwrap().labels, &scene);
        thresholded =
            thresholded + label_counts(&threshold_only_labels(&scene, &provider, &cfg).unwrap().labels, &scene);
    }
    let tracked_iou = iou(&tracked);
    let (tracked_f1, baseline_f1) = (metrics(&tracked).unwrap().f1, metrics(&thresholded).unwrap().f1);
    let quality_ok = tracked_iou >= 0.7 && baseline_f1 < tracked_f1;

    let pass = constant_ok && convexity <= 1e-6 && translation_ok && sharp <= 1e-6 && quality_ok;
    report(
        4,
        pass,
        &format!(
            "constant {constant_ok}, convexity ±{convexity:.1e}, translation {translation_ok}, sharp τ ±{sharp:.1e}, \
             pseudo IoU {tracked_iou:.3} F1 {tracked_f1:.3} vs thresholding F1 {baseline_f1:.3}"
        ),
    );
    assert!(pass);
}

// Desk-sized end-to-end runs

const DESK_SEEDS: u64 = 5;

fn desk_base() -> SynthSpec {
    SynthSpec {
        seasonal_amplitude: 0.04,
        noise_sigma: 0.01,
        ..Default::default()
    }
}

/// Five tracking scenes plus one change-free scene.
fn desk_scenes(seed: u64) -> Vec<SceneTimeSeries> {
    desk_suite(&desk_base(), seed, 5, 1)
        .iter()
        .map(|s| generate_scene(s).unwrap())
        .collect()
}

struct RunSummary {
    f1: f64,
    kappa: f64,
    null_changed: f64,
}

fn summarize(out: &PipelineOutcome, scenes: &[SceneTimeSeries]) -> RunSummary {
    let pooled = &out.evaluation.as_ref().unwrap().pooled;
    let null = scenes.iter().position(|s| s.ground_truth.as_ref().unwrap().maps.values().all(|m| m.iter().all(|&v| v == 0)));
    RunSummary {
        f1: pooled.f1,
        kappa: pooled.kappa,
        null_changed: null.map_or(0.0, |k| out.series[k].changed_fraction()),
    }
}

struct DeskRuns {
    runs: Vec<RunSummary>,
    baseline_f1: Vec<f64>,
    elapsed: Duration,
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let provider = SpectralProvider::default();
        let mut runs = Vec::new();
        let mut baseline_f1 = Vec::new();
        for seed in 0..DESK_SEEDS {
            let scenes = desk_scenes(seed);
            let settings = desk_settings(4, seed);
            let out = run_pipeline(&scenes, &provider, &settings).unwrap();
            runs.push(summarize(&out, &scenes));
            baseline_f1.push(pooled_baseline_f1(&scenes, &settings.propagation).unwrap());
        }
        DeskRuns {
            runs,
            baseline_f1,
            elapsed: start.elapsed(),
        }
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_5_desk_end_to_end() {
    let d = desk_runs();
    let f1 = mean(d.runs.iter().map(|r| r.f1));
    let kappa = mean(d.runs.iter().map(|r| r.kappa));
    let baseline = mean(d.baseline_f1.iter().copied());
    let worst_null = d.runs.iter().map(|r| r.null_changed).fold(0.0, f64::max);
    let pass = f1 >= 0.8
        && kappa >= 0.6
        && f1 >= baseline + 0.05
        && worst_null < 0.05
        && d.elapsed <= Duration::from_secs(30 * 60);
    let per: Vec<String> = d.runs.iter().map(|r| format!("{:.3}/{:.3}", r.f1, r.kappa)).collect();
    report(
        5,
        pass,
        &format!(
            "mean F1 {f1:.3} Kappa {kappa:.3} (per seed F1/Kappa {}), thresholding F1 {baseline:.3}, \
             null changed fraction ≤ {worst_null:.4}, {:.1?}",
            per.join(" "),
            d.elapsed
        ),
    );
    assert!(pass);
}

/// Mean Kappa of the desk runs under a modified configuration.
fn ablation_kappa(modify: impl Fn(&mut sitscd::pipeline::PipelineSettings)) -> f64 {
    let provider = SpectralProvider::default();
    mean((0..DESK_SEEDS).map(|seed| {
        let scenes = desk_scenes(seed);
        let mut settings = desk_settings(4, seed);
        modify(&mut settings);
        let out = run_pipeline(&scenes, &provider, &settings).unwrap();
        summarize(&out, &scenes).kappa
    }))
}

fn criterion_6_ablation_ordering() {
    let start = Instant::now();
    let full = mean(desk_runs().runs.iter().map(|r| r.kappa));
    let reused = desk_runs().elapsed;
    let threshold_only = ablation_kappa(|s| s.label_source = LabelSource::ThresholdOnly);
    let supcon_only = ablation_kappa(|s| s.train.objective = Objective::SupconOnly);
    let ce_only = ablation_kappa(|s| s.train.objective = Objective::CrossEntropy);
    let elapsed = start.elapsed() + reused;
    const TIE: f64 = 0.01;
    let labels_ok = full >= threshold_only - TIE;
    let losses_ok = full >= supcon_only - TIE && supcon_only >= ce_only - TIE;
    let pass = labels_ok && losses_ok && elapsed <= Duration::from_secs(90 * 60);
    report(
        6,
        pass,
        &format!(
            "Kappa: tracking labels {full:.3} vs threshold labels {threshold_only:.3}; \
             supcon+crw {full:.3} ≥ supcon {supcon_only:.3} ≥ ce {ce_only:.3}; {elapsed:.1?}"
        ),
    );
    assert!(pass);
}

// Determinism

fn tiny_scenes() -> Vec<SceneTimeSeries> {
    let base = SynthSpec {
        height: 32,
        width: 32,
        frames: 4,
        seasonal_amplitude: 0.04,
        ..Default::default()
    };
    desk_suite(&base, 9, 2, 1)
        .iter()
        .map(|s| generate_scene(s).unwrap())
        .collect()
}

/// Runs a short pipeline and writes every artifact under `dir`.
fn write_artifacts(dir: &Path) {
    let scenes = tiny_scenes();
    let mut settings = desk_settings(4, 11);
    settings.train.feature_epochs = 2;
    settings.train.finetune_epochs = 2;
    let labels = scenes
        .iter()
        .map(|s| generate_pseudo_labels(s, &SpectralProvider::default(), &settings.propagation).unwrap())
        .collect();
    let out = run_with_labels(&scenes, labels, &settings).unwrap();
    for set in &out.labels {
        sitscd::pseudolabel::write_pseudo_labels(&dir.join("pseudo").join(&set.scene_id), set).unwrap();
    }
    write_log(&dir.join("feature_log.json"), &out.feature_log).unwrap();
    write_log(&dir.join("finetune_log.json"), &out.finetune_log).unwrap();
    save_checkpoint(&dir.join("model.safetensors"), &out.model, "finetune").unwrap();
    for s in &out.series {
        s.write(&dir.join("maps").join(&s.scene_id)).unwrap();
    }
    let table = out.evaluation.unwrap().table();
    std::fs::write(dir.join("eval.txt"), table).unwrap();
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_7_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_artifacts(a.path());
    write_artifacts(b.path());
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    let differing = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.clone())
        .collect::<Vec<_>>();
    let pass = !fa.is_empty() && fa.len() == fb.len() && differing.is_empty();
    report(
        7,
        pass,
        &format!("{} artifacts compared, {} differ {:?}", fa.len(), differing.len(), differing),
    );
    assert!(pass);
}

fn main() -> ExitCode {
    let criteria: [(&str, fn()); 7] = [
        ("criterion_1_metric_oracle", criterion_1_metric_oracle),
        ("criterion_2_gradient_checks", criterion_2_gradient_checks),
        ("criterion_3_cycle_walk", criterion_3_cycle_walk),
        ("criterion_4_propagation", criterion_4_propagation),
        ("criterion_5_desk_end_to_end", criterion_5_desk_end_to_end),
        ("criterion_6_ablation_ordering", criterion_6_ablation_ordering),
        ("criterion_7_determinism", criterion_7_determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let n = k as u32 + 1;
        REPORTED.store(0, Ordering::SeqCst);
        if catch_unwind(run).is_err() {
            if REPORTED.load(Ordering::SeqCst) != n {
                println!("criterion {n}: FAIL panicked before reporting");
            }
            failed.push(*name);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
