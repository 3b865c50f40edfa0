//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line for each and exits non-zero if any failed.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use lyncean::experiment::{sensitivity, ClickProtocol, CorpusItem};
use lyncean::fusion::{best_match, MatchCriterion, RegionProposal};
use lyncean::imagecore::{decode_image, decode_mask, encode_image, encode_mask, BinaryMask, BoundingBox, ImageRgb};
use lyncean::interaction::{
    build_training_pair, compute_voronoi, extract_cortex, gen_shapes_dataset, mcd_selections, sample_positive_seeds,
    Polarity, Seed, SeedConstraints,
};
use lyncean::lfcn::{
    bce_loss, conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, decode_checkpoint,
    encode_checkpoint, init_network, loss_and_logit_grad, maxpool2x2_backward, maxpool2x2_forward, pair_input,
    predict_mask, relu_backward, relu_forward, train, EncoderBlock, Granularity, Network, NetworkConfig, Tensor,
    TrainConfig,
};
use lyncean::metrics::{confusion, fg_iou, mean_accuracy, mean_iou, pixel_accuracy};
use lyncean::{Error, TrainingPair32};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        // Negated so NaN fails the check.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let el = start.elapsed();
    if el > limit {
        Err(format!("took {el:.1?}, limit {limit:?}"))
    } else {
        Ok(el)
    }
}

/// Random masks: synthetic shapes on square images with sides in `sizes`.
fn shape_masks(count: usize, sizes: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<BinaryMask> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let size = r.random_range(sizes.clone());
            gen_shapes_dataset(1, size, size, r.random()).remove(0).mask
        })
        .collect()
}

// ---------------------------------------------------------------------------

fn voronoi_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (w, h) = (r.random_range(1..=32), r.random_range(1..=32));
        let n = r.random_range(0..=20);
        let seeds: Vec<Seed> = (0..n)
            .map(|_| Seed::positive(r.random_range(0..w), r.random_range(0..h)))
            .collect();
        let map = compute_voronoi::<f64>(&seeds, w, h).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let brute = seeds
                    .iter()
                    .map(|s| ((s.x as f64 - x as f64).powi(2) + (s.y as f64 - y as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                let brute = if seeds.is_empty() { 255.0 } else { brute };
                worst = worst.max((map.get(x, y) - brute).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:e}");
    let el = within(Duration::from_secs(5), start)?;
    Ok(format!("200 instances, max deviation {worst:.1e}, {el:.2?}"))
}

fn chessboard_distances(mask: &BinaryMask) -> Vec<usize> {
    let (w, h) = mask.dims();
    let fg: Vec<(usize, usize)> = mask.pixels().collect();
    let mut out = vec![usize::MAX; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = fg
                .iter()
                .map(|&(fx, fy)| fx.abs_diff(x).max(fy.abs_diff(y)))
                .min()
                .unwrap_or(usize::MAX);
        }
    }
    out
}

fn mcd_correctness() -> Verdict {
    let levels = [1, 4, 8];
    let n = 5;
    let mut checked = 0;
    // Images of at least 40 pixels leave room for the level-8 ring.
    for (i, mask) in shape_masks(100, 40..=64, 2).iter().enumerate() {
        let (w, _) = mask.dims();
        let cheb = chessboard_distances(mask);
        let sels = mcd_selections(mask, n, &levels, i as u64).map_err(|e| format!("mask {i}: {e}"))?;
        ensure!(sels.len() == levels.len(), "mask {i}: {} selections", sels.len());
        for sel in &sels {
            let path = extract_cortex(mask, sel.level).map_err(|e| e.to_string())?.flattened();
            let mut ring: Vec<(usize, usize)> = (0..cheb.len())
                .filter(|&j| cheb[j] == sel.level)
                .map(|j| (j % w, j / w))
                .collect();
            let mut sorted = path.clone();
            sorted.sort_unstable();
            ring.sort_unstable();
            ensure!(
                sorted == ring,
                "mask {i} level {}: path is not a permutation of the ring",
                sel.level
            );
            let len = path.len();
            ensure!(sel.path_len == len, "mask {i}: path_len mismatch");
            for (s, &idx) in sel.seeds.iter().zip(&sel.indices) {
                ensure!(s.polarity == Polarity::Negative, "positive seed from MCD");
                ensure!(!mask.get(s.x, s.y), "mask {i}: seed ({}, {}) is foreground", s.x, s.y);
                ensure!(
                    cheb[s.y * w + s.x] == sel.level,
                    "mask {i}: seed not at chessboard distance {}",
                    sel.level
                );
                ensure!(path[idx] == (s.x, s.y), "mask {i}: seed does not sit at its path index");
            }
            let mut idx = sel.indices.clone();
            idx.sort_unstable();
            idx.dedup();
            let limit = len.div_ceil(n);
            if idx.len() > 1 {
                let wrap = len - idx[idx.len() - 1] + idx[0];
                let max_gap = idx.windows(2).map(|p| p[1] - p[0]).chain([wrap]).max().unwrap();
                ensure!(
                    max_gap <= limit,
                    "mask {i} level {}: gap {max_gap} > {limit}",
                    sel.level
                );
            }
            checked += 1;
        }
    }
    Ok(format!("100 masks, {checked} level selections verified"))
}

fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = mask.dims();
    mask.pixels()
        .filter(|&(x, y)| {
            (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || !mask.get(nx as usize, ny as usize)
                })
            })
        })
        .collect()
}

fn constraint_enforcement() -> Verdict {
    let mut r = rng(3);
    let (mut feasible, mut infeasible) = (0, 0);
    for (i, mask) in shape_masks(100, 24..=64, 4).iter().enumerate() {
        let n = r.random_range(1..=5);
        let c = SeedConstraints::new(r.random_range(2.0..8.0), r.random_range(1.0..3.0)).unwrap();
        match sample_positive_seeds(mask, n, c, i as u64) {
            Ok(seeds) => {
                ensure!(seeds.len() == n, "mask {i}: {} seeds for {n}", seeds.len());
                let edge = boundary_pixels(mask);
                for (j, s) in seeds.iter().enumerate() {
                    ensure!(mask.get(s.x, s.y), "mask {i}: seed outside the object");
                    for &(bx, by) in &edge {
                        let d = ((s.x as f64 - bx as f64).powi(2) + (s.y as f64 - by as f64).powi(2)).sqrt();
                        ensure!(d > c.d2, "mask {i}: seed {d} from boundary, d2 {}", c.d2);
                    }
                    for t in &seeds[j + 1..] {
                        let d = ((s.x as f64 - t.x as f64).powi(2) + (s.y as f64 - t.y as f64).powi(2)).sqrt();
                        ensure!(d > c.d1, "mask {i}: seeds {d} apart, d1 {}", c.d1);
                    }
                }
                feasible += 1;
            }
            Err(Error::Infeasible { requested, placed, .. }) => {
                ensure!(
                    requested == n && placed < n,
                    "mask {i}: inconsistent infeasibility report"
                );
                infeasible += 1;
            }
            Err(e) => return Err(format!("mask {i}: unexpected error {e}")),
        }
    }
    let full = BinaryMask::full(10, 10);
    let spaced = sample_positive_seeds(&full, 5, SeedConstraints::new(40.0, 1.0).unwrap(), 0);
    ensure!(
        matches!(spaced, Err(Error::Infeasible { placed: 1, .. })),
        "impossible spacing not reported: {spaced:?}"
    );
    let thin = BinaryMask::from_fn(10, 10, |_, y| y == 4);
    let margin = sample_positive_seeds(&thin, 1, SeedConstraints::default(), 0);
    ensure!(
        matches!(margin, Err(Error::Infeasible { placed: 0, .. })),
        "impossible margin not reported: {margin:?}"
    );
    Ok(format!(
        "{feasible} sampled sets verified exhaustively, {infeasible} reported infeasible, 2 forced failures"
    ))
}

fn metrics_oracle() -> Verdict {
    let mut r = rng(5);
    for t in 0..1000 {
        let (w, h) = (r.random_range(1..=12), r.random_range(1..=12));
        let p_fg = r.random_range(0.0..1.0);
        let q_fg = r.random_range(0.0..1.0);
        let pred = BinaryMask::from_fn(w, h, |_, _| r.random_bool(p_fg));
        let gt = BinaryMask::from_fn(w, h, |_, _| r.random_bool(q_fg));
        let all: HashSet<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
        let p: HashSet<_> = pred.pixels().collect();
        let g: HashSet<_> = gt.pixels().collect();
        let pb: HashSet<_> = all.difference(&p).copied().collect();
        let gb: HashSet<_> = all.difference(&g).copied().collect();
        let acc = |pc: &HashSet<(usize, usize)>, gc: &HashSet<(usize, usize)>| match (gc.len(), pc.len()) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (n, _) => pc.intersection(gc).count() as f64 / n as f64,
        };
        let iou = |pc: &HashSet<(usize, usize)>, gc: &HashSet<(usize, usize)>| match pc.union(gc).count() {
            0 => 1.0,
            u => pc.intersection(gc).count() as f64 / u as f64,
        };
        let pa = (p.intersection(&g).count() + pb.intersection(&gb).count()) as f64 / all.len() as f64;
        let ma = (acc(&p, &g) + acc(&pb, &gb)) / 2.0;
        let mi = (iou(&p, &g) + iou(&pb, &gb)) / 2.0;
        let fi = iou(&p, &g);
        let c = confusion(&pred, &gt).map_err(|e| e.to_string())?;
        let got = (
            pixel_accuracy::<f64>(&c).map_err(|e| e.to_string())?,
            mean_accuracy::<f64>(&c),
            mean_iou::<f64>(&c),
            fg_iou(&pred, &gt).map_err(|e| e.to_string())?,
        );
        ensure!(
            got == (pa, ma, mi, fi),
            "pair {t}: got {got:?}, oracle {:?}",
            (pa, ma, mi, fi)
        );
    }
    let gt = BinaryMask::new(2, 2, vec![true, false, false, false]).unwrap();
    let pred = BinaryMask::new(2, 2, vec![true, true, false, false]).unwrap();
    let c = confusion(&pred, &gt).unwrap();
    let worked = (
        pixel_accuracy::<f64>(&c).unwrap(),
        mean_accuracy::<f64>(&c),
        mean_iou::<f64>(&c),
    );
    ensure!(
        worked == (0.75, (1.0 + 2.0 / 3.0) / 2.0, (0.5 + 2.0 / 3.0) / 2.0),
        "2x2 case gave {worked:?}"
    );
    ensure!(
        (worked.1 - 5.0 / 6.0).abs() < 1e-15 && (worked.2 - 7.0 / 12.0).abs() < 1e-15,
        "2x2 values off"
    );
    Ok(format!(
        "1000 random pairs exact; 2x2 case {} / {:.4} / {:.4}",
        worked.0, worked.1, worked.2
    ))
}

// --- finite differences ----------------------------------------------------

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-6;

fn random_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

// Distinct values away from zero: no relu kink or pooling tie within one step.
fn separated_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0).collect();
    v.shuffle(r);
    Tensor::from_vec(shape, v).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn fd_error(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn network_fd(net: &Network<f64>, objective: &dyn Fn(&Network<f64>) -> f64, grads: &[Tensor<f64>]) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (idx, p) in net.params().iter().enumerate() {
        let err = fd_error(&p.value, &grads[idx], |t| {
            let mut n = net.clone();
            n.params_mut()[idx].value = t.clone();
            objective(&n)
        });
        if err > worst.0 {
            worst = (err, p.name.clone());
        }
    }
    worst
}

fn randomised_net(config: NetworkConfig, seed: u64) -> Network<f64> {
    let mut net = init_network::<f64>(config, seed, None).unwrap();
    let mut r = rng(seed + 100);
    for p in net.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = random_tensor(&shape, &mut r).scale(0.8);
    }
    net
}

fn gradient_suite() -> Verdict {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    let mut note = |name: &str, e: f64| -> Result<(), String> {
        worst = worst.max(e);
        if e < FD_TOL {
            Ok(())
        } else {
            Err(format!("{name}: relative error {e:e}"))
        }
    };

    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 3, 7)] {
        let x = random_tensor(&[3, 6, 6], &mut r);
        let w = random_tensor(&[2, 3, k, k], &mut r);
        let b = random_tensor(&[2], &mut r);
        let up = random_tensor(conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap().shape(), &mut r);
        let g = conv2d_backward(&x, &w, &up, stride, pad).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            dot(&conv2d_forward(x, w, Some(b), stride, pad).unwrap(), &up)
        };
        note("conv input", fd_error(&x, &g.input, |t| f(t, &w, &b)))?;
        note("conv kernel", fd_error(&w, &g.kernel, |t| f(&x, t, &b)))?;
        note("conv bias", fd_error(&b, &g.bias, |t| f(&x, &w, t)))?;
    }
    for &(stride, pad, k) in &[(2, 1, 4), (4, 2, 8), (8, 4, 16)] {
        let x = random_tensor(&[2, 3, 3], &mut r);
        let w = random_tensor(&[2, 1, k, k], &mut r);
        let up = random_tensor(&[1, 3 * stride, 3 * stride], &mut r);
        let (gx, gw) = conv_transpose2d_backward(&x, &w, &up, stride, pad).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>| dot(&conv_transpose2d_forward(x, w, stride, pad).unwrap(), &up);
        note("upsample input", fd_error(&x, &gx, |t| f(t, &w)))?;
        note("upsample kernel", fd_error(&w, &gw, |t| f(&x, t)))?;
    }
    let x = separated_tensor(&[2, 6, 6], &mut r);
    let up = random_tensor(&[2, 6, 6], &mut r);
    note(
        "relu",
        fd_error(&x, &relu_backward(&x, &up).unwrap(), |t| dot(&relu_forward(t), &up)),
    )?;
    let pooled = maxpool2x2_forward(&x).unwrap();
    let up = random_tensor(pooled.output.shape(), &mut r);
    let g = maxpool2x2_backward(x.shape(), &pooled.argmax, &up).unwrap();
    note(
        "maxpool",
        fd_error(&x, &g, |t| dot(&maxpool2x2_forward(t).unwrap().output, &up)),
    )?;
    let p = Tensor::from_vec(&[1, 4, 4], (0..16).map(|_| r.random_range(0.05..0.95)).collect()).unwrap();
    let label = BinaryMask::from_fn(4, 4, |x, y| (x * 3 + y) % 2 == 0);
    let (_, g) = bce_loss(&p, &label).unwrap();
    note("bce", fd_error(&p, &g, |t| bce_loss(t, &label).unwrap().0))?;

    for (granularity, seed) in [(Granularity::Coarse, 11), (Granularity::Fine, 12)] {
        let config = NetworkConfig {
            input_channels: 5,
            encoder: vec![EncoderBlock::new(3), EncoderBlock::new(4)],
            head_kernels: vec![5, 3],
            head_channels: 3,
            granularity,
        };
        let net = randomised_net(config, seed);
        let input = random_tensor(&[5, 8, 8], &mut r);
        let label = BinaryMask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (1..5).contains(&y));
        let cache = net.forward_cached(&input).unwrap();
        let (_, g) = loss_and_logit_grad(&cache.logits, &cache.prob, &label).unwrap();
        let grads = net.backward(&cache, &g).unwrap();
        let objective = |n: &Network<f64>| {
            let c = n.forward_cached(&input).unwrap();
            loss_and_logit_grad(&c.logits, &c.prob, &label).unwrap().0
        };
        let (e, name) = network_fd(&net, &objective, &grads);
        note(&format!("{granularity:?} network {name}"), e)?;
    }
    Ok(format!(
        "all layers and both network variants, worst relative error {worst:.1e}"
    ))
}

fn zero_init_contract() -> Verdict {
    let mut r = rng(7);
    let mut runs = 0;
    for granularity in [Granularity::Coarse, Granularity::Fine] {
        for seed in 0..3 {
            let net = init_network::<f64>(NetworkConfig::default().with_granularity(granularity), seed, None).unwrap();
            let (h, w) = (32, 40);
            let rgb: Vec<f64> = (0..3 * h * w).map(|_| r.random_range(0.0..1.0)).collect();
            let mut outputs = Vec::new();
            for _ in 0..3 {
                let mut data = rgb.clone();
                data.extend((0..2 * h * w).map(|_| r.random_range(0.0..1.0)));
                let input = Tensor::from_vec(&[5, h, w], data).unwrap();
                let bits: Vec<u64> = net
                    .forward(&input)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect();
                outputs.push(bits);
            }
            ensure!(
                outputs.windows(2).all(|p| p[0] == p[1]),
                "{granularity:?} seed {seed}: output depends on click maps"
            );
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} untrained networks bitwise invariant to click-map content"
    ))
}

fn overfit_check() -> Verdict {
    let start = Instant::now();
    let s = &gen_shapes_dataset(1, 32, 32, 1)[0];
    let c = SeedConstraints::new(3.0, 2.0).unwrap();
    let pair: TrainingPair32 =
        build_training_pair(&s.image, &s.mask, 1, 5, &[1, 4, 8], c, 1).map_err(|e| e.to_string())?;
    let net = init_network::<f32>(NetworkConfig::default(), 0, None).unwrap();
    let tc = TrainConfig::default();
    ensure!(tc.iterations <= 2000, "default iterations {}", tc.iterations);
    let (net, _) = train(std::slice::from_ref(&pair), net, &tc).map_err(|e| e.to_string())?;
    let prob = net.forward(&pair_input(&pair).unwrap()).unwrap();
    let (loss, _) = bce_loss(&prob, &pair.label).unwrap();
    let iou = fg_iou(&predict_mask(&prob, 0.5).unwrap(), &pair.label).unwrap();
    let el = within(Duration::from_secs(120), start)?;
    ensure!((loss as f64) < 0.05 && iou > 0.9, "BCE {loss:.4}, fg_iou {iou:.4}");
    Ok(format!(
        "{} iterations: BCE {loss:.4}, fg_iou {iou:.4}, {el:.1?}",
        tc.iterations
    ))
}

const GENERALIZATION_ITERATIONS: usize = 16_000;

fn toy_generalization() -> Verdict {
    let start = Instant::now();
    let c = SeedConstraints::new(3.0, 2.0).unwrap();
    let pool = gen_shapes_dataset(300, 32, 32, 100);
    let train_set: Vec<TrainingPair32> = pool
        .iter()
        .enumerate()
        .filter_map(|(i, s)| build_training_pair(&s.image, &s.mask, 1 + i % 5, 5, &[1, 4, 8], c, i as u64).ok())
        .take(200)
        .collect();
    ensure!(
        train_set.len() == 200,
        "only {} feasible training pairs",
        train_set.len()
    );
    let net = init_network::<f32>(NetworkConfig::default(), 0, None).unwrap();
    let tc = TrainConfig {
        iterations: GENERALIZATION_ITERATIONS,
        ..TrainConfig::default()
    };
    let (net, _) = train(&train_set, net, &tc).map_err(|e| e.to_string())?;
    let test: Vec<CorpusItem> = gen_shapes_dataset(50, 32, 32, 200)
        .into_iter()
        .enumerate()
        .map(|(i, sample)| CorpusItem {
            id: format!("test_{i:02}"),
            sample,
        })
        .collect();
    let table = sensitivity(&net, &test, &ClickProtocol::default(), 5, 0.5).map_err(|e| e.to_string())?;
    let el = within(Duration::from_secs(30 * 60), start)?;
    let curve: Vec<String> = table.rows.iter().map(|r| format!("{:.4}", r.fg_iou)).collect();
    let one = table.rows[0].fg_iou;
    let drop = table.max_drop();
    ensure!(one >= 0.75, "1-click fg_iou {one:.4} < 0.75 (curve {curve:?})");
    ensure!(
        drop <= 0.02,
        "fg_iou drops by {drop:.4} between click counts (curve {curve:?})"
    );
    Ok(format!(
        "200 train / 50 test, fg_iou by clicks 1..5 = [{}], max drop {drop:.4}, {el:.1?}",
        curve.join(", ")
    ))
}

// --- fusion ----------------------------------------------------------------

fn oracle_box_iou(a: &BoundingBox, b: &BoundingBox) -> (u64, u64) {
    let ix = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x)) as u64;
    let iy = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y)) as u64;
    let inter = ix * iy;
    (inter, a.w as u64 * a.h as u64 + b.w as u64 * b.h as u64 - inter)
}

fn oracle_mask_iou(mask: &BinaryMask, b: &BoundingBox) -> (u64, u64) {
    let inside = |x: usize, y: usize| {
        (b.x as usize..(b.x + b.w) as usize).contains(&x) && (b.y as usize..(b.y + b.h) as usize).contains(&y)
    };
    let inter = mask.pixels().filter(|&(x, y)| inside(x, y)).count() as u64;
    (inter, mask.count() as u64 + b.w as u64 * b.h as u64 - inter)
}

fn random_box(r: &mut impl Rng, size: u32) -> BoundingBox {
    let x = r.random_range(0..size - 1);
    let y = r.random_range(0..size - 1);
    BoundingBox {
        x,
        y,
        w: r.random_range(1..=size - x),
        h: r.random_range(1..=size - y),
    }
}

/// Index into `props` of the expected winner: rank by descending score with
/// input order breaking ties, keep `top_k`, take the largest IoU (compared as
/// exact fractions), earliest rank on ties.
fn oracle_best(props: &[RegionProposal], top_k: usize, iou: impl Fn(&BoundingBox) -> (u64, u64)) -> usize {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| props[b].score.partial_cmp(&props[a].score).unwrap().then(a.cmp(&b)));
    let mut best = order[0];
    let mut best_iou = iou(&props[best].bbox);
    for &i in order.iter().take(top_k).skip(1) {
        let (n, d) = iou(&props[i].bbox);
        if (n as u128) * (best_iou.1 as u128) > (best_iou.0 as u128) * (d as u128) {
            best = i;
            best_iou = (n, d);
        }
    }
    best
}

fn fusion_oracle() -> Verdict {
    let mut r = rng(8);
    let size = 48u32;
    for t in 0..500 {
        let mbox = random_box(&mut r, size);
        let mask = BinaryMask::from_fn(size as usize, size as usize, |x, y| {
            (mbox.contains(x, y) && (x + y) % 3 != 0) || (x, y) == (mbox.x as usize, mbox.y as usize)
        });
        let n = r.random_range(1..=30);
        // Coarse scores so that ties in objectness actually occur.
        let props: Vec<RegionProposal> = (0..n)
            .map(|i| RegionProposal {
                bbox: random_box(&mut r, size),
                score: r.random_range(0..6) as f64 / 5.0,
                caption: format!("region {i}"),
            })
            .collect();
        let top_k = r.random_range(1..=n + 2);
        for criterion in [MatchCriterion::BoxIou, MatchCriterion::MaskIou] {
            let got = best_match(&mask, &props, top_k, criterion).map_err(|e| e.to_string())?;
            let mask_box = lyncean::imagecore::mask_bbox(&mask).unwrap();
            let want = match criterion {
                MatchCriterion::BoxIou => oracle_best(&props, top_k, |b| oracle_box_iou(b, &mask_box)),
                MatchCriterion::MaskIou => oracle_best(&props, top_k, |b| oracle_mask_iou(&mask, b)),
            };
            ensure!(
                got.caption == props[want].caption,
                "set {t} {criterion:?}: chose {:?}, oracle {:?}",
                got.caption,
                props[want].caption
            );
        }

        // Order invariance, with distinct scores so the ranking is unique.
        let distinct: Vec<RegionProposal> = props
            .iter()
            .enumerate()
            .map(|(i, p)| RegionProposal {
                score: p.score + i as f64 * 1e-3,
                ..p.clone()
            })
            .collect();
        let reference = best_match(&mask, &distinct, top_k, MatchCriterion::BoxIou).unwrap();
        let mut shuffled = distinct.clone();
        shuffled.shuffle(&mut r);
        let again = best_match(&mask, &shuffled, top_k, MatchCriterion::BoxIou).unwrap();
        ensure!(
            (again.chosen.clone(), again.iou, again.rank) == (reference.chosen.clone(), reference.iou, reference.rank),
            "set {t}: result depends on input order"
        );
    }
    Ok("500 random proposal sets match the oracle under both criteria; order invariant".into())
}

// --- round trips and reproducibility ----------------------------------------

fn lyncean_bin() -> &'static str {
    env!("CARGO_BIN_EXE_lyncean")
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(lyncean_bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn cli_pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    run_cli(
        &[
            "gen-shapes",
            "--count",
            "6",
            "--size",
            "32",
            "--out",
            "corpus",
            "--rng-seed",
            "9",
        ],
        dir,
    )?;
    run_cli(
        &[
            "gen-pairs",
            "--corpus",
            "corpus",
            "--out",
            "corpus",
            "--variants",
            "2",
            "--d1",
            "3",
            "--d2",
            "2",
            "--rng-seed",
            "4",
        ],
        dir,
    )?;
    run_cli(
        &[
            "train",
            "--pairs",
            "corpus",
            "--out",
            "net.ckpt",
            "--iterations",
            "150",
            "--rng-seed",
            "2",
        ],
        dir,
    )?;
    run_cli(
        &[
            "segment",
            "--checkpoint",
            "net.ckpt",
            "--image",
            "corpus/images/shape_0000.png",
            "--clicks",
            "+16,16 -2,2",
            "--out",
            "mask.png",
            "--prob",
            "prob.png",
        ],
        dir,
    )?;
    run_cli(
        &[
            "eval",
            "--checkpoint",
            "net.ckpt",
            "--corpus",
            "corpus",
            "--clicks",
            "2",
            "--out",
            "eval.json",
        ],
        dir,
    )?;
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).map_err(|e| e.to_string())?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn round_trips_and_reproducibility() -> Verdict {
    let mut r = rng(10);
    let mut ckpts = 0;
    for seed in 0..4 {
        let g = if seed % 2 == 0 {
            Granularity::Coarse
        } else {
            Granularity::Fine
        };
        let mut net = init_network::<f32>(NetworkConfig::default().with_granularity(g), seed, None).unwrap();
        for p in net.params_mut() {
            for v in p.value.data_mut() {
                *v += r.random_range(-1.0f32..1.0);
            }
        }
        let bytes = encode_checkpoint(&net).map_err(|e| e.to_string())?;
        let back = decode_checkpoint::<f32>(&bytes).map_err(|e| e.to_string())?;
        ensure!(
            encode_checkpoint(&back).unwrap() == bytes,
            "checkpoint re-encoding differs"
        );
        for (a, b) in net.params().iter().zip(back.params()) {
            ensure!(a.name == b.name, "parameter order changed");
            let same = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            ensure!(
                same && a.value.shape() == b.value.shape(),
                "{} changed in round trip",
                a.name
            );
        }
        ckpts += 1;
    }
    let mut pngs = 0;
    for _ in 0..20 {
        let (w, h) = (r.random_range(1..=40), r.random_range(1..=40));
        let img = ImageRgb::new(w, h, (0..w * h * 3).map(|_| r.random()).collect()).unwrap();
        let bytes = encode_image(&img).unwrap();
        let back = decode_image(&bytes).map_err(|e| e.to_string())?;
        ensure!(
            back == img && encode_image(&back).unwrap() == bytes,
            "image PNG round trip differs"
        );
        let mask = BinaryMask::from_fn(w, h, |_, _| r.random_bool(0.4));
        let bytes = encode_mask(&mask).unwrap();
        let back = decode_mask(&bytes).map_err(|e| e.to_string())?;
        ensure!(
            back == mask && encode_mask(&back).unwrap() == bytes,
            "mask PNG round trip differs"
        );
        pngs += 2;
    }

    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run_a = cli_pipeline(a.path())?;
    let run_b = cli_pipeline(b.path())?;
    ensure!(run_a.len() == run_b.len(), "runs produced different file sets");
    for ((na, da), (nb, db)) in run_a.iter().zip(&run_b) {
        ensure!(na == nb && da == db, "{na} differs between identical runs");
    }
    Ok(format!(
        "{ckpts} checkpoints and {pngs} PNGs byte-exact; two full CLI runs identical across {} files",
        run_a.len()
    ))
}

async fn service_call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn replay(app: &axum::Router, image: &str, clicks: &[(usize, usize, &str)]) -> Result<Vec<Vec<u8>>, String> {
    let (s, b) = service_call(app, "POST", "/api/sessions", Some(json!({"image": image}))).await;
    ensure!(s == StatusCode::OK, "create failed: {s}");
    let id: Value = serde_json::from_slice(&b).unwrap();
    let id = id["id"].as_str().unwrap().to_string();
    let mut out = Vec::new();
    for &(x, y, p) in clicks {
        let (s, b) = service_call(
            app,
            "POST",
            &format!("/api/sessions/{id}/seeds"),
            Some(json!({"x": x, "y": y, "polarity": p})),
        )
        .await;
        ensure!(s == StatusCode::OK, "click failed: {s}");
        out.push(b);
    }
    let (_, b) = service_call(app, "POST", &format!("/api/sessions/{id}/undo"), None).await;
    out.push(b);
    let (_, b) = service_call(app, "GET", &format!("/api/sessions/{id}/result?format=f32"), None).await;
    out.push(b);
    Ok(out)
}

fn service_replay() -> Verdict {
    let sample = gen_shapes_dataset(1, 40, 24, 12).remove(0);
    let image = B64.encode(encode_image(&sample.image).unwrap());
    let clicks = [
        (20, 12, "positive"),
        (1, 1, "negative"),
        (24, 10, "positive"),
        (38, 22, "negative"),
    ];
    let make = || {
        let net = init_network::<f32>(NetworkConfig::default(), 3, None).unwrap();
        lyncean_service::router(net, lyncean_service::ServiceConfig::default())
    };
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap();
    rt.block_on(async {
        let app = make();
        let first = replay(&app, &image, &clicks).await?;
        let second = replay(&app, &image, &clicks).await?;
        let fresh = replay(&make(), &image, &clicks).await?;
        ensure!(first == second, "replay in a new session differs");
        ensure!(first == fresh, "replay against a fresh service differs");
        Ok(format!(
            "{} responses byte-identical across sessions and service instances",
            first.len()
        ))
    })
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("voronoi oracle", voronoi_oracle),
        ("mcd correctness", mcd_correctness),
        ("constraint enforcement", constraint_enforcement),
        ("metrics oracle", metrics_oracle),
        ("gradient suite", gradient_suite),
        ("zero-init contract", zero_init_contract),
        ("overfit check", overfit_check),
        ("toy generalization", toy_generalization),
        ("fusion oracle", fusion_oracle),
        ("round trips and reproducibility", round_trips_and_reproducibility),
        ("service replay", service_replay),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
