//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 5 7`.

mod common;

use std::collections::{BTreeMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lesionseg::data::{generate_synthetic_dataset, write_patch, Species, SplitCounts, SyntheticSpec};
use lesionseg::experiments::report::{CSV_FILE, MARKDOWN_FILE};
use lesionseg::experiments::{check_consistency, parse_csv, predict_file, run_suite, RunConfig, Scenario};
use lesionseg::metrics::{dice, hausdorff, mean_surface_distance, BinaryMask, AVERAGE_LABEL};
use lesionseg::network::head::{encode_task, generate_kernels, DynamicKernels, HeadShape};
use lesionseg::network::{
    forward, forward_logits, init_params, load_checkpoint, save_checkpoint, Layout, ModelParams, NetworkConfig,
    Tensor,
};
use lesionseg::training::trainer::{EpochRecord, ValidationScores};
use lesionseg::training::{
    batch_gradients, loss_from_logits, select_checkpoint, train_dice, train_epoch, EmitRule, ImagePool,
    LeftoverPolicy, PoolConfig, SelectionCriterion, TrainState, TrainingConfig, TrainingHistory,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- 1

const GRAD_TOL: f64 = 1e-4;
const GRAD_TIME: Duration = Duration::from_secs(120);

fn gradient_check() -> Check {
    let start = Instant::now();
    let cfg = NetworkConfig {
        base_channels: 4,
        depth: 2,
        decoder_channels: 4,
        head_channels: 4,
        seed: 21,
        ..Default::default()
    };
    let mut params = init_params::<f64>(&cfg).map_err(|e| e.to_string())?;
    // move every array off its structured init so no path is silent
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.1).unwrap();
    for arr in params.arrays.iter_mut() {
        for v in arr.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let size = 16;
    let img = common::random_image(3, size, 17);
    let mask: Vec<u8> = (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64 - 6.5, (i % size) as f64 - 8.5);
            u8::from(r * r + c * c < 20.0)
        })
        .collect();
    let class_id = 4;
    let (_, analytic) = batch_gradients(&params, &[img.clone()], &[&mask], class_id).map_err(|e| e.to_string())?;

    let loss = |p: &ModelParams<f64>| -> f64 {
        let z = forward_logits(p, &img, class_id).unwrap();
        loss_from_logits(&z.data, &mask).unwrap().0
    };
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for a in 0..params.arrays.len() {
        let mut num = vec![0.0; params.arrays[a].len()];
        for j in 0..num.len() {
            let orig = params.arrays[a][j];
            params.arrays[a][j] = orig + h;
            let lp = loss(&params);
            params.arrays[a][j] = orig - h;
            let lm = loss(&params);
            params.arrays[a][j] = orig;
            num[j] = (lp - lm) / (2.0 * h);
        }
        let diff: f64 = num.iter().zip(&analytic[a]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic[a].iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-12);
        ensure!(na > 0.0, "{} has an all-zero analytic gradient", params.names[a]);
        if rel > worst.0 {
            worst = (rel, params.names[a].clone());
        }
        checked += num.len();
    }
    ensure!(
        params.names.iter().any(|n| n == "controller.weight") && params.names.iter().any(|n| n == "controller.bias"),
        "controller parameters missing from the check"
    );
    let elapsed = start.elapsed();
    ensure!(worst.0 < GRAD_TOL, "max relative error {:.3e} in {} (tol {GRAD_TOL:.0e})", worst.0, worst.1);
    ensure!(elapsed < GRAD_TIME, "took {elapsed:?} (limit {GRAD_TIME:?})");
    Ok(format!(
        "{} groups, {checked} parameters, max rel err {:.2e} ({}), {:.1}s",
        params.arrays.len(),
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn task_encoding() -> Check {
    let mut cases = 0;
    for m in 1..=8 {
        for i in 1..=m {
            let v = encode_task(i, m).map_err(|e| e.to_string())?;
            ensure!(v.len() == m, "len {} for m={m}", v.len());
            ensure!(v.values().iter().filter(|&&x| x == 1).count() == 1, "not one-hot for ({i},{m})");
            ensure!(v.values().iter().all(|&x| x <= 1), "non-binary entry for ({i},{m})");
            ensure!(v.values()[i - 1] == 1, "1 not at position {i} for m={m}");
            cases += 1;
        }
        ensure!(encode_task(0, m).is_err() && encode_task(m + 1, m).is_err(), "out-of-range accepted for m={m}");
    }
    Ok(format!("{cases} (i, m) pairs one-hot; out-of-range rejected"))
}

// ---------------------------------------------------------------- 3

fn head_layout() -> Check {
    let mut cases = 0;
    for cm in 1..=16 {
        for ch in 1..=16 {
            let w = ch * cm + ch + ch * ch + ch + ch + 1;
            let shape = HeadShape {
                in_channels: cm,
                hidden: ch,
            };
            ensure!(shape.kernel_len() == w, "({cm},{ch}): {} != {w}", shape.kernel_len());
            let k = DynamicKernels::<f64>::from_flat(shape, (0..w).map(|x| x as f64).collect())
                .map_err(|e| e.to_string())?;
            let parts = [k.w1().len(), k.b1().len(), k.w2().len(), k.b2().len(), k.w3().len()];
            ensure!(parts == [ch * cm, ch, ch * ch, ch, ch], "({cm},{ch}): part sizes {parts:?}");
            ensure!(k.b3() == (w - 1) as f64, "({cm},{ch}): b3 is not the last value");
            ensure!(
                DynamicKernels::<f64>::from_flat(shape, vec![0.0; w + 1]).is_err()
                    && DynamicKernels::<f64>::from_flat(shape, vec![0.0; w - 1]).is_err(),
                "({cm},{ch}): wrong length accepted"
            );
            let net = NetworkConfig {
                base_channels: 4,
                depth: 2,
                decoder_channels: cm,
                head_channels: ch,
                ..Default::default()
            };
            let layout = Layout::new(&net);
            let idx = layout.names().position(|n| n == "controller.weight").unwrap();
            let ctrl = layout.shapes().nth(idx).unwrap();
            ensure!(
                ctrl[..] == [w, net.feature_channels() + net.num_classes],
                "({cm},{ch}): controller shape {ctrl:?}"
            );
            cases += 1;
        }
    }
    ensure!(HeadShape { in_channels: 8, hidden: 8 }.kernel_len() == 153, "(8,8) is not 153");
    Ok(format!("{cases} (C_M, c_h) configs; (8,8) -> 153"))
}

// ---------------------------------------------------------------- 4

const AFFINE_TOL: f64 = 1e-9;

fn controller_affinity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let shape = HeadShape {
            in_channels: rng.gen_range(1..=8),
            hidden: rng.gen_range(1..=8),
        };
        let cf = rng.gen_range(1..=16);
        let m = rng.gen_range(1..=8);
        let w = shape.kernel_len();
        let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect() };
        let (w1, b1, w2, b2) = (vec(w * (cf + m)), vec(w), vec(w * (cf + m)), vec(w));
        let (x, y) = (vec(cf), vec(cf));
        let alpha = rng.gen_range(-3.0..3.0);
        let task = encode_task(rng.gen_range(1..=m), m).unwrap();
        let g = |p: &[f64], wt: &[f64], b: &[f64]| generate_kernels(p, &task, wt, b, shape).unwrap().into_flat();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let lhs = g(&mix, &w1, &b1);
        let (gx, gy) = (g(&x, &w1, &b1), g(&y, &w1, &b1));
        for k in 0..w {
            worst = worst.max((lhs[k] - (alpha * gx[k] + (1.0 - alpha) * gy[k])).abs());
        }
        // additive in the controller parameters
        let ws: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let bs: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let sum = g(&x, &ws, &bs);
        let g2 = g(&x, &w2, &b2);
        for k in 0..w {
            worst = worst.max((sum[k] - (gx[k] + g2[k])).abs());
        }
    }
    ensure!(worst <= AFFINE_TOL, "superposition error {worst:.3e} > {AFFINE_TOL:.0e}");
    Ok(format!("100 trials, max superposition error {worst:.2e}"))
}

// ---------------------------------------------------------------- 5

const ORACLE_TOL: f64 = 1e-9;

struct Grid {
    h: usize,
    w: usize,
    v: Vec<u8>,
}

fn oracle_surface(g: &Grid) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for r in 0..g.h {
        for c in 0..g.w {
            if g.v[r * g.w + c] == 0 {
                continue;
            }
            let border = r == 0 || c == 0 || r + 1 == g.h || c + 1 == g.w;
            let bg = |rr: usize, cc: usize| g.v[rr * g.w + cc] == 0;
            if border || bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1) {
                out.push((r as f64, c as f64));
            }
        }
    }
    out
}

/// Pairwise-distance reference for (HD, MSD) in microns.
fn oracle_distances(a: &Grid, b: &Grid, spacing: f64) -> (f64, f64) {
    let (sa, sb) = (oracle_surface(a), oracle_surface(b));
    if sa.is_empty() && sb.is_empty() {
        return (0.0, 0.0);
    }
    if sa.is_empty() || sb.is_empty() {
        let d = ((a.h * a.h + a.w * a.w) as f64).sqrt() * spacing;
        return (d, d);
    }
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let da: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    let db: Vec<f64> = sb.iter().map(|p| nearest(p, &sa)).collect();
    let hd = da.iter().chain(&db).copied().fold(0.0, f64::max);
    let msd = (da.iter().sum::<f64>() + db.iter().sum::<f64>()) / (da.len() + db.len()) as f64;
    (hd * spacing, msd * spacing)
}

fn oracle_dice(a: &Grid, b: &Grid) -> f64 {
    let inter = a.v.iter().zip(&b.v).filter(|(x, y)| **x == 1 && **y == 1).count();
    let (na, nb) = (a.v.iter().filter(|x| **x == 1).count(), b.v.iter().filter(|x| **x == 1).count());
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    let mut v = vec![0u8; h * w];
    match rng.gen_range(0..4) {
        0 => {
            let p = [0.0, 0.005, 0.05, 0.3, 0.7, 0.97, 1.0][rng.gen_range(0..7)];
            for x in v.iter_mut() {
                *x = u8::from(rng.gen_bool(p));
            }
        }
        1 => {
            for _ in 0..rng.gen_range(1..4) {
                let (cr, cc) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
                let rad = rng.gen_range(0.5..(h.max(w) as f64 / 2.0).max(1.0));
                for r in 0..h {
                    for c in 0..w {
                        if (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= rad * rad {
                            v[r * w + c] = 1;
                        }
                    }
                }
            }
        }
        2 => {
            let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let (r1, c1) = (rng.gen_range(r0..h), rng.gen_range(c0..w));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    v[r * w + c] = 1;
                }
            }
        }
        _ => {
            for _ in 0..rng.gen_range(1..5) {
                v[rng.gen_range(0..h * w)] = 1;
            }
        }
    }
    Grid { h, w, v }
}

fn mask(g: &Grid, spacing: f64) -> BinaryMask {
    BinaryMask::new(g.h, g.w, g.v.clone(), spacing).unwrap()
}

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (h, w) = if i < 50 { (64, 64) } else { (rng.gen_range(1..=64), rng.gen_range(1..=64)) };
        let spacing = rng.gen_range(0.1..2.0);
        let (a, b) = (random_grid(&mut rng, h, w), random_grid(&mut rng, h, w));
        let (ma, mb) = (mask(&a, spacing), mask(&b, spacing));
        let (hd, msd) = oracle_distances(&a, &b, spacing);
        let got_hd = hausdorff(&ma, &mb).unwrap();
        let got_msd = mean_surface_distance(&ma, &mb).unwrap();
        worst = worst.max((got_hd - hd).abs()).max((got_msd - msd).abs());
        let d = dice(&ma, &mb).unwrap();
        ensure!(d == oracle_dice(&a, &b), "pair {i}: dice {d} != set count {}", oracle_dice(&a, &b));
    }
    ensure!(worst <= ORACLE_TOL, "max |accelerated - oracle| = {worst:.3e} µm > {ORACLE_TOL:.0e}");

    let p = BinaryMask::from_points(8, 8, &[(0, 0)], 1.0).unwrap();
    let q = BinaryMask::from_points(8, 8, &[(3, 4)], 1.0).unwrap();
    ensure!(hausdorff(&p, &q).unwrap() == 5.0, "3-4-5 HD is {}", hausdorff(&p, &q).unwrap());
    ensure!(mean_surface_distance(&p, &q).unwrap() == 5.0, "3-4-5 MSD");
    let p = BinaryMask::from_points(4, 4, &[(0, 0), (0, 1)], 1.0).unwrap();
    let q = BinaryMask::from_points(4, 4, &[(0, 1), (1, 1)], 1.0).unwrap();
    ensure!(dice(&p, &q).unwrap() == 0.5, "Dice hand case is {}", dice(&p, &q).unwrap());
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "1000 pairs, max error {worst:.2e} µm, Dice exact, hand cases exact, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 6

fn metric_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut n = 0;
    for i in 0..500 {
        let (h, w) = (rng.gen_range(1..=48), rng.gen_range(1..=48));
        let spacing = rng.gen_range(0.05..3.0);
        let (a, b) = (random_grid(&mut rng, h, w), random_grid(&mut rng, h, w));
        let (ma, mb) = (mask(&a, spacing), mask(&b, spacing));
        let all = |x: &BinaryMask, y: &BinaryMask| {
            (dice(x, y).unwrap(), hausdorff(x, y).unwrap(), mean_surface_distance(x, y).unwrap())
        };
        let (d, hd, msd) = all(&ma, &mb);
        let (d2, hd2, msd2) = all(&mb, &ma);
        ensure!(d == d2 && hd == hd2 && msd == msd2, "pair {i}: not symmetric");
        ensure!((0.0..=1.0).contains(&d) && hd >= 0.0 && msd >= 0.0, "pair {i}: out of range");
        if !ma.is_empty() && !mb.is_empty() {
            ensure!(hd >= msd, "pair {i}: HD {hd} < MSD {msd}");
        }
        if !ma.is_empty() {
            ensure!(all(&ma, &ma) == (1.0, 0.0, 0.0), "pair {i}: identity fails");
        }
        let s = rng.gen_range(0.1..10.0);
        let (sa, sb) = (ma.with_spacing(spacing * s).unwrap(), mb.with_spacing(spacing * s).unwrap());
        let (ds, hds, msds) = all(&sa, &sb);
        ensure!(ds == d, "pair {i}: Dice changed under spacing scale");
        let tol = |v: f64| 1e-9 * v.abs().max(1.0);
        ensure!((hds - s * hd).abs() <= tol(s * hd), "pair {i}: HD not linear in spacing");
        ensure!((msds - s * msd).abs() <= tol(s * msd), "pair {i}: MSD not linear in spacing");
        n += 1;
    }
    Ok(format!("{n} random pairs: symmetry, identity, ranges, HD ≥ MSD, spacing linearity"))
}

// ---------------------------------------------------------------- 7

fn pool_properties() -> Check {
    let cfg = PoolConfig::default();
    ensure!(
        cfg.batch_size == 4 && cfg.capacity == 8 && cfg.emit_rule == EmitRule::StrictlyExceeds,
        "default pool config is {cfg:?}"
    );
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        prop::collection::vec((1usize..=6, any::<bool>()), 0..120),
        any::<bool>(),
    );
    let result = runner.run(&strategy, |(ops, carry)| {
        let cfg = PoolConfig {
            leftover: if carry { LeftoverPolicy::Carry } else { LeftoverPolicy::Drop },
            ..PoolConfig::default()
        };
        let mut pool = ImagePool::new(cfg).unwrap();
        let mut model: BTreeMap<usize, VecDeque<usize>> = BTreeMap::new();
        let mut emitted = Vec::new();
        let mut dropped = 0;
        for (id, &(class, end_epoch)) in ops.iter().enumerate() {
            let got = pool.offer(class, id);
            let q = model.entry(class).or_default();
            q.push_back(id);
            let want = (q.len() > 4).then(|| q.drain(..4).collect::<Vec<_>>());
            prop_assert_eq!(&got, &want);
            if let Some(b) = got {
                prop_assert_eq!(b.len(), 4);
                emitted.extend(b);
            }
            for c in 1..=6 {
                prop_assert!(pool.len(c) <= 8);
                prop_assert!(pool.len(c) <= 4);
            }
            if end_epoch {
                let flushed = pool.flush();
                for (c, b) in &flushed {
                    prop_assert_eq!(b.len(), 4);
                    let q = model.get_mut(c).unwrap();
                    let want: Vec<usize> = q.drain(..4).collect();
                    prop_assert_eq!(b, &want);
                    emitted.extend(b.iter().copied());
                }
                for q in model.values_mut() {
                    prop_assert!(q.len() < 4);
                    if !carry {
                        dropped += q.len();
                        q.clear();
                    }
                }
            }
            let stats = pool.stats();
            let resident: usize = model.values().map(VecDeque::len).sum();
            prop_assert_eq!(stats.offered, id + 1);
            prop_assert_eq!(stats.emitted, emitted.len());
            prop_assert_eq!(stats.dropped, dropped);
            prop_assert_eq!(pool.resident(), resident);
            prop_assert_eq!(stats.offered, stats.emitted + stats.dropped + pool.resident());
        }
        // every id is emitted at most once
        let mut seen = emitted.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), emitted.len());
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("10000 random offer/flush sequences: cap ≤ 8, FIFO batches of 4, conservation".into())
}

// ---------------------------------------------------------------- 8

const OVERFIT_DICE: f64 = 0.95;
const OVERFIT_EPOCHS: usize = 100;
const OVERFIT_TIME: Duration = Duration::from_secs(30 * 60);

fn overfit() -> Check {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let set = common::rendered_patches(&spec, Species::Mouse, 20, 8);
    let classes: std::collections::BTreeSet<usize> = set.iter().map(|p| p.class_id).collect();
    ensure!(set.len() == 20 && classes.len() == 6, "fixture is not 20 patches over 6 classes");
    let net = NetworkConfig {
        seed: 8,
        ..common::small_net(8)
    };
    let cfg = TrainingConfig {
        pool: PoolConfig {
            leftover: LeftoverPolicy::Carry,
            ..Default::default()
        },
        seed: 8,
        ..Default::default()
    };
    let mut state = TrainState::new(&net, &cfg).map_err(|e| e.to_string())?;
    let mut best = 0.0f64;
    for epoch in 1..=OVERFIT_EPOCHS {
        train_epoch(&mut state, &set).map_err(|e| e.to_string())?;
        if epoch % 5 == 0 {
            let d = train_dice(&state.params, &set, 0.5).map_err(|e| e.to_string())?;
            best = best.max(d);
            if d >= OVERFIT_DICE {
                let elapsed = start.elapsed();
                ensure!(elapsed < OVERFIT_TIME, "reached Dice {d:.4} but took {elapsed:?}");
                let file_dice = predicted_file_dice(&state.params, &set, &spec)?;
                ensure!(file_dice >= OVERFIT_DICE, "predict path gives Dice {file_dice:.4}");
                return Ok(format!(
                    "mean train Dice {d:.4} at epoch {epoch} ({} px, base {}), PNG predictions {file_dice:.4}, {:.0}s",
                    spec.working_size,
                    net.base_channels,
                    elapsed.as_secs_f64()
                ));
            }
        }
        ensure!(start.elapsed() < OVERFIT_TIME, "time limit hit at epoch {epoch}, best Dice {best:.4}");
    }
    Err(format!("best mean train Dice {best:.4} < {OVERFIT_DICE} after {OVERFIT_EPOCHS} epochs"))
}

/// Mean Dice of masks written by the predict path for the stored patches,
/// going through a saved checkpoint and PNG files.
fn predicted_file_dice(params: &ModelParams<f32>, set: &[lesionseg::data::LabeledPatch], spec: &SyntheticSpec) -> Result<f64, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = tmp.path().join("ckpt");
    save_checkpoint(params, &ckpt, 0, BTreeMap::new()).map_err(|e| e.to_string())?;
    let profile = lesionseg::data::SpeciesProfile {
        capture_size: spec.capture_size,
        working_size: spec.working_size,
        ..lesionseg::data::SpeciesProfile::mouse_default()
    };
    let mut total = 0.0;
    for (i, p) in set.iter().enumerate() {
        write_patch(p, tmp.path(), &format!("p{i}")).map_err(|e| e.to_string())?;
        let out = tmp.path().join(format!("p{i}_pred.png"));
        let pred = predict_file(&ckpt, &tmp.path().join(format!("p{i}_img.png")), p.class_id, &profile, 0.5, &out)
            .map_err(|e| e.to_string())?;
        let png = image::open(&out).map_err(|e| e.to_string())?.to_luma8();
        let from_png: Vec<u8> = png.pixels().map(|px| u8::from(px[0] == 255)).collect();
        let gt = BinaryMask::new(p.size, p.size, p.mask.clone(), p.spacing_um).unwrap();
        let written = BinaryMask::new(p.size, p.size, from_png, p.spacing_um).unwrap();
        ensure!(written == pred, "PNG differs from the returned mask");
        total += dice(&written, &gt).unwrap();
    }
    Ok(total / set.len() as f64)
}

// ---------------------------------------------------------------- 9

fn two_species_dataset(root: &Path, counts: SplitCounts, working: usize, shift: f64, seed: u64) -> std::path::PathBuf {
    let spec = SyntheticSpec {
        working_size: working,
        capture_size: working * 2,
        species: vec![(Species::Mouse, counts), (Species::Human, counts)],
        species_shift: shift,
        seed,
        ..Default::default()
    };
    generate_synthetic_dataset(&spec, root).unwrap().manifest_path
}

fn scenario_config(manifest: &Path, working: usize, net: &NetworkConfig, epochs: usize, seed: u64, scenarios: &str, extra: &str) -> String {
    format!(
        "[data]\nmanifest = {}\n\n[species.mouse]\ncapture_size = {}\nworking_size = {working}\n\n\
         [species.human]\ncapture_size = {}\nworking_size = {working}\n\n\
         [network]\nbase_channels = {}\ndepth = {}\ndecoder_channels = {}\nhead_channels = {}\n\n\
         [training]\nepochs = {epochs}\n{extra}\n[experiment]\nscenarios = {scenarios}\nseed = {seed}\n",
        manifest.display(),
        working * 2,
        working * 2,
        net.base_channels,
        net.depth,
        net.decoder_channels,
        net.head_channels,
    )
}

fn constructed_history() -> TrainingHistory {
    let rec = |epoch: usize, mouse: f64, human: f64| EpochRecord {
        epoch,
        train_loss: Some(1.0),
        steps: 1,
        dropped: 0,
        validation: BTreeMap::from([
            (Species::Mouse, ValidationScores { per_class: BTreeMap::from([(1, mouse)]), mean: mouse }),
            (Species::Human, ValidationScores { per_class: BTreeMap::from([(1, human)]), mean: human }),
        ]),
        checkpoint: None,
    };
    TrainingHistory {
        num_classes: 6,
        records: vec![rec(1, 0.4, 0.2), rec(2, 0.8, 0.3), rec(3, 0.6, 0.7), rec(4, 0.5, 0.6)],
    }
}

fn scenario_end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let working = 32;
    let manifest = two_species_dataset(&tmp.path().join("data"), SplitCounts { train: 2, val: 1, test: 1 }, working, 1.0, 9);
    let net = common::small_net(0);

    // selection on a history whose mouse and human peaks differ
    let h = constructed_history();
    let h = TrainingHistory::parse_tsv(&h.to_tsv()).map_err(|e| e.to_string())?;
    let (vm, vh) = (
        select_checkpoint(&h, SelectionCriterion::Vm).map_err(|e| e.to_string())?,
        select_checkpoint(&h, SelectionCriterion::Vh).map_err(|e| e.to_string())?,
    );
    ensure!((vm, vh) == (2, 3), "constructed history selects VM={vm}, VH={vh}; expected 2, 3");

    let mut csvs = Vec::new();
    let mut summary = String::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg_path = dir.join("run.ini");
        let text = scenario_config(&manifest, working, &net, 5, 7, "all", "");
        common::write_config(&cfg_path, &text);
        let mut cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
        cfg.out_dir = dir.join("out");
        let (report, outcomes) = run_suite(&cfg).map_err(|e| e.to_string())?;
        let got: Vec<Scenario> = outcomes.iter().map(|o| o.scenario).collect();
        ensure!(got == Scenario::ALL, "scenarios run: {got:?}");

        // selections follow the recorded histories
        for o in &outcomes {
            let hist_path = o.meta.history.clone().ok_or("no history path")?;
            let hist = TrainingHistory::load(&hist_path).map_err(|e| e.to_string())?;
            ensure!(hist.records.len() == 5, "{}: {} epochs recorded", o.scenario, hist.records.len());
            let want = select_checkpoint(&hist, o.scenario.criterion()).map_err(|e| e.to_string())?;
            ensure!(o.meta.selected_epoch == Some(want), "{}: selected {:?}, history argmax {want}", o.scenario, o.meta.selected_epoch);
            ensure!(o.meta.checkpoint.ends_with(&format!("epoch_{want:04}")), "{}: checkpoint {}", o.scenario, o.meta.checkpoint);
        }
        // M2H never reads human training files
        for o in outcomes.iter().filter(|o| matches!(o.scenario, Scenario::M2hVm | Scenario::M2hVh)) {
            ensure!(o.audit.paths(lesionseg::data::Split::Train, Species::Human).count() == 0, "M2H loaded human training data");
            ensure!(o.audit.paths(lesionseg::data::Split::Train, Species::Mouse).count() > 0, "M2H loaded no mouse training data");
        }
        let m2m = outcomes.iter().find(|o| o.scenario == Scenario::M2m).unwrap();
        ensure!(
            m2m.audit.entries.iter().all(|(_, s, _)| *s == Species::Mouse),
            "M2M touched human data"
        );

        let csv = std::fs::read_to_string(dir.join("out").join(CSV_FILE)).unwrap();
        let md = std::fs::read_to_string(dir.join("out").join(MARKDOWN_FILE)).unwrap();
        let cells = check_consistency(&csv, &md).map_err(|e| e.to_string())?;
        let records = parse_csv(&csv).map_err(|e| e.to_string())?;
        ensure!(records.len() == 5 * 7, "{} CSV rows", records.len());
        ensure!(records.iter().filter(|r| r.class == AVERAGE_LABEL).count() == 5, "missing Average rows");
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        ensure!(report.metadata.config_sha256 == hash, "config hash mismatch");
        summary = format!("{} rows, {cells} table cells consistent", records.len());
        csvs.push(csv);
    }
    ensure!(csvs[0] == csvs[1], "CSVs differ between identical runs");

    // scenario/species mismatch fails before training
    let mouse_only = tmp.path().join("mouse_only");
    let spec = SyntheticSpec {
        working_size: working,
        capture_size: working * 2,
        species: vec![(Species::Mouse, SplitCounts { train: 1, val: 1, test: 1 })],
        ..Default::default()
    };
    let m = generate_synthetic_dataset(&spec, &mouse_only.join("data")).unwrap().manifest_path;
    let cfg_path = mouse_only.join("run.ini");
    common::write_config(&cfg_path, &scenario_config(&m, working, &net, 5, 7, "H2H", ""));
    let mut cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    cfg.out_dir = mouse_only.join("out");
    match run_suite(&cfg) {
        Err(lesionseg::Error::Scenario(_)) => {}
        other => return Err(format!("H2H without human data gave {:?}", other.map(|_| ())))
    }
    ensure!(!cfg.out_dir.join("train").exists(), "training started despite the mismatch");

    Ok(format!("5 scenarios at 5 epochs, VM/VH = epochs {vm}/{vh} on constructed history, {summary}, CSVs byte-identical"))
}

// ---------------------------------------------------------------- 10

const ORDER_SLACK: f64 = 0.02;

fn transfer_ordering() -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let working = 32;
    let manifest = two_species_dataset(&tmp.path().join("data"), SplitCounts { train: 4, val: 2, test: 4 }, working, 1.0, 10);
    let net = common::small_net(0);
    let cfg_path = tmp.path().join("run.ini");
    common::write_config(
        &cfg_path,
        &scenario_config(&manifest, working, &net, 30, 3, "M2H_VM, H2H, MH2H", "leftover = carry\nkeep = best:1\n"),
    );
    let mut cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    cfg.out_dir = tmp.path().join("out");
    let (_, outcomes) = run_suite(&cfg).map_err(|e| e.to_string())?;
    let mean = |sc: Scenario| {
        outcomes
            .iter()
            .find(|o| o.scenario == sc)
            .and_then(|o| o.evaluation.average())
            .map(|t| t.dice)
            .unwrap_or(f64::NAN)
    };
    let (m2h, h2h, mh2h) = (mean(Scenario::M2hVm), mean(Scenario::H2h), mean(Scenario::Mh2h));
    let detail = format!(
        "human test Dice M2H {m2h:.3}, H2H {h2h:.3}, MH2H {mh2h:.3} ({:.0}s)",
        start.elapsed().as_secs_f64()
    );
    ensure!(m2h <= h2h + ORDER_SLACK && h2h <= mh2h + ORDER_SLACK, "ordering violated: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 11

fn checkpoint_round_trip() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let net = common::small_net(11);
    let cfg = TrainingConfig::default();
    let spec = SyntheticSpec {
        working_size: 32,
        ..Default::default()
    };
    let set = common::rendered_patches(&spec, Species::Human, 12, 11);
    let mut state = TrainState::new(&net, &cfg).map_err(|e| e.to_string())?;
    train_epoch(&mut state, &set).map_err(|e| e.to_string())?;
    let dir = tmp.path().join("ckpt");
    save_checkpoint(&state.params, &dir, 1, BTreeMap::new()).map_err(|e| e.to_string())?;
    let (loaded, manifest) = load_checkpoint(&dir).map_err(|e| e.to_string())?;
    ensure!(manifest.epoch == 1, "epoch not preserved");
    let mut maps = 0;
    for p in &set {
        let img = Tensor::from_vec(3, p.size, p.size, p.image.clone());
        for class_id in 1..=net.num_classes {
            let a = forward(&state.params, &img, class_id).map_err(|e| e.to_string())?;
            let b = forward(&loaded, &img, class_id).map_err(|e| e.to_string())?;
            ensure!(
                a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()),
                "probability map differs for class {class_id}"
            );
            maps += 1;
        }
    }
    Ok(format!("{maps} probability maps bit-identical after save/load"))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 11] = [
        (1, "gradient check", gradient_check),
        (2, "task encoding", task_encoding),
        (3, "dynamic head layout", head_layout),
        (4, "controller affinity", controller_affinity),
        (5, "metric oracle", metric_oracle),
        (6, "metric invariants", metric_invariants),
        (7, "pool properties", pool_properties),
        (8, "overfit smoke test", overfit),
        (9, "scenario end-to-end", scenario_end_to_end),
        (10, "transfer ordering", transfer_ordering),
        (11, "checkpoint round trip", checkpoint_round_trip),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} ({name}): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
