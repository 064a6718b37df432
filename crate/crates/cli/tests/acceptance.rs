//! Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Pass criterion names as arguments to run a subset.

use std::collections::{BTreeMap, HashSet};
use std::process::Command;
use std::time::{Duration, Instant};

use convbench::config::RunConfig;
use convbench::dataset::{self, generate_synthetic};
use convbench::engine::{
    conv_forward, dense_forward, loss_and_grad, pool_forward, LossKind, Network, TapeEntry,
};
use convbench::evaluation::{evaluate_production, roc_auc_binary, roc_auc_multiclass, stratified_kfold, FOLDS};
use convbench::modelspec::{
    canonicalize, canonicalize_with, infer_shapes, parse_sequence_text, Hyper, LayerSpec, Shape, SpecError,
    UserLayerKind, WorkspaceSequence, WORKSPACE_CAPACITY,
};
use convbench::training::{initialize, no_progress, train_fast};
use convbench::{rng, Tensor};
use rand::Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("gradient-fidelity", Duration::from_secs(30), gradient_fidelity),
        ("oracle-equivalence", Duration::from_secs(10), oracle_equivalence),
        ("shape-law", Duration::from_secs(1), shape_law),
        ("constraint-suite", Duration::from_secs(10), constraint_suite),
        ("auc-correctness", Duration::from_secs(10), auc_correctness),
        ("cv-integrity", Duration::from_secs(10), cv_integrity),
        ("end-to-end-learning", Duration::from_secs(300), end_to_end),
        ("determinism", Duration::from_secs(120), determinism),
        ("protocol-conformance", Duration::from_secs(120), protocol_conformance),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; over the {budget:?} budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{:.1}s]", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn seq(text: &str) -> WorkspaceSequence {
    WorkspaceSequence::try_from(parse_sequence_text(text).unwrap()).unwrap()
}

fn random_tensor(r: &mut rng::Rng, dims: Vec<usize>) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- gradients

const FD_EPS: f64 = 1e-4;

fn onehot(label: usize, k: usize) -> Tensor {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    Tensor::vector(v).unwrap()
}

fn activation_pattern(net: &Network, x: &Tensor) -> Vec<u64> {
    let pass = net.forward(x).unwrap();
    let mut out = Vec::new();
    for e in pass.tape.entries() {
        if let TapeEntry::Pool { argmax, .. } = e {
            out.extend(argmax.iter().map(|&a| a as u64));
        }
        if let Some(pre) = e.pre_activation() {
            out.extend(pre.data().iter().map(|&v| u64::from(v > 0.0)));
        }
    }
    out
}

struct FdStats {
    checked: usize,
    skipped: usize,
    worst: f64,
}

/// Central differences on `limit` sampled parameters (all when `None`).
/// Parameters whose ±ε perturbation flips a ReLU mask or pool argmax sit on a
/// kink where the derivative does not exist; they are counted, not compared.
fn fd_check(net: &mut Network, x: &Tensor, y: &Tensor, limit: Option<usize>, seed: u64) -> Result<FdStats, String> {
    let loss = |net: &Network| loss_and_grad(&net.forward(x).unwrap().probs, y, LossKind::Bce).unwrap().0;
    let pass = net.forward(x).unwrap();
    let (_, dlogits) = loss_and_grad(&pass.probs, y, LossKind::Bce).unwrap();
    let mut grads = net.zero_gradients();
    net.backward(pass.tape, &dlogits, &mut grads).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(t, g)| (0..g.len()).map(move |i| (t, i)))
        .collect();
    if let Some(n) = limit {
        let mut r = rng::seeded(seed);
        coords = (0..n).map(|_| coords[r.gen_range(0..coords.len())]).collect();
    }
    let base = activation_pattern(net, x);
    let mut stats = FdStats {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for (t, i) in coords {
        let orig = net.tensors_mut()[t].data()[i];
        net.tensors_mut()[t].data_mut()[i] = orig + FD_EPS;
        let (plus, pp) = (loss(net), activation_pattern(net, x));
        net.tensors_mut()[t].data_mut()[i] = orig - FD_EPS;
        let (minus, pm) = (loss(net), activation_pattern(net, x));
        net.tensors_mut()[t].data_mut()[i] = orig;
        if pp != base || pm != base {
            stats.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_EPS);
        let a = analytic[t][i];
        let err = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        if err > 1e-6 && err > 1e-4 * scale {
            return Err(format!("parameter tensor {t}[{i}]: analytic {a:e} vs numeric {numeric:e}"));
        }
        stats.worst = stats.worst.max(err / scale.max(1e-6));
        stats.checked += 1;
    }
    Ok(stats)
}

fn gradient_fidelity() -> Outcome {
    let small = Hyper {
        conv_filters: 4,
        dense_units: 6,
    };
    // Every canonical model has an input conv, a flatten and a classifier;
    // these add an extra conv, a pool, a hidden dense, and all of them.
    let models = [("conv", small), ("pool", small), ("dense", small), ("pool,dense", small), ("pool,dense", Hyper::default())];
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for seed in 0..20u64 {
        for (text, hyper) in models {
            let model = canonicalize_with(&seq(text), 3, hyper);
            let mut net = initialize(&model, (8, 8, 1), seed).unwrap();
            let mut r = rng::seeded(seed ^ 0xfeed);
            for t in net.tensors_mut() {
                if t.rank() == 1 {
                    for v in t.data_mut() {
                        *v = r.gen_range(-0.1..0.1);
                    }
                }
            }
            let x = random_tensor(&mut r, vec![8, 8, 1]);
            let y = onehot(seed as usize % 3, 3);
            // Default widths carry ~66k parameters; sample them.
            let limit = (hyper == Hyper::default()).then_some(400);
            let s = fd_check(&mut net, &x, &y, limit, seed).map_err(|e| format!("{text} seed {seed}: {e}"))?;
            checked += s.checked;
            skipped += s.skipped;
            worst = worst.max(s.worst);
        }
    }
    ensure(skipped * 10 <= checked, || format!("{skipped} of {} parameters sat on kinks", checked + skipped))?;
    Ok(format!(
        "{checked} parameters over 20 seeds agree (worst scaled error {worst:.1e}); {skipped} kink-straddling perturbations excluded"
    ))
}

// ------------------------------------------------------------------ oracles

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (h, wd, cin) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let cout = w.dims()[3];
    let mut out = vec![0.0; h * wd * cout];
    for y in 0..h {
        for xx in 0..wd {
            for o in 0..cout {
                let mut s = b.data()[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        for c in 0..cin {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            let v = x.data()[(sy as usize * wd + sx as usize) * cin + c];
                            s += v * w.data()[((ky * 3 + kx) * cin + c) * cout + o];
                        }
                    }
                }
                out[(y * wd + xx) * cout + o] = s;
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                for y in 2 * i..(2 * i + 2).min(h) {
                    for xx in 2 * j..(2 * j + 2).min(w) {
                        let v = x.data()[(y * w + xx) * c + ch];
                        let o = &mut out[(i * ow + j) * c + ch];
                        *o = o.max(v);
                    }
                }
            }
        }
    }
    (vec![oh, ow, c], out)
}

fn naive_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.dims()[0], w.dims()[1]);
    (0..n_out)
        .map(|o| b.data()[o] + (0..n_in).map(|i| x.data()[i] * w.data()[i * n_out + o]).sum::<f64>())
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng::seeded(2024);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (h, w, c) = (r.gen_range(1..=16), r.gen_range(1..=16), r.gen_range(1..=4));
        let cout = r.gen_range(1..=8);
        let x = random_tensor(&mut r, vec![h, w, c]);
        let kw = random_tensor(&mut r, vec![3, 3, c, cout]);
        let kb = random_tensor(&mut r, vec![cout]);
        let conv = conv_forward(&x, &kw, &kb).map_err(|e| e.to_string())?;
        let d = max_diff(conv.data(), &naive_conv(&x, &kw, &kb));
        ensure(d <= 1e-10, || format!("conv case {case} ({h}x{w}x{c}): diff {d:e}"))?;
        worst = worst.max(d);

        let (pooled, _) = pool_forward(&x).map_err(|e| e.to_string())?;
        let (dims, expected) = naive_pool(&x);
        ensure(pooled.dims() == dims, || format!("pool case {case}: dims {:?} vs {dims:?}", pooled.dims()))?;
        let d = max_diff(pooled.data(), &expected);
        ensure(d <= 1e-10, || format!("pool case {case}: diff {d:e}"))?;

        let n_in = h * w * c;
        let n_out = r.gen_range(1..=32);
        let flat = x.clone().flatten();
        let dw = random_tensor(&mut r, vec![n_in, n_out]);
        let db = random_tensor(&mut r, vec![n_out]);
        let dense = dense_forward(&flat, &dw, &db).map_err(|e| e.to_string())?;
        let d = max_diff(dense.data(), &naive_dense(&flat, &dw, &db));
        ensure(d <= 1e-10, || format!("dense case {case}: diff {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("100 random cases up to 16x16x4, max deviation {worst:.1e}"))
}

// ------------------------------------------------------------------- shapes

fn shape_law() -> Outcome {
    let mut extents = Vec::new();
    for p in 0..=7u32 {
        let text = vec!["pool"; p as usize].join(",");
        let model = canonicalize(&seq(&text), 7);
        let trace = infer_shapes(&model, (128, 128, 3));
        let last_spatial = trace
            .entries
            .iter()
            .filter_map(|e| match e.shape {
                Shape::Spatial([h, w, _]) => Some((h, w)),
                _ => None,
            })
            .last()
            .unwrap();
        let expected = 128usize.div_ceil(1 << p);
        ensure(last_spatial == (expected, expected), || {
            format!("{p} pools: got {last_spatial:?}, expected {expected}")
        })?;
        extents.push(expected);
    }
    let one = infer_shapes(&canonicalize(&seq("pool"), 7), (128, 128, 3));
    let pooled = one.shape_of("L1").unwrap();
    ensure(pooled.dims()[..2] == [64, 64], || format!("one pool gave {:?}", pooled.dims()))?;
    Ok(format!("spatial extents for p=0..7: {extents:?}"))
}

// -------------------------------------------------------------- constraints

fn check_sequence(s: &WorkspaceSequence, k: usize) -> Result<(), String> {
    ensure(s.len() <= WORKSPACE_CAPACITY, || format!("{} layers", s.len()))?;
    let kinds = s.kinds();
    let first_dense = kinds.iter().position(|&k| k == UserLayerKind::Dense).unwrap_or(kinds.len());
    ensure(kinds[first_dense..].iter().all(|&k| k == UserLayerKind::Dense), || {
        format!("dense not terminal: {}", s.to_text())
    })?;
    ensure(convbench::modelspec::validate(s.layers()).is_empty(), || "validator disagrees".into())?;
    let model = canonicalize(s, k);
    let flattens = model.layers().iter().filter(|l| l.kind == convbench::engine::LayerKind::Flatten).count();
    ensure(flattens == 1, || format!("{flattens} flatten layers"))?;
    let last = model.layers().last().unwrap();
    ensure(last.kind == convbench::engine::LayerKind::Classifier, || "classifier not last".into())?;
    let out = infer_shapes(&model, (16, 16, 3)).output();
    ensure(out == Shape::flat(k), || format!("output shape {:?}", out.dims()))
}

fn constraint_suite() -> Outcome {
    let mut r = rng::seeded(77);
    let (mut ops, mut full_rejections) = (0usize, 0usize);
    for trace in 0..10_000 {
        let k = r.gen_range(2..=7);
        let mut s = WorkspaceSequence::new();
        let mut next = 0;
        for _ in 0..r.gen_range(1..=30) {
            ops += 1;
            if r.gen_bool(0.7) || s.is_empty() {
                let kind = [UserLayerKind::Conv, UserLayerKind::Pool, UserLayerKind::Dense][r.gen_range(0..3)];
                next += 1;
                let layer = LayerSpec::new(format!("L{next}"), kind);
                match s.place_layer(layer, r.gen_range(0..=WORKSPACE_CAPACITY + 2)) {
                    Ok(n) => {
                        if kind == UserLayerKind::Dense {
                            ensure(n.layers().last().unwrap().id == format!("L{next}"), || {
                                format!("trace {trace}: dense not placed last")
                            })?;
                        }
                        s = n;
                    }
                    Err(SpecError::WorkspaceFull) => {
                        ensure(s.len() == WORKSPACE_CAPACITY, || format!("trace {trace}: full at {}", s.len()))?;
                        full_rejections += 1;
                    }
                    Err(e) => return Err(format!("trace {trace}: {e}")),
                }
            } else {
                let id = s.layers()[r.gen_range(0..s.len())].id.clone();
                s = s.remove_layer(&id).map_err(|e| e.to_string())?;
                ensure(!s.contains(&id), || format!("trace {trace}: {id} still present"))?;
            }
            check_sequence(&s, k).map_err(|e| format!("trace {trace}: {e}"))?;
        }
    }
    ensure(full_rejections > 0, || "capacity never reached".into())?;
    Ok(format!("10000 traces, {ops} operations, {full_rejections} over-capacity placements rejected"))
}

// ---------------------------------------------------------------------- AUC

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn auc_correctness() -> Outcome {
    let mut r = rng::seeded(5);
    let mut worst = 0.0f64;
    let mut with_ties = 0;
    for case in 0..500 {
        let n = r.gen_range(2..=200);
        // Small integer scores guarantee ties; a positive shift makes classes
        // overlap only partly.
        let levels = r.gen_range(2..=30);
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| (r.gen_range(0..levels) + if l { levels / 3 } else { 0 }) as f64)
            .collect();
        let distinct: HashSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        with_ties += usize::from(distinct.len() < n);
        let auc = roc_auc_binary(&scores, &labels).map_err(|e| e.to_string())?;
        let oracle = pairwise_auc(&scores, &labels);
        let d = (auc - oracle).abs();
        ensure(d <= 1e-12, || format!("case {case}: {auc} vs pairwise {oracle}"))?;
        worst = worst.max(d);
        for f in [|x: f64| x * x * x + 5.0, |x: f64| (x / 7.0).exp(), |x: f64| -1.0 / (x + 1.0)] {
            let t: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let again = roc_auc_binary(&t, &labels).map_err(|e| e.to_string())?;
            ensure(again == auc, || format!("case {case}: transform changed {auc} to {again}"))?;
        }
    }
    // Macro one-vs-rest agrees with per-class pairwise oracles.
    let k = 4;
    let labels: Vec<usize> = (0..120).map(|i| i % k).collect();
    let probs: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..k).map(|c| r.gen_range(0.0..1.0) + if c == l { 0.3 } else { 0.0 }).collect())
        .collect();
    let multi = roc_auc_multiclass(&probs, &labels, k).map_err(|e| e.to_string())?;
    let oracle: f64 = (0..k)
        .map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let t: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            pairwise_auc(&s, &t)
        })
        .sum::<f64>()
        / k as f64;
    ensure((multi.macro_auc - oracle).abs() <= 1e-12, || "macro AUC mismatch".into())?;
    Ok(format!("500 cases ({with_ties} with ties), max deviation {worst:.1e}; monotone transforms exact"))
}

// ---------------------------------------------------------------------- CV

fn cv_integrity() -> Outcome {
    // 7 balanced classes; 1400-item pool and a 2100-item evaluation draw.
    let ds = generate_synthetic(7, 500, 2, 2, 1).map_err(|e| e.to_string())?;
    for seed in 0..5u64 {
        let draws = dataset::balanced_draw_indices(&ds, &[1400, 2100], seed).map_err(|e| e.to_string())?;
        let (pool_idx, eval_idx) = (&draws[0], &draws[1]);
        let eval: HashSet<usize> = eval_idx.iter().copied().collect();
        ensure(pool_idx.iter().all(|i| !eval.contains(i)), || "pool and evaluation overlap".into())?;
        let pool = ds.subset(pool_idx);
        let labels = pool.labels();
        let plan = stratified_kfold(&labels, 7, FOLDS, seed).map_err(|e| e.to_string())?;
        let mut seen = vec![0u8; pool.len()];
        for (f, fold) in plan.folds.iter().enumerate() {
            ensure(fold.len() == 280, || format!("fold {f} has {} items", fold.len()))?;
            let mut per_class = BTreeMap::new();
            for &i in fold {
                seen[i] += 1;
                *per_class.entry(labels[i]).or_insert(0) += 1;
            }
            ensure(per_class.values().all(|&n| n == 40) && per_class.len() == 7, || {
                format!("fold {f} class counts {per_class:?}")
            })?;
            let train = plan.training_indices(f);
            let held: HashSet<usize> = fold.iter().copied().collect();
            ensure(train.len() == 1120 && train.iter().all(|i| !held.contains(i)), || {
                format!("fold {f} training overlaps its held-out fold")
            })?;
            ensure(train.iter().chain(fold).all(|&i| !eval.contains(&pool_idx[i])), || {
                format!("fold {f} touches evaluation items")
            })?;
        }
        ensure(seen.iter().all(|&c| c == 1), || "folds do not partition the pool".into())?;
    }
    Ok("5 seeds: 5 folds x 280 items, 40 per class, partitioning the pool, disjoint from evaluation".into())
}

// -------------------------------------------------------------- end to end

/// Desk-scale configuration: 12x12 images, 700-item train pool, default
/// layer widths.
fn scaled_config() -> RunConfig {
    let mut cfg = RunConfig::parse(
        "[dataset]\n\
         class_names = class0,class1,class2\n\
         image_height = 12\n\
         image_width = 12\n\
         fast_subset = 700\n\
         production_train = 700\n\
         production_eval = 1050\n\
         [training]\n\
         max_epochs_production = 6\n\
         patience_production = 2\n\
         cv_repeats = 5\n",
    )
    .unwrap();
    cfg.training.workers = 1;
    cfg
}

fn end_to_end() -> Outcome {
    let cfg = scaled_config();
    let ds = generate_synthetic(3, 600, 12, 12, 42).map_err(|e| e.to_string())?;
    let model = canonicalize(&seq("conv,pool,dense"), 3);
    let t = Instant::now();
    let fast = train_fast(&model, &ds, &cfg, 1, &no_progress).map_err(|e| e.to_string())?;
    let fast_time = t.elapsed();
    ensure(fast.trained.network.is_finite(), || "non-finite parameters".into())?;
    ensure(fast.report.accuracy >= 0.90, || format!("fast accuracy {:.4} < 0.90", fast.report.accuracy))?;
    let t = Instant::now();
    let report = evaluate_production(&model, &ds, &cfg, 1, &no_progress).map_err(|e| e.to_string())?;
    let prod_time = t.elapsed();
    let width = report.ci95.1 - report.ci95.0;
    ensure(report.median_auc >= 0.95, || format!("median AUC {:.4} < 0.95", report.median_auc))?;
    ensure(width <= 0.05, || format!("CI width {width:.4} > 0.05"))?;
    Ok(format!(
        "fast accuracy {:.4} ({} epochs, {:.0}s); production median AUC {:.4}, CI95 [{:.4}, {:.4}] ({:.0}s)",
        fast.report.accuracy,
        fast.report.stopped_epoch,
        fast_time.as_secs_f64(),
        report.median_auc,
        report.ci95.0,
        report.ci95.1,
        prod_time.as_secs_f64()
    ))
}

// ------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = "[dataset]\nnum_classes = 3\nimage_height = 12\nimage_width = 12\nfast_subset = 150\n\
                  [training]\nmax_epochs_fast = 4\n";
    std::fs::write(dir.path().join("run.config"), config).map_err(|e| e.to_string())?;
    let invoke = |ckpt: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_convbench"))
            .current_dir(dir.path())
            .args([
                "train", "conv,pool,dense", "--mode", "fast", "--data", "synth", "--seed", "7", "--config",
                "run.config", "--checkpoint", ckpt,
            ])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stdout).into_owned())?;
        let bytes = std::fs::read(dir.path().join(ckpt)).map_err(|e| e.to_string())?;
        Ok((out.stdout, bytes))
    };
    let (report_a, ckpt_a) = invoke("a.ckpt")?;
    let (report_b, ckpt_b) = invoke("b.ckpt")?;
    ensure(report_a == report_b, || "report JSON differs".into())?;
    ensure(ckpt_a == ckpt_b, || "checkpoints differ".into())?;
    let (model, _) = convbench::checkpoint::decode(&ckpt_a).map_err(|e| e.to_string())?;
    let report: Value = serde_json::from_slice(&report_a).map_err(|e| e.to_string())?;
    let logged: Vec<f64> = report["history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["val_loss"].as_f64().unwrap())
        .collect();
    let stored: Vec<f64> = model.history.iter().map(|r| r.val_loss).collect();
    ensure(
        logged.iter().map(|v| v.to_bits()).eq(stored.iter().map(|v| v.to_bits())),
        || "history in report and checkpoint differ".into(),
    )?;
    Ok(format!(
        "two CLI runs: identical {}-byte report, {}-byte checkpoint and {}-epoch history",
        report_a.len(),
        ckpt_a.len(),
        stored.len()
    ))
}

// ---------------------------------------------------------------- protocol

mod schema {
    use serde_json::Value;

    #[derive(Clone)]
    pub enum S {
        Str,
        Num,
        Int,
        Lit(&'static str),
        Nullable(Box<S>),
        Arr(Box<S>),
        Obj(Vec<(&'static str, S)>),
    }

    pub fn obj(fields: &[(&'static str, S)]) -> S {
        S::Obj(fields.to_vec())
    }

    pub fn arr(s: S) -> S {
        S::Arr(Box::new(s))
    }

    pub fn nullable(s: S) -> S {
        S::Nullable(Box::new(s))
    }

    pub fn check(v: &Value, s: &S, path: &str) -> Result<(), String> {
        let bad = |what: &str| Err(format!("{path}: expected {what}, got {v}"));
        match s {
            S::Str if v.is_string() => Ok(()),
            S::Num if v.is_number() => Ok(()),
            S::Int if v.is_u64() => Ok(()),
            S::Lit(l) if v.as_str() == Some(l) => Ok(()),
            S::Nullable(_) if v.is_null() => Ok(()),
            S::Nullable(inner) => check(v, inner, path),
            S::Arr(inner) => match v.as_array() {
                Some(items) => items
                    .iter()
                    .enumerate()
                    .try_for_each(|(i, item)| check(item, inner, &format!("{path}[{i}]"))),
                None => bad("array"),
            },
            S::Obj(fields) => match v.as_object() {
                Some(map) => fields.iter().try_for_each(|(k, fs)| match map.get(*k) {
                    Some(x) => check(x, fs, &format!("{path}.{k}")),
                    None => Err(format!("{path}: missing field {k}")),
                }),
                None => bad("object"),
            },
            S::Str => bad("string"),
            S::Num => bad("number"),
            S::Int => bad("non-negative integer"),
            S::Lit(l) => bad(l),
        }
    }
}

use schema::{arr, check, nullable, obj, S};

fn session_schema() -> S {
    obj(&[
        ("id", S::Str),
        ("sequence", obj(&[("layers", arr(obj(&[("id", S::Str), ("kind", S::Str)])))])),
        (
            "trace",
            arr(obj(&[("id", S::Str), ("shape", arr(S::Int)), ("indicator", nullable(S::Int))])),
        ),
        ("capacity", S::Int),
        ("selected_class", S::Int),
        ("active_job", nullable(S::Str)),
    ])
}

fn event_schema(kind: &str) -> Option<S> {
    Some(match kind {
        "state" => obj(&[("type", S::Lit("state")), ("state", S::Str)]),
        "epoch" => obj(&[
            ("type", S::Lit("epoch")),
            ("epoch", S::Int),
            ("train_loss", S::Num),
            ("val_loss", S::Num),
            ("val_acc", S::Num),
        ]),
        "done" => obj(&[
            ("type", S::Lit("done")),
            ("accuracy", S::Num),
            (
                "report",
                obj(&[
                    ("mode", S::Lit("fast")),
                    ("model", S::Str),
                    ("seed", S::Int),
                    ("accuracy", S::Num),
                    ("best_epoch", S::Int),
                    ("stopped_epoch", S::Int),
                    ("history", arr(obj(&[("epoch", S::Int), ("val_loss", S::Num)]))),
                ]),
            ),
        ]),
        _ => return None,
    })
}

fn activation_schema() -> S {
    let payload = obj(&[("name", S::Str), ("pgm", S::Str)]);
    obj(&[
        ("layer", S::Str),
        ("kind", S::Str),
        ("image_id", S::Str),
        ("class_id", S::Int),
        ("height", S::Int),
        ("width", S::Int),
        (
            "maps",
            arr(nullable(obj(&[("filter", S::Int), ("pre", payload.clone()), ("post", payload)]))),
        ),
        ("manifest", obj(&[("image_id", S::Str), ("layers", arr(obj(&[("id", S::Str)])))])),
    ])
}

fn history_schema() -> S {
    obj(&[
        ("session", S::Str),
        (
            "entries",
            arr(obj(&[
                ("job_id", S::Str),
                ("mode", S::Str),
                ("sequence", obj(&[("layers", arr(obj(&[("id", S::Str), ("kind", S::Str)])))])),
                ("model", S::Str),
                ("seed", S::Int),
                ("metric", S::Num),
                ("completed_at_ms", S::Int),
            ])),
        ),
    ])
}

/// Minimal HTTP/1.1 client over a fresh connection per request.
async fn http(addr: std::net::SocketAddr, method: &str, path: &str, body: Option<&str>) -> Result<(u16, String, Vec<u8>), String> {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut stream = tokio::net::TcpStream::connect(addr).await.map_err(|e| e.to_string())?;
    let body = body.unwrap_or("");
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes()).await.map_err(|e| e.to_string())?;
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.map_err(|e| e.to_string())?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or("no header terminator")?;
    let head = String::from_utf8_lossy(&raw[..split]).into_owned();
    let mut rest = &raw[split + 4..];
    let status: u16 = head
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or("bad status line")?;
    let chunked = head.to_ascii_lowercase().contains("transfer-encoding: chunked");
    let body = if chunked {
        let mut out = Vec::new();
        loop {
            let eol = rest.windows(2).position(|w| w == b"\r\n").ok_or("bad chunk")?;
            let size = usize::from_str_radix(String::from_utf8_lossy(&rest[..eol]).trim(), 16).map_err(|e| e.to_string())?;
            rest = &rest[eol + 2..];
            if size == 0 {
                break;
            }
            out.extend_from_slice(&rest[..size]);
            rest = &rest[size + 2..];
        }
        out
    } else {
        rest.to_vec()
    };
    Ok((status, head, body))
}

async fn json_call(addr: std::net::SocketAddr, method: &str, path: &str, body: Option<Value>) -> Result<(u16, Value), String> {
    let text = body.map(|b| b.to_string());
    let (status, _, bytes) = http(addr, method, path, text.as_deref()).await?;
    let v = serde_json::from_slice(&bytes).map_err(|e| format!("{method} {path}: {e}"))?;
    Ok((status, v))
}

async fn protocol_script(addr: std::net::SocketAddr) -> Outcome {
    let (status, s) = json_call(addr, "POST", "/sessions", None).await?;
    ensure(status == 201, || format!("create: {status}"))?;
    check(&s, &session_schema(), "session")?;
    let id = s["id"].as_str().unwrap().to_string();

    let mut view = Value::Null;
    for (kind, index) in [("conv", None), ("dense", Some(0)), ("pool", Some(1)), ("pool", Some(5))] {
        let mut body = json!({ "kind": kind });
        if let Some(i) = index {
            body["index"] = json!(i);
        }
        let (status, v) = json_call(addr, "POST", &format!("/sessions/{id}/layers"), Some(body)).await?;
        ensure(status == 200, || format!("place {kind}: {status} {v}"))?;
        check(&v, &session_schema(), "layers")?;
        view = v;
    }
    let kinds: Vec<&str> = view["sequence"]["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["kind"].as_str().unwrap())
        .collect();
    ensure(kinds == ["conv", "pool", "pool", "dense"], || format!("sequence {kinds:?}"))?;
    let dense_id = view["sequence"]["layers"][3]["id"].as_str().unwrap().to_string();

    // Two simultaneous train requests: exactly one is accepted.
    let train_path = format!("/sessions/{id}/train");
    let train = || json_call(addr, "POST", &train_path, Some(json!({"mode": "fast", "seed": 3})));
    let (a, b) = tokio::join!(train(), train());
    let (a, b) = (a?, b?);
    let mut statuses = [a.0, b.0];
    statuses.sort();
    ensure(statuses == [202, 409], || format!("double train gave {statuses:?}"))?;
    let accepted = if a.0 == 202 { &a.1 } else { &b.1 };
    check(
        accepted,
        &obj(&[("job_id", S::Str), ("state", S::Str), ("mode", S::Lit("fast")), ("seed", S::Int)]),
        "train",
    )?;
    let job = accepted["job_id"].as_str().unwrap().to_string();

    let (status, head, bytes) = http(addr, "GET", &format!("/jobs/{job}/events"), None).await?;
    ensure(status == 200 && head.to_ascii_lowercase().contains("application/x-ndjson"), || {
        format!("events: {status}")
    })?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| e.to_string())?;
    let events: Vec<Value> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut last_epoch = 0;
    for (i, e) in events.iter().enumerate() {
        let kind = e["type"].as_str().unwrap_or("");
        let s = event_schema(kind).ok_or_else(|| format!("unexpected event {e}"))?;
        check(e, &s, &format!("event[{i}]"))?;
        if kind == "epoch" {
            let n = e["epoch"].as_u64().unwrap();
            ensure(n > last_epoch, || "epochs not increasing".into())?;
            last_epoch = n;
        }
    }
    let states: Vec<&str> = events.iter().filter_map(|e| e["state"].as_str()).collect();
    ensure(states == ["queued", "training", "evaluating"], || format!("states {states:?}"))?;
    let done = events.last().unwrap();
    ensure(done["type"] == "done", || format!("terminal event {done}"))?;
    let acc = done["accuracy"].as_f64().unwrap();
    ensure((0.0..=1.0).contains(&acc), || format!("accuracy {acc}"))?;
    let (_, _, replay) = http(addr, "GET", &format!("/jobs/{job}/events"), None).await?;
    ensure(replay == bytes, || "replayed event log differs".into())?;

    let (status, act) = json_call(addr, "GET", &format!("/sessions/{id}/activations?layer=L1&class=1&filterSet=matrix"), None).await?;
    ensure(status == 200, || format!("activations: {status} {act}"))?;
    check(&act, &activation_schema(), "activations")?;
    let maps = act["maps"].as_array().unwrap();
    ensure(maps.len() == 12 && maps.iter().all(|m| !m.is_null()), || "expected 12 conv maps".into())?;
    let (status, _) = json_call(addr, "GET", &format!("/sessions/{id}/activations?layer={dense_id}"), None).await?;
    ensure(status == 422, || format!("dense activations gave {status}"))?;

    let (status, h) = json_call(addr, "GET", &format!("/sessions/{id}/history"), None).await?;
    ensure(status == 200, || format!("history: {status}"))?;
    check(&h, &history_schema(), "history")?;
    let entries = h["entries"].as_array().unwrap();
    ensure(entries.len() == 1 && entries[0]["job_id"] == job.as_str(), || format!("history {h}"))?;
    ensure(entries[0]["metric"].as_f64() == Some(acc), || "history metric differs from event".into())?;
    Ok(format!(
        "session script over HTTP: {} events ({last_epoch} epochs), 12-map activation matrix, 1 history entry; double train gave 202+409",
        events.len()
    ))
}

fn protocol_conformance() -> Outcome {
    let mut cfg = RunConfig::parse(
        "[model]\nconv_filters = 16\ndense_units = 32\n\
         [dataset]\nclass_names = a,b,c\nimage_height = 12\nimage_width = 12\nfast_subset = 150\n\
         [training]\nmax_epochs_fast = 3\n",
    )
    .unwrap();
    cfg.training.workers = 1;
    let data = generate_synthetic(3, 60, 12, 12, 9)
        .and_then(|d| d.with_class_names(cfg.dataset.class_names.clone()))
        .map_err(|e| e.to_string())?;
    let state = convbench_service::AppState::new(cfg, data, None).map_err(|e| e.to_string())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(convbench_service::serve_on(state, listener, async {
            let _ = stopped.await;
        }));
        let outcome = protocol_script(addr).await;
        let _ = stop.send(());
        let _ = server.await;
        outcome
    })
}
