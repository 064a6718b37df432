//! Analytic gradients against central finite differences.

use convbench::engine::{loss_and_grad, LossKind, Network, TapeEntry};
use convbench::modelspec::{canonicalize_with, parse_sequence_text, Hyper, WorkspaceSequence};
use convbench::rng;
use convbench::training::initialize;
use convbench::Tensor;
use rand::Rng;

const EPS: f64 = 1e-4;

fn model_net(seq: &str, hyper: Hyper, k: usize, input: (usize, usize, usize), seed: u64) -> Network {
    let seq = WorkspaceSequence::try_from(parse_sequence_text(seq).unwrap()).unwrap();
    let model = canonicalize_with(&seq, k, hyper);
    let mut net = initialize(&model, input, seed).unwrap();
    // Nonzero biases so every bias path is exercised.
    let mut r = rng::seeded(seed ^ 0xb1a5);
    for t in net.tensors_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v = r.gen_range(-0.1..0.1);
            }
        }
    }
    net
}

fn onehot(label: usize, k: usize) -> Tensor {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    Tensor::vector(v).unwrap()
}

/// ReLU masks and pool argmaxes; FD across a change in these is meaningless.
fn pattern(net: &Network, x: &Tensor) -> Vec<u64> {
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

fn loss(net: &Network, x: &Tensor, y: &Tensor, kind: LossKind) -> f64 {
    loss_and_grad(&net.forward(x).unwrap().probs, y, kind).unwrap().0
}

/// Checks `limit` parameters (all if `None`), returning (checked, skipped).
fn check(net: &mut Network, x: &Tensor, y: &Tensor, kind: LossKind, limit: Option<usize>, seed: u64) -> (usize, usize) {
    let pass = net.forward(x).unwrap();
    let (_, dlogits) = loss_and_grad(&pass.probs, y, kind).unwrap();
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
    let base = pattern(net, x);
    let (mut checked, mut skipped) = (0, 0);
    for (t, i) in coords {
        let orig = net.tensors_mut()[t].data()[i];
        net.tensors_mut()[t].data_mut()[i] = orig + EPS;
        let (plus, pat_plus) = (loss(net, x, y, kind), pattern(net, x));
        net.tensors_mut()[t].data_mut()[i] = orig - EPS;
        let (minus, pat_minus) = (loss(net, x, y, kind), pattern(net, x));
        net.tensors_mut()[t].data_mut()[i] = orig;
        if pat_plus != base || pat_minus != base {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * EPS);
        let a = analytic[t][i];
        let err = (a - numeric).abs();
        assert!(
            err <= 1e-6 || err <= 1e-4 * a.abs().max(numeric.abs()),
            "tensor {t} index {i}: analytic {a} numeric {numeric}"
        );
        checked += 1;
    }
    (checked, skipped)
}

fn image(seed: u64, h: usize, w: usize, c: usize) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_layer_kind_small_widths() {
    let hyper = Hyper {
        conv_filters: 3,
        dense_units: 5,
    };
    for seq in ["", "conv", "pool", "dense", "pool,dense", "conv,pool,dense,dense"] {
        for seed in 0..20u64 {
            for kind in [LossKind::Bce, LossKind::Cce] {
                let mut net = model_net(seq, hyper, 3, (8, 8, 1), seed);
                let x = image(seed + 100, 8, 8, 1);
                let y = onehot(seed as usize % 3, 3);
                let (checked, skipped) = check(&mut net, &x, &y, kind, None, seed);
                assert!(checked > 0 && skipped * 5 <= checked, "{seq}: {checked} checked, {skipped} skipped");
            }
        }
    }
}

#[test]
fn full_model_default_widths_sampled() {
    for seed in 0..4u64 {
        let mut net = model_net("pool,dense", Hyper::default(), 3, (8, 8, 1), seed);
        let x = image(seed + 7, 8, 8, 1);
        let y = onehot(1, 3);
        let (checked, _) = check(&mut net, &x, &y, LossKind::Bce, Some(150), seed);
        assert!(checked >= 140);
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let net = model_net("conv,pool,dense", Hyper::default(), 7, (8, 8, 3), 1);
    let pass = net.forward(&image(2, 8, 8, 3)).unwrap();
    let mut grads = net.zero_gradients();
    net.backward(pass.tape, &Tensor::zeros(vec![7]).unwrap(), &mut grads).unwrap();
    assert!(grads.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn mismatched_tape_is_rejected() {
    let a = model_net("pool", Hyper::default(), 3, (8, 8, 1), 1);
    let b = model_net("pool,dense", Hyper::default(), 3, (8, 8, 1), 1);
    let pass = a.forward(&image(1, 8, 8, 1)).unwrap();
    let mut grads = b.zero_gradients();
    assert!(b.backward(pass.tape, &onehot(0, 3), &mut grads).is_err());
}
