//! The shift knob must actually shift: a fixed linear-probe protocol scores
//! measurably lower on fully shifted episodes than on base-domain episodes.

use restep_core::{sample_episode, shifted_domain, DomainParams, Episode};

/// Multinomial logistic regression on raw pixels, fit on the support set
/// with frozen hyperparameters. Intentionally independent of the crate's
/// autodiff machinery.
fn linear_probe_accuracy(ep: &Episode) -> f64 {
    let n = ep.n_way;
    let dims = ep.support_x.len() / ep.support_size();
    let mut w = vec![0.0f64; n * dims];
    let mut b = vec![0.0f64; n];
    let lr = 0.5;
    let xs = ep.support_x.data();
    for _ in 0..150 {
        let mut gw = vec![0.0f64; n * dims];
        let mut gb = vec![0.0f64; n];
        for (i, &label) in ep.support_y.iter().enumerate() {
            let x = &xs[i * dims..(i + 1) * dims];
            let mut logits: Vec<f64> = (0..n)
                .map(|c| b[c] + w[c * dims..(c + 1) * dims].iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            for (c, z) in logits.iter_mut().enumerate() {
                let p = (*z - max).exp() / denom;
                let err = p - if c == label { 1.0 } else { 0.0 };
                gb[c] += err;
                for (g, xv) in gw[c * dims..(c + 1) * dims].iter_mut().zip(x) {
                    *g += err * xv;
                }
            }
        }
        let scale = lr / ep.support_size() as f64;
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= scale * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= scale * g;
        }
    }

    let qs = ep.query_x.data();
    let mut correct = 0usize;
    for (i, &label) in ep.query_y.iter().enumerate() {
        let x = &qs[i * dims..(i + 1) * dims];
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..n {
            let z = b[c]
                + w[c * dims..(c + 1) * dims].iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>();
            if z > best_v {
                best_v = z;
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / ep.query_size() as f64
}

fn mean_probe_accuracy(domain: &DomainParams, episodes: u64) -> f64 {
    let mut acc = 0.0;
    for seed in 0..episodes {
        let ep = sample_episode(domain, 5, 5, 15, seed);
        acc += linear_probe_accuracy(&ep);
    }
    acc / episodes as f64
}

#[test]
#[ignore = "tuning scan"]
fn scan_difficulty() {
    for noise in [0.15, 0.20, 0.25, 0.30, 0.35] {
        for cutoff in [3.0, 4.0, 5.0] {
            let mut base = DomainParams::base();
            base.noise_sigma = noise;
            base.cutoff = cutoff;
            let shifted = shifted_domain(&base, 1.0);
            let b = 100.0 * mean_probe_accuracy(&base, 60);
            let s = 100.0 * mean_probe_accuracy(&shifted, 60);
            println!("noise={noise:.2} cutoff={cutoff:.1}: base {b:6.2} shifted {s:6.2} gap {:6.2}", b - s);
        }
    }
}

#[test]
fn full_shift_costs_the_probe_over_five_points() {
    let base = DomainParams::base();
    let shifted = shifted_domain(&base, 1.0);
    let base_acc = 100.0 * mean_probe_accuracy(&base, 200);
    let shifted_acc = 100.0 * mean_probe_accuracy(&shifted, 200);
    assert!(
        base_acc - shifted_acc > 5.0,
        "probe gap too small: base {base_acc:.2} vs shifted {shifted_acc:.2}"
    );
    // The probe must also be meaningfully above chance on the base domain,
    // otherwise the gap is vacuous.
    assert!(base_acc > 40.0, "base probe barely above chance: {base_acc:.2}");
}
