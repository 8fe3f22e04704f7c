//! Scratch profiling of the adapt phases (not part of the test suite).

use std::time::Instant;

use restep::checkpoint::load_checkpoint;
use restep_core::{
    adapt, forward_loss, sample_episode, shifted_domain, AdaptConfig, DomainParams, Preset,
};

fn main() {
    let (spec, params) = load_checkpoint(std::path::Path::new("/tmp/ckpt/selected")).unwrap();
    let domain = shifted_domain(&DomainParams::base(), 1.0);
    let ep = sample_episode(&domain, 5, 1, 15, 0);

    // Total sgd_all adapt.
    let t = Instant::now();
    let cfg = AdaptConfig::preset(Preset::SgdAll, 0.0373, 0);
    let r = adapt(&spec, &params, &ep, &cfg).unwrap();
    println!("sgd_all adapt: {:?} (acc {:.3})", t.elapsed(), r.query_accuracy);

    // Other presets.
    for preset in [Preset::Sgd, Preset::SgdUsa, Preset::SgdUsaUfgsm] {
        let t = Instant::now();
        let cfg = AdaptConfig::preset(preset, 0.0373, 0);
        adapt(&spec, &params, &ep, &cfg).unwrap();
        println!("{} adapt: {:?}", preset.name(), t.elapsed());
    }

    // Forward+backward on a 300-example batch (the aug term).
    let (bx, by) = r.aug.to_batch().unwrap();
    let t = Instant::now();
    let n = 10;
    for _ in 0..n {
        let (_, tape) = forward_loss(&spec, &params, &bx, &by).unwrap();
        let _ = tape.gradients();
    }
    println!("300-batch fwd+bwd: {:?} per pass", t.elapsed() / n);

    // Forward only on the 300 batch.
    let t = Instant::now();
    for _ in 0..n {
        let _ = forward_loss(&spec, &params, &bx, &by).unwrap();
    }
    println!("300-batch fwd+loss: {:?} per pass", t.elapsed() / n);

    // Support-size (5) fwd+bwd.
    let t = Instant::now();
    for _ in 0..100 {
        let (_, tape) = forward_loss(&spec, &params, &ep.support_x, &ep.support_y).unwrap();
        let _ = tape.gradients();
    }
    println!("5-batch fwd+bwd: {:?} per pass", t.elapsed() / 100);
}
