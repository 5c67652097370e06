//! Fixtures shared by the benchmarks.

use mflab_core::data::{make_synthetic, Dataset, LabelMode, SyntheticSpec};
use mflab_core::harness::ExperimentConfig;
use mflab_core::harness::ExperimentKind;
use mflab_core::model::{init_ensemble, Ensemble, HyperParams};

/// The desk-scale preset at `α = 32` with `m` particles: parameters, the
/// shared Rademacher dataset and a fresh initial ensemble.
pub fn preset(m: usize) -> (HyperParams, Dataset, Ensemble) {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Train);
    cfg.model.m = m;
    let ds = make_synthetic(&SyntheticSpec {
        n: cfg.data.n,
        d: cfg.model.d,
        seed: cfg.data.seed,
        mode: LabelMode::Rademacher,
        distinct: true,
    })
    .expect("preset dataset");
    let hp = cfg.hyper(cfg.model.alpha, ds.n(), 0);
    let e = init_ensemble(&hp).expect("preset ensemble");
    (hp, ds, e)
}

/// Symmetric `n × n` test matrix with entries in `[-1, 1]`.
pub fn symmetric(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut next = move || {
        state = mflab_core::rng::mix64(state);
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = next();
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    a
}
