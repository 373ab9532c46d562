#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rec_core::netcore::{init_network, Arch, Dataset, DenseNet};

/// He-initialized net with small random biases so no unit starts exactly at a kink.
pub fn random_net(arch: &Arch, seed: u64) -> DenseNet {
    let mut net = init_network(arch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let mut flat = net.flatten();
    for v in flat.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    net.set_flat(&flat).unwrap();
    net
}

pub fn random_batch(n: usize, d: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(x, y, classes).unwrap()
}

/// Largest coordinate-wise `|a − n| / max(|a|, |n|, floor)` between an
/// analytic gradient and central differences of `f`.
pub fn max_rel_error(x: &[f64], analytic: &[f64], h: f64, floor: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Values bounded away from zero, for checks of smoothed absolute values.
pub fn away_from_zero(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}
