mod common;

use common::{away_from_zero, max_rel_error, random_batch, random_net};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rec_core::distill::kd_loss;
use rec_core::netcore::{backward, forward, loss_ce, Arch, DenseNet};
use rec_core::regularize::{ewc_term, l1_term, l21_term, mwc_loss, Anchor, Expansion, ExpansionMask, FisherDiag, PenaltyConfig, Prior};
use rec_core::transform::{apply_actions, Action, TransformLimits};

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn prior_for(net: &DenseNet, seed: u64) -> Prior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor: Vec<f64> = net.flatten().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    let fisher = (0..anchor.len()).map(|_| rng.random_range(0.0..2.0)).collect();
    Prior::new(Anchor::new(net.arch().clone(), anchor).unwrap(), FisherDiag::new(fisher, 10).unwrap()).unwrap()
}

#[test]
fn ewc_gradient() {
    let theta = away_from_zero(40, 1);
    let anchor = away_from_zero(40, 2);
    let fisher: Vec<f64> = away_from_zero(40, 3).iter().map(|v| v.abs()).collect();
    let (_, g) = ewc_term(&theta, &anchor, &fisher, 2.5).unwrap();
    let err = max_rel_error(&theta, &g, H, FLOOR, |p| ewc_term(p, &anchor, &fisher, 2.5).unwrap().0);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn l21_gradient() {
    let theta = away_from_zero(40, 4);
    let anchor = away_from_zero(40, 5);
    let (_, g) = l21_term(&theta, &anchor, 0.7, 1e-8).unwrap();
    let err = max_rel_error(&theta, &g, H, FLOOR, |p| l21_term(p, &anchor, 0.7, 1e-8).unwrap().0);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn l1_gradient_full_and_masked() {
    let theta = away_from_zero(40, 6);
    let (_, g) = l1_term(&theta, None, 0.3, 1e-8).unwrap();
    let err = max_rel_error(&theta, &g, H, FLOOR, |p| l1_term(p, None, 0.3, 1e-8).unwrap().0);
    assert!(err < 1e-6, "{err}");

    let mask = ExpansionMask::new((0..40).map(|i| i % 3 == 0).collect());
    let (_, g) = l1_term(&theta, Some(&mask), 0.3, 1e-8).unwrap();
    for (i, gi) in g.iter().enumerate() {
        if i % 3 != 0 {
            assert_eq!(*gi, 0.0);
        }
    }
    let err = max_rel_error(&theta, &g, H, FLOOR, |p| l1_term(p, Some(&mask), 0.3, 1e-8).unwrap().0);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_backprop_gradient() {
    let arch = Arch::new(4, vec![6, 5], 3).unwrap();
    let net = random_net(&arch, 7);
    let batch = random_batch(12, 4, 3, 8);
    let (logits, cache) = forward(&net, batch.inputs().view()).unwrap();
    let (_, dlogits) = loss_ce(logits.view(), batch.labels()).unwrap();
    let g = backward(&net, &cache, &dlogits).unwrap();
    let err = max_rel_error(&net.flatten(), &g, H, FLOOR, |p| {
        let n = DenseNet::from_flat(&arch, p).unwrap();
        let (l, _) = forward(&n, batch.inputs().view()).unwrap();
        loss_ce(l.view(), batch.labels()).unwrap().0
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn composed_mwc_gradient() {
    let arch = Arch::new(4, vec![6, 5], 3).unwrap();
    let net = random_net(&arch, 9);
    let batch = random_batch(16, 4, 3, 10);
    let prior = prior_for(&net, 11);
    let cfg = PenaltyConfig {
        lambda_ewc: 2.0,
        lambda_21: 0.05,
        lambda_1: 0.02,
        epsilon: 1e-8,
    };
    let (_, g) = mwc_loss(&net, &batch, Some(&prior), &cfg, None).unwrap();
    let err = max_rel_error(&net.flatten(), &g, H, FLOOR, |p| {
        let n = DenseNet::from_flat(&arch, p).unwrap();
        mwc_loss(&n, &batch, Some(&prior), &cfg, None).unwrap().0
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn masked_mwc_gradient_after_expansion() {
    let arch = Arch::new(4, vec![6, 5], 3).unwrap();
    let net = random_net(&arch, 12);
    let prior = prior_for(&net, 13);
    let limits = TransformLimits::for_arch(&arch);
    let morph = apply_actions(&net, &[Action::wider(0, 9), Action::deeper(1)], &limits, 14).unwrap();
    let expansion = Expansion::from(&morph);
    // Perturb so new coordinates are away from zero and the expanded net is
    // no longer at a replicated symmetric point.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let flat: Vec<f64> = morph.net.flatten().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    let expanded_arch = morph.net.arch().clone();
    let child = DenseNet::from_flat(&expanded_arch, &flat).unwrap();
    assert!(child.param_count() <= 500);
    let batch = random_batch(16, 4, 3, 16);
    let cfg = PenaltyConfig {
        lambda_ewc: 2.0,
        lambda_21: 0.05,
        lambda_1: 0.02,
        epsilon: 1e-8,
    };
    let (_, g) = mwc_loss(&child, &batch, Some(&prior), &cfg, Some(&expansion)).unwrap();
    let err = max_rel_error(&flat, &g, H, FLOOR, |p| {
        let n = DenseNet::from_flat(&expanded_arch, p).unwrap();
        mwc_loss(&n, &batch, Some(&prior), &cfg, Some(&expansion)).unwrap().0
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn kd_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let f = ndarray::Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
    let z = ndarray::Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
    let (_, d) = kd_loss(f.view(), z.view()).unwrap();
    let flat: Vec<f64> = f.iter().copied().collect();
    let analytic: Vec<f64> = d.iter().copied().collect();
    let err = max_rel_error(&flat, &analytic, 1e-4, FLOOR, |p| {
        let fp = ndarray::Array2::from_shape_vec((5, 3), p.to_vec()).unwrap();
        kd_loss(fp.view(), z.view()).unwrap().0
    });
    assert!(err < 1e-8, "{err}");
}
