mod common;

use common::random_net;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rec_core::controller::{
    reward_transform, search_child, BaselineState, Controller, ControllerPolicy, Decision, Episode, SearchConfig,
    SearchContext,
};
use rec_core::netcore::{Arch, Dataset};
use rec_core::regularize::{PenaltyConfig, TrainSchedule};
use rec_core::transform::TransformLimits;

fn widen_probability(p: &ControllerPolicy, arch: &Arch, limits: &TransformLimits) -> f64 {
    let ep = p.sample_episode(arch, limits, 0).unwrap();
    let s = &ep.steps[0];
    match s.decision {
        Decision::Wider { widen: true, .. } => s.probability,
        Decision::Wider { widen: false, .. } => 1.0 - s.probability,
        _ => panic!("first step must be a wider decision"),
    }
}

fn bandit_limits(arch: &Arch) -> TransformLimits {
    TransformLimits {
        max_deeper: 0,
        ..TransformLimits::for_arch(arch)
    }
}

fn widened(ep: &Episode) -> bool {
    !ep.actions.is_empty()
}

#[test]
fn widen_frequencies_match_sigmoid_probabilities() {
    let arch = Arch::new(8, vec![16, 4], 3).unwrap();
    let limits = TransformLimits::for_arch(&arch);
    let mut p = ControllerPolicy::new(limits.max_width, 3);
    p.set_wider_bias(0.4);
    let probe = p.sample_episode(&arch, &limits, 0).unwrap();
    let probs: Vec<f64> = probe.steps[..2]
        .iter()
        .map(|s| match s.decision {
            Decision::Wider { widen, .. } => if widen { s.probability } else { 1.0 - s.probability },
            _ => unreachable!(),
        })
        .collect();
    let n = 10_000;
    let mut counts = [0usize; 2];
    for seed in 0..n {
        let ep = p.sample_episode(&arch, &limits, seed).unwrap();
        assert!(ep.wider_count() <= 2 && ep.deeper_count() <= 3);
        for s in &ep.steps {
            if let Decision::Wider { layer, widen: true } = s.decision {
                counts[layer] += 1;
            }
        }
    }
    for k in 0..2 {
        let freq = counts[k] as f64 / n as f64;
        assert!((freq - probs[k]).abs() < 0.03, "layer {k}: {freq} vs {}", probs[k]);
    }
}

#[test]
fn policy_gradient_matches_finite_differences() {
    // Two actions: widen (reward 1) or not (reward 0), so E[R] = p(widen).
    let arch = Arch::new(4, vec![4], 2).unwrap();
    let limits = bandit_limits(&arch);
    let mut policy = ControllerPolicy::new(limits.max_width, 11);
    policy.set_wider_bias(0.3);
    let theta = policy.flatten();

    let h = 1e-6;
    let mut fd = vec![0.0; theta.len()];
    let mut probe = policy.clone();
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += h;
        probe.set_flat(&t).unwrap();
        let up = widen_probability(&probe, &arch, &limits);
        t[i] -= 2.0 * h;
        probe.set_flat(&t).unwrap();
        let down = widen_probability(&probe, &arch, &limits);
        fd[i] = (up - down) / (2.0 * h);
    }

    let n = 50_000;
    let mut mc = vec![0.0; theta.len()];
    for seed in 0..n {
        let ep = policy.sample_episode(&arch, &limits, seed).unwrap();
        if widened(&ep) {
            let (_, g) = policy.log_prob_grad(&ep).unwrap();
            for (m, gi) in mc.iter_mut().zip(g) {
                *m += gi;
            }
        }
    }
    for m in mc.iter_mut() {
        *m /= n as f64;
    }
    let diff: f64 = mc.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(norm > 1e-3, "degenerate gradient");
    assert!(diff / norm < 0.05, "relative error {}", diff / norm);
}

#[test]
fn rigged_bandit_converges_to_rewarded_action() {
    let arch = Arch::new(4, vec![4], 2).unwrap();
    let limits = bandit_limits(&arch);
    let mut policy = ControllerPolicy::new(limits.max_width, 5);
    policy.set_wider_bias(-1.0);
    let start = widen_probability(&policy, &arch, &limits);
    assert!(start < 0.5);
    let mut baseline = BaselineState::default();
    let mut seed = 0;
    let mut updates = 0;
    while widen_probability(&policy, &arch, &limits) <= 0.9 {
        assert!(updates < 500, "not converged after 500 updates");
        let mut batch: Vec<Episode> = (0..5)
            .map(|_| {
                seed += 1;
                policy.sample_episode(&arch, &limits, seed).unwrap()
            })
            .collect();
        for ep in &mut batch {
            let a_val = if widened(ep) { 0.5 } else { 0.0 };
            let (r, next) = reward_transform(a_val, &baseline);
            baseline = next;
            ep.reward = Some(r.reward);
        }
        policy.reinforce_update(&batch, 0.2).unwrap();
        updates += 1;
    }
    assert!(updates <= 500);
}

fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 4));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        y.push(c);
        for j in 0..4 {
            let centre = if j == c { 1.5 } else { 0.0 };
            x[[i, j]] = centre + rng.random_range(-0.8..0.8);
        }
    }
    Dataset::new(x, y, 3).unwrap()
}

fn search_fixture() -> (rec_core::netcore::DenseNet, Dataset, Dataset) {
    let arch = Arch::new(4, vec![6, 5], 3).unwrap();
    (random_net(&arch, 1), blobs(90, 2), blobs(30, 3))
}

#[test]
fn search_child_best_of_seen_and_deterministic() {
    let (net, train, val) = search_fixture();
    let vals = [&val];
    let penalty = PenaltyConfig::none();
    let schedule = TrainSchedule {
        epochs: 2,
        batch_size: 16,
        lr: 0.05,
        momentum: 0.0,
    };
    let ctx = SearchContext {
        prev_net: &net,
        train: &train,
        validation: &vals,
        prior: None,
        penalty: &penalty,
        schedule: &schedule,
    };
    let cfg = SearchConfig {
        episodes: 4,
        children_per_batch: 2,
        child_epochs: 1,
        controller_lr: 0.1,
    };
    let mut c1 = Controller::new(net.arch(), 7);
    let a = search_child(&ctx, &mut c1, &cfg, 9).unwrap();
    assert_eq!(a.log.len(), 4);
    assert!(a.best.a_val >= a.no_expansion_a_val);
    assert!(a.log.iter().all(|r| r.a_val <= a.best.a_val));
    let wider = a.best.actions.iter().filter(|x| matches!(x, rec_core::transform::Action::Wider(_))).count();
    assert!(wider <= 2 && a.best.actions.len() - wider <= 3);

    let mut c2 = Controller::new(net.arch(), 7);
    let b = search_child(&ctx, &mut c2, &cfg, 9).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.net, b.best.net);
    assert_eq!(c1, c2);
    assert_ne!(c1.policy, Controller::new(net.arch(), 7).policy);
}

#[test]
fn forced_policy_returns_plain_fine_tuned_net() {
    let (net, train, val) = search_fixture();
    let vals = [&val];
    let penalty = PenaltyConfig::none();
    let schedule = TrainSchedule {
        epochs: 2,
        batch_size: 16,
        lr: 0.05,
        momentum: 0.0,
    };
    let ctx = SearchContext {
        prev_net: &net,
        train: &train,
        validation: &vals,
        prior: None,
        penalty: &penalty,
        schedule: &schedule,
    };
    let cfg = SearchConfig {
        episodes: 1,
        children_per_batch: 1,
        child_epochs: 2,
        controller_lr: 0.1,
    };
    let mut c = Controller::new(net.arch(), 7);
    c.policy.force_no_expansion();
    let out = search_child(&ctx, &mut c, &cfg, 3).unwrap();
    assert!(out.best.actions.is_empty());
    assert_eq!(out.best.net.arch(), net.arch());
    assert!(out.best.expansion.is_none());

    let empty = [];
    let bad = SearchContext { validation: &empty, ..ctx };
    assert!(search_child(&bad, &mut c, &cfg, 3).is_err());
}
