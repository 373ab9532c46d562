//! Weight consolidation: Fisher-diagonal importance and the penalty family.
//!
//! The consolidated objective for a new task adds to the task's
//! cross-entropy
//!
//! * an EWC term `λ/2 · Σ F_i (θ_i − θ̄_i)²` anchoring to the previous model,
//! * a joint ℓ2,1 term `λ2 · Σ_i ‖(θ_i, θ̄_i)‖₂` over row groups of size two,
//! * an ℓ1 term `λ3 · Σ |θ_i|`.
//!
//! After an expansion the EWC and ℓ2,1 sums run only over coordinates that
//! carry over from the previous model, and ℓ1 runs only over the new ones.
//! Both norms are smoothed with `ε` so every term is differentiable.

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RecError, Result};
use crate::netcore::{backward, backward_deltas, forward, head_loss_ce, Arch, Dataset, DenseNet, Sgd};
use crate::transform::{IndexMap, Morphism};

const FISHER_CHUNK: usize = 512;

/// Per-parameter importance weights, aligned with a flat view.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    values: Vec<f64>,
    sample_count: usize,
}

impl FisherDiag {
    pub fn new(values: Vec<f64>, sample_count: usize) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(RecError::InvalidConfig(format!(
                "fisher entries must be finite and nonnegative, found {v}"
            )));
        }
        Ok(FisherDiag {
            values,
            sample_count,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Frozen parameters of the previously consolidated model.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    params: Vec<f64>,
    arch: Arch,
}

impl Anchor {
    pub fn new(arch: Arch, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(RecError::shape("anchor length", arch.param_count(), params.len()));
        }
        Ok(Anchor { params, arch })
    }

    pub fn from_net(net: &DenseNet) -> Self {
        Anchor {
            params: net.flatten(),
            arch: net.arch().clone(),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }
}

/// What a new task is consolidated against.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub anchor: Anchor,
    pub fisher: FisherDiag,
}

impl Prior {
    pub fn new(anchor: Anchor, fisher: FisherDiag) -> Result<Self> {
        if anchor.params.len() != fisher.len() {
            return Err(RecError::shape("fisher/anchor alignment", anchor.params.len(), fisher.len()));
        }
        Ok(Prior { anchor, fisher })
    }

    pub fn len(&self) -> usize {
        self.anchor.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.params.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda_ewc: f64,
    pub lambda_21: f64,
    pub lambda_1: f64,
    pub epsilon: f64,
}

impl PenaltyConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    /// Values reported for the MNIST experiments: λ1 = 2, λ2 = 1e-4, λ3 = 1e-3.
    pub fn paper_mnist() -> Self {
        PenaltyConfig {
            lambda_ewc: 2.0,
            lambda_21: 1e-4,
            lambda_1: 1e-3,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn none() -> Self {
        PenaltyConfig {
            lambda_ewc: 0.0,
            lambda_21: 0.0,
            lambda_1: 0.0,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn ewc(lambda_ewc: f64) -> Self {
        PenaltyConfig {
            lambda_ewc,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ewc", self.lambda_ewc),
            ("lambda_21", self.lambda_21),
            ("lambda_1", self.lambda_1),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(RecError::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-4) {
            return Err(RecError::InvalidConfig(format!(
                "epsilon must lie in (0, 1e-4], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self::paper_mnist()
    }
}

/// Flags parameters created by the current task's expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionMask {
    is_new: Vec<bool>,
}

impl ExpansionMask {
    pub fn new(is_new: Vec<bool>) -> Self {
        ExpansionMask { is_new }
    }

    pub fn all(len: usize) -> Self {
        ExpansionMask::new(vec![true; len])
    }

    pub fn none(len: usize) -> Self {
        ExpansionMask::new(vec![false; len])
    }

    pub fn is_new(&self) -> &[bool] {
        &self.is_new
    }

    pub fn len(&self) -> usize {
        self.is_new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_new.is_empty()
    }

    pub fn count_new(&self) -> usize {
        self.is_new.iter().filter(|&&b| b).count()
    }
}

/// Alignment of an expanded child to the model its prior was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub index_map: IndexMap,
    pub mask: ExpansionMask,
}

impl From<&Morphism> for Expansion {
    fn from(m: &Morphism) -> Self {
        Expansion {
            index_map: m.index_map.clone(),
            mask: m.mask.clone(),
        }
    }
}

/// Empirical Fisher diagonal, using the gradient of `log p(y | x)` at the
/// observed label.
///
/// Uses every sample when `max_samples >= dataset.len()`, otherwise a seeded
/// subset of `max_samples` rows.
pub fn estimate_fisher(net: &DenseNet, dataset: &Dataset, max_samples: usize, seed: u64) -> Result<FisherDiag> {
    if dataset.is_empty() || max_samples == 0 {
        return Err(RecError::EmptyDataset("fisher estimation"));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    if max_samples < dataset.len() {
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        indices.truncate(max_samples);
        indices.sort_unstable();
    }
    let count = indices.len();
    let mut sums = vec![0.0; net.param_count()];
    let offsets = net.layer_offsets();
    for chunk in indices.chunks(FISHER_CHUNK) {
        let batch = dataset.select(chunk)?;
        let (logits, cache) = forward(net, batch.inputs().view())?;
        // Scaling by the batch size recovers the per-sample score.
        let (_, mut dlogits) = head_loss_ce(&logits, batch.labels(), batch.head())?;
        dlogits *= chunk.len() as f64;
        let deltas = backward_deltas(net, &cache, &dlogits)?;
        for (l, delta) in deltas.iter().enumerate() {
            let a_sq = cache.activations()[l].mapv(|x| x * x);
            let d_sq = delta.mapv(|x| x * x);
            let w_sq = a_sq.t().dot(&d_sq);
            let mut off = offsets[l];
            for v in w_sq.iter() {
                sums[off] += v;
                off += 1;
            }
            for v in d_sq.sum_axis(Axis(0)).iter() {
                sums[off] += v;
                off += 1;
            }
        }
    }
    let values = sums.into_iter().map(|s| s / count as f64).collect();
    FisherDiag::new(values, count)
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(RecError::shape(context, expected, actual));
    }
    Ok(())
}

/// `(λ/2)·Σ F_i (θ_i − θ̄_i)²` and its gradient.
pub fn ewc_term(params: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    check_len("ewc anchor", params.len(), anchor.len())?;
    check_len("ewc fisher", params.len(), fisher.len())?;
    let mut value = 0.0;
    let grad = params
        .iter()
        .zip(anchor)
        .zip(fisher)
        .map(|((&p, &a), &f)| {
            let d = p - a;
            value += f * d * d;
            lambda * f * d
        })
        .collect();
    Ok((0.5 * lambda * value, grad))
}

/// `λ2·Σ_i sqrt(θ_i² + θ̄_i² + ε²)`; the anchor receives no gradient.
pub fn l21_term(params: &[f64], anchor: &[f64], lambda: f64, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    check_len("l21 anchor", params.len(), anchor.len())?;
    let eps2 = epsilon * epsilon;
    let mut value = 0.0;
    let grad = params
        .iter()
        .zip(anchor)
        .map(|(&p, &a)| {
            let norm = (p * p + a * a + eps2).sqrt();
            value += norm;
            lambda * p / norm
        })
        .collect();
    Ok((lambda * value, grad))
}

/// `λ3·Σ_{i ∈ mask} sqrt(θ_i² + ε²)`; `None` means every coordinate.
pub fn l1_term(params: &[f64], mask: Option<&ExpansionMask>, lambda: f64, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if let Some(m) = mask {
        check_len("l1 mask", params.len(), m.len())?;
    }
    let eps2 = epsilon * epsilon;
    let mut value = 0.0;
    let grad = params
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if mask.is_some_and(|m| !m.is_new[i]) {
                return 0.0;
            }
            let norm = (p * p + eps2).sqrt();
            value += norm;
            lambda * p / norm
        })
        .collect();
    Ok((lambda * value, grad))
}

/// Penalty terms resolved against one network layout.
#[derive(Debug, Clone)]
struct PenaltyPlan {
    cfg: PenaltyConfig,
    anchored: Vec<usize>,
    anchor: Vec<f64>,
    fisher: Vec<f64>,
    sparse: Option<ExpansionMask>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PenaltyBreakdown {
    pub ewc: f64,
    pub l21: f64,
    pub l1: f64,
}

impl PenaltyPlan {
    fn new(prior: &Prior, cfg: &PenaltyConfig, expansion: Option<&Expansion>, n_params: usize) -> Result<Self> {
        cfg.validate()?;
        match expansion {
            None => {
                check_len("prior alignment", n_params, prior.len())?;
                Ok(PenaltyPlan {
                    cfg: *cfg,
                    anchored: (0..n_params).collect(),
                    anchor: prior.anchor.params.clone(),
                    fisher: prior.fisher.values.clone(),
                    sparse: None,
                })
            }
            Some(exp) => {
                check_len("expansion source", prior.len(), exp.index_map.old_len())?;
                check_len("expansion target", n_params, exp.index_map.new_len())?;
                check_len("expansion mask", n_params, exp.mask.len())?;
                let inverse = exp.index_map.inverse();
                let mut anchored = Vec::new();
                let mut anchor = Vec::new();
                let mut fisher = Vec::new();
                for (c, old) in inverse.iter().enumerate() {
                    match (old, exp.mask.is_new[c]) {
                        (Some(o), false) => {
                            anchored.push(c);
                            anchor.push(prior.anchor.params[*o]);
                            fisher.push(prior.fisher.values[*o]);
                        }
                        (None, true) => {}
                        _ => {
                            return Err(RecError::InvalidConfig(format!(
                                "coordinate {c} is both mapped and new, or neither"
                            )))
                        }
                    }
                }
                Ok(PenaltyPlan {
                    cfg: *cfg,
                    anchored,
                    anchor,
                    fisher,
                    sparse: Some(exp.mask.clone()),
                })
            }
        }
    }

    /// Adds penalty gradients into `grads` and returns the term values.
    fn apply(&self, params: &[f64], grads: &mut [f64]) -> Result<PenaltyBreakdown> {
        let gathered: Vec<f64> = self.anchored.iter().map(|&c| params[c]).collect();
        let mut out = PenaltyBreakdown::default();
        if self.cfg.lambda_ewc > 0.0 {
            let (v, g) = ewc_term(&gathered, &self.anchor, &self.fisher, self.cfg.lambda_ewc)?;
            out.ewc = v;
            for (&c, gi) in self.anchored.iter().zip(g) {
                grads[c] += gi;
            }
        }
        if self.cfg.lambda_21 > 0.0 {
            let (v, g) = l21_term(&gathered, &self.anchor, self.cfg.lambda_21, self.cfg.epsilon)?;
            out.l21 = v;
            for (&c, gi) in self.anchored.iter().zip(g) {
                grads[c] += gi;
            }
        }
        if self.cfg.lambda_1 > 0.0 {
            let (v, g) = l1_term(params, self.sparse.as_ref(), self.cfg.lambda_1, self.cfg.epsilon)?;
            out.l1 = v;
            for (gi, d) in grads.iter_mut().zip(g) {
                *gi += d;
            }
        }
        Ok(out)
    }
}

/// Cross-entropy plus the consolidation penalties, value and full gradient.
///
/// Without a prior this is plain cross-entropy. With an expansion the
/// penalties follow the masked index sets described in the module docs.
pub fn mwc_loss(
    net: &DenseNet,
    batch: &Dataset,
    prior: Option<&Prior>,
    cfg: &PenaltyConfig,
    expansion: Option<&Expansion>,
) -> Result<(f64, Vec<f64>)> {
    let plan = prior
        .map(|p| PenaltyPlan::new(p, cfg, expansion, net.param_count()))
        .transpose()?;
    let (value, grads, _) = loss_with_plan(net, batch, plan.as_ref())?;
    Ok((value, grads))
}

fn loss_with_plan(
    net: &DenseNet,
    batch: &Dataset,
    plan: Option<&PenaltyPlan>,
) -> Result<(f64, Vec<f64>, PenaltyBreakdown)> {
    let (logits, cache) = forward(net, batch.inputs().view())?;
    let (ce, dlogits) = head_loss_ce(&logits, batch.labels(), batch.head())?;
    let mut grads = backward(net, &cache, &dlogits)?;
    let parts = match plan {
        Some(p) => p.apply(&net.flatten(), &mut grads)?,
        None => PenaltyBreakdown::default(),
    };
    Ok((ce + parts.ewc + parts.l21 + parts.l1, grads, parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl TrainSchedule {
    /// SGD, lr 0.001, batch 256, 8 epochs.
    pub fn paper_mnist() -> Self {
        TrainSchedule {
            epochs: 8,
            batch_size: 256,
            lr: 0.001,
            momentum: 0.0,
        }
    }

    pub fn with_epochs(self, epochs: usize) -> Self {
        TrainSchedule { epochs, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RecError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(RecError::InvalidConfig(format!(
                "need lr >= 0 and momentum in [0, 1), got {} / {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// Seeded minibatch order for one epoch.
pub(crate) fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Minibatch SGD on [`mwc_loss`]. Returns the network after the last epoch.
///
/// Aborts with [`RecError::NonFinite`] (carrying the offending network) as
/// soon as a loss or gradient stops being finite.
pub fn train_task(
    net: &DenseNet,
    train: &Dataset,
    prior: Option<&Prior>,
    cfg: &PenaltyConfig,
    expansion: Option<&Expansion>,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<DenseNet> {
    schedule.validate()?;
    let plan = prior
        .map(|p| PenaltyPlan::new(p, cfg, expansion, net.param_count()))
        .transpose()?;
    let mut net = net.clone();
    let mut sgd = Sgd::new(schedule.lr, schedule.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 0..schedule.epochs {
        let order = epoch_order(train.len(), &mut rng);
        for (step, idx) in order.chunks(schedule.batch_size).enumerate() {
            let batch = train.select(idx)?;
            let (value, grads, _) = loss_with_plan(&net, &batch, plan.as_ref())?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(RecError::NonFinite {
                    context: format!("training loss at epoch {epoch}, step {step} (value {value})"),
                    net: Some(Box::new(net)),
                });
            }
            sgd.step(&mut net, &grads)?;
        }
    }
    Ok(net)
}

/// Mean penalty-free cross-entropy over a dataset, for diagnostics.
pub fn dataset_ce(net: &DenseNet, dataset: &Dataset) -> Result<f64> {
    let logits = crate::netcore::predict_logits(net, dataset.inputs().view())?;
    let head = dataset.head();
    let (v, _) = crate::netcore::loss_ce(logits.slice(s![.., head.offset..head.end()]), dataset.labels())?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{init_network, Activation, Layer};
    use ndarray::{array, Array1, Array2};

    fn logistic_net() -> DenseNet {
        // Two logits [0, w·x]: class-1 probability is sigmoid(w·x).
        DenseNet::from_layers(vec![Layer::new(
            Array2::zeros((1, 2)),
            Array1::zeros(2),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn fisher_one_parameter_hand_value() {
        let net = logistic_net();
        let data = Dataset::new(array![[1.0]], vec![1], 2).unwrap();
        let f = estimate_fisher(&net, &data, 10, 0).unwrap();
        // d log p1 / d w01 = (1 − p1)·x = 0.5
        assert!((f.values()[1] - 0.25).abs() < 1e-15);
        assert_eq!(f.sample_count(), 1);
    }

    #[test]
    fn fisher_of_two_samples_is_mean_of_each() {
        let net = init_network(&Arch::new(3, vec![4], 2).unwrap(), 11);
        let data = Dataset::new(array![[0.5, -1.0, 2.0], [1.5, 0.3, -0.7]], vec![0, 1], 2).unwrap();
        let both = estimate_fisher(&net, &data, 2, 0).unwrap();
        let a = estimate_fisher(&net, &data.select(&[0]).unwrap(), 1, 0).unwrap();
        let b = estimate_fisher(&net, &data.select(&[1]).unwrap(), 1, 0).unwrap();
        for i in 0..both.len() {
            let mean = 0.5 * (a.values()[i] + b.values()[i]);
            assert!((both.values()[i] - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        }
    }

    #[test]
    fn fisher_zero_when_gradients_vanish() {
        // Zero output weights and a dead hidden layer: every score is zero
        // except the output bias, which we check separately.
        let mut net = init_network(&Arch::new(2, vec![3], 2).unwrap(), 1);
        let mut flat = net.flatten();
        for b in &mut flat[6..9] {
            *b = -100.0;
        }
        net.set_flat(&flat).unwrap();
        let data = Dataset::new(array![[0.1, 0.2], [0.3, 0.1]], vec![0, 0], 2).unwrap();
        let f = estimate_fisher(&net, &data, 2, 0).unwrap();
        assert!(f.values()[..net.layer_offsets()[1]].iter().all(|&v| v == 0.0));
        assert!(estimate_fisher(&net, &data, 0, 0).is_err());
    }

    #[test]
    fn fisher_is_seed_deterministic() {
        let net = init_network(&Arch::new(3, vec![4], 2).unwrap(), 2);
        let inputs = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let data = Dataset::new(inputs, (0..20).map(|i| i % 2).collect(), 2).unwrap();
        assert_eq!(
            estimate_fisher(&net, &data, 8, 5).unwrap(),
            estimate_fisher(&net, &data, 8, 5).unwrap()
        );
    }

    #[test]
    fn ewc_values() {
        let (v, g) = ewc_term(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0], 2.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (v, g) = ewc_term(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 2.0], 2.0).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(g, vec![2.0, 4.0]);
        assert!(ewc_term(&[1.0], &[1.0, 2.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn l21_values() {
        let (v, _) = l21_term(&[3.0, 0.0], &[4.0, 0.0], 1.0, 1e-12).unwrap();
        assert!((v - 5.0).abs() < 1e-11);
        let (v, g) = l21_term(&[0.0; 4], &[0.0; 4], 2.0, 1e-8).unwrap();
        assert!((v - 2.0 * 4.0 * 1e-8).abs() < 1e-20);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn l1_values() {
        let (v, _) = l1_term(&[-2.0, 5.0], None, 1.0, 1e-12).unwrap();
        assert!((v - 7.0).abs() < 1e-11);
        let empty = ExpansionMask::none(2);
        let (v, g) = l1_term(&[-2.0, 5.0], Some(&empty), 1.0, 1e-8).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(l1_term(&[1.0], Some(&empty), 1.0, 1e-8).is_err());
    }

    #[test]
    fn penalty_config_validation() {
        assert!(PenaltyConfig::paper_mnist().validate().is_ok());
        assert!(PenaltyConfig { lambda_ewc: -1.0, ..PenaltyConfig::none() }.validate().is_err());
        assert!(PenaltyConfig { epsilon: 1e-3, ..PenaltyConfig::none() }.validate().is_err());
        assert!(PenaltyConfig { epsilon: 0.0, ..PenaltyConfig::none() }.validate().is_err());
    }

    fn small_prior(net: &DenseNet, seed: u64) -> Prior {
        let other = init_network(net.arch(), seed);
        let fisher = other.flatten().iter().map(|v| v.abs() + 0.1).collect();
        Prior::new(Anchor::from_net(&other), FisherDiag::new(fisher, 1).unwrap()).unwrap()
    }

    fn tiny_batch() -> Dataset {
        Dataset::new(array![[0.2, -0.4, 1.0], [1.1, 0.5, -0.3], [-0.7, 0.9, 0.4]], vec![0, 1, 1], 2).unwrap()
    }

    #[test]
    fn zero_lambdas_reduce_to_cross_entropy() {
        let net = init_network(&Arch::new(3, vec![4], 2).unwrap(), 3);
        let batch = tiny_batch();
        let prior = small_prior(&net, 9);
        let (v, g) = mwc_loss(&net, &batch, Some(&prior), &PenaltyConfig::none(), None).unwrap();
        let (logits, cache) = forward(&net, batch.inputs().view()).unwrap();
        let (ce, d) = head_loss_ce(&logits, batch.labels(), batch.head()).unwrap();
        assert_eq!(v, ce);
        assert_eq!(g, backward(&net, &cache, &d).unwrap());
    }

    #[test]
    fn ewc_only_matches_manual_sum() {
        let net = init_network(&Arch::new(3, vec![4], 2).unwrap(), 3);
        let batch = tiny_batch();
        let prior = small_prior(&net, 9);
        let cfg = PenaltyConfig::ewc(2.0);
        let (v, _) = mwc_loss(&net, &batch, Some(&prior), &cfg, None).unwrap();
        let (ce, _) = mwc_loss(&net, &batch, None, &cfg, None).unwrap();
        let (e, _) = ewc_term(&net.flatten(), prior.anchor.params(), prior.fisher.values(), 2.0).unwrap();
        assert_eq!(v, ce + e);
    }

    #[test]
    fn l1_additivity_is_exact() {
        let net = init_network(&Arch::new(3, vec![4], 2).unwrap(), 3);
        let batch = tiny_batch();
        let prior = small_prior(&net, 9);
        let with = PenaltyConfig { lambda_ewc: 2.0, lambda_21: 0.01, lambda_1: 0.05, epsilon: 1e-8 };
        let without = PenaltyConfig { lambda_1: 0.0, ..with };
        let (v_with, _) = mwc_loss(&net, &batch, Some(&prior), &with, None).unwrap();
        let (v_without, _) = mwc_loss(&net, &batch, Some(&prior), &without, None).unwrap();
        let (l1, _) = l1_term(&net.flatten(), None, 0.05, 1e-8).unwrap();
        assert_eq!(v_without + l1, v_with);
    }

    #[test]
    fn prior_misalignment_is_an_error() {
        let net = init_network(&Arch::new(3, vec![4], 2).unwrap(), 3);
        let other = init_network(&Arch::new(3, vec![5], 2).unwrap(), 3);
        let prior = small_prior(&other, 1);
        assert!(mwc_loss(&net, &tiny_batch(), Some(&prior), &PenaltyConfig::ewc(1.0), None).is_err());
    }

    #[test]
    fn zero_epochs_leave_net_unchanged() {
        let net = init_network(&Arch::new(3, vec![4], 2).unwrap(), 3);
        let sched = TrainSchedule::paper_mnist().with_epochs(0);
        let out = train_task(&net, &tiny_batch(), None, &PenaltyConfig::none(), None, &sched, 1).unwrap();
        assert_eq!(out, net);
    }

    #[test]
    fn exploding_loss_aborts_with_state() {
        let net = init_network(&Arch::new(3, vec![4], 2).unwrap(), 3);
        let sched = TrainSchedule { epochs: 50, batch_size: 3, lr: 1e6, momentum: 0.0 };
        let prior = small_prior(&net, 4);
        let cfg = PenaltyConfig::ewc(1e6);
        match train_task(&net, &tiny_batch(), Some(&prior), &cfg, None, &sched, 1) {
            Err(RecError::NonFinite { net, .. }) => assert!(net.is_some()),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
