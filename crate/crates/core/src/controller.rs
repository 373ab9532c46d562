//! Architecture-search meta-controller trained with REINFORCE.
//!
//! Hidden-layer widths are bucketed, embedded and read by a bidirectional
//! tanh recurrent encoder. A shared sigmoid head decides per layer whether to
//! widen it (doubling, up to the width cap). A categorical head then picks up
//! to three identity-layer insertion points, with an extra stop option. The
//! encoder is re-run on the architecture each decision produces, so every
//! deeper decision sees the current state.
//!
//! Gradients of episode log-probabilities are derived by hand through the
//! heads, both recurrent cells (backprop through time) and the embeddings.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RecError, Result};
use crate::netcore::{evaluate_many, Arch, Dataset, DenseNet};
use crate::regularize::{train_task, Expansion, PenaltyConfig, Prior, TrainSchedule};
use crate::seeds;
use crate::transform::{apply_actions, format_action_log, Action, TransformLimits};

pub const HIDDEN_SIZE: usize = 32;
pub const EMBED_DIM: usize = 16;
pub const BASELINE_DECAY: f64 = 0.95;
/// Upper clamp on validation accuracy before the `tan` transform.
pub const MAX_REWARD_ACCURACY: f64 = 0.999;
/// Head logits are clamped to ±this, which keeps every probability in (0, 1).
const LOGIT_CLAMP: f64 = 20.0;
const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
struct RnnCell {
    w_in: Array2<f64>,
    w_rec: Array2<f64>,
    bias: Array1<f64>,
}

impl RnnCell {
    fn zeros(input: usize, hidden: usize) -> Self {
        RnnCell {
            w_in: Array2::zeros((input, hidden)),
            w_rec: Array2::zeros((hidden, hidden)),
            bias: Array1::zeros(hidden),
        }
    }

    fn random(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut u = || rng.random_range(-INIT_SCALE..INIT_SCALE);
        RnnCell {
            w_in: Array2::from_shape_simple_fn((input, hidden), &mut u),
            w_rec: Array2::from_shape_simple_fn((hidden, hidden), &mut u),
            bias: Array1::zeros(hidden),
        }
    }

    fn step(&self, x: &Array1<f64>, prev: &Array1<f64>) -> Array1<f64> {
        let mut z = x.dot(&self.w_in) + prev.dot(&self.w_rec) + &self.bias;
        z.mapv_inplace(f64::tanh);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerPolicy {
    embedding: Array2<f64>,
    forward_cell: RnnCell,
    backward_cell: RnnCell,
    wider_w: Array1<f64>,
    wider_b: f64,
    deeper_w: Array1<f64>,
    deeper_b: f64,
    stop_w: Array1<f64>,
    stop_b: f64,
    hidden: usize,
}

/// Per-layer encoder activations, kept for backprop.
#[derive(Debug, Clone)]
pub struct Encoding {
    buckets: Vec<usize>,
    inputs: Vec<Array1<f64>>,
    fwd: Vec<Array1<f64>>,
    bwd: Vec<Array1<f64>>,
    states: Vec<Array1<f64>>,
}

impl Encoding {
    /// Concatenated forward/backward hidden state per hidden layer.
    pub fn states(&self) -> &[Array1<f64>] {
        &self.states
    }
}

/// Number of embedding rows: widths bucket by `ceil(log2 w)` up to the cap.
pub fn bucket_count(max_width: usize) -> usize {
    ceil_log2(max_width.max(1)) + 1
}

fn ceil_log2(w: usize) -> usize {
    (usize::BITS - (w.max(1) - 1).leading_zeros()) as usize
}

pub fn width_bucket(width: usize, buckets: usize) -> usize {
    ceil_log2(width).min(buckets - 1)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ln σ(z)` without cancellation.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn clamp_logit(z: f64) -> (f64, bool) {
    if z > LOGIT_CLAMP {
        (LOGIT_CLAMP, true)
    } else if z < -LOGIT_CLAMP {
        (-LOGIT_CLAMP, true)
    } else {
        (z, false)
    }
}

impl ControllerPolicy {
    pub fn new(max_width: usize, seed: u64) -> Self {
        Self::with_hidden(max_width, HIDDEN_SIZE, seed)
    }

    pub fn with_hidden(max_width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buckets = bucket_count(max_width);
        let u = |rng: &mut ChaCha8Rng| rng.random_range(-INIT_SCALE..INIT_SCALE);
        let embedding = Array2::from_shape_simple_fn((buckets, EMBED_DIM), || u(&mut rng));
        let forward_cell = RnnCell::random(EMBED_DIM, hidden, &mut rng);
        let backward_cell = RnnCell::random(EMBED_DIM, hidden, &mut rng);
        let wider_w = Array1::from_shape_simple_fn(2 * hidden, || u(&mut rng));
        let deeper_w = Array1::from_shape_simple_fn(2 * hidden, || u(&mut rng));
        let stop_w = Array1::from_shape_simple_fn(2 * hidden, || u(&mut rng));
        ControllerPolicy {
            embedding,
            forward_cell,
            backward_cell,
            wider_w,
            wider_b: 0.0,
            deeper_w,
            deeper_b: 0.0,
            stop_w,
            stop_b: 0.0,
            hidden,
        }
    }

    fn zeros_like(&self) -> Self {
        let h = self.hidden;
        ControllerPolicy {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            forward_cell: RnnCell::zeros(EMBED_DIM, h),
            backward_cell: RnnCell::zeros(EMBED_DIM, h),
            wider_w: Array1::zeros(2 * h),
            wider_b: 0.0,
            deeper_w: Array1::zeros(2 * h),
            deeper_b: 0.0,
            stop_w: Array1::zeros(2 * h),
            stop_b: 0.0,
            hidden: h,
        }
    }

    pub fn buckets(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// Pins the policy to "never widen, always stop".
    pub fn force_no_expansion(&mut self) {
        self.wider_w.fill(0.0);
        self.wider_b = -1e3;
        self.stop_w.fill(0.0);
        self.stop_b = 1e3;
    }

    /// Sets the bias of the wider head (the logit when its weights are zero).
    pub fn set_wider_bias(&mut self, b: f64) {
        self.wider_b = b;
    }

    pub fn param_count(&self) -> usize {
        self.flatten().len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.embedding.iter());
        for cell in [&self.forward_cell, &self.backward_cell] {
            out.extend(cell.w_in.iter());
            out.extend(cell.w_rec.iter());
            out.extend(cell.bias.iter());
        }
        out.extend(self.wider_w.iter());
        out.push(self.wider_b);
        out.extend(self.deeper_w.iter());
        out.push(self.deeper_b);
        out.extend(self.stop_w.iter());
        out.push(self.stop_b);
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(RecError::shape("controller parameters", expected, params.len()));
        }
        let mut it = params.iter().copied();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for d in dst {
                *d = it.next().expect("length checked");
            }
        };
        fill(&mut self.embedding.iter_mut());
        for cell in [&mut self.forward_cell, &mut self.backward_cell] {
            fill(&mut cell.w_in.iter_mut());
            fill(&mut cell.w_rec.iter_mut());
            fill(&mut cell.bias.iter_mut());
        }
        fill(&mut self.wider_w.iter_mut());
        fill(&mut std::iter::once(&mut self.wider_b));
        fill(&mut self.deeper_w.iter_mut());
        fill(&mut std::iter::once(&mut self.deeper_b));
        fill(&mut self.stop_w.iter_mut());
        fill(&mut std::iter::once(&mut self.stop_b));
        Ok(())
    }

    pub fn encode_full(&self, arch: &Arch) -> Result<Encoding> {
        let widths = arch.hidden_widths();
        if widths.is_empty() {
            return Err(RecError::InvalidArch("controller needs at least one hidden layer".into()));
        }
        let n = widths.len();
        let buckets: Vec<usize> = widths.iter().map(|&w| width_bucket(w, self.buckets())).collect();
        let inputs: Vec<Array1<f64>> = buckets.iter().map(|&b| self.embedding.row(b).to_owned()).collect();
        let zero = Array1::zeros(self.hidden);
        let mut fwd = Vec::with_capacity(n);
        for k in 0..n {
            let prev = if k == 0 { &zero } else { &fwd[k - 1] };
            let h = self.forward_cell.step(&inputs[k], prev);
            fwd.push(h);
        }
        let mut bwd = vec![Array1::zeros(self.hidden); n];
        for k in (0..n).rev() {
            let next = if k + 1 == n { zero.clone() } else { bwd[k + 1].clone() };
            bwd[k] = self.backward_cell.step(&inputs[k], &next);
        }
        let states = (0..n)
            .map(|k| ndarray::concatenate![ndarray::Axis(0), fwd[k], bwd[k]])
            .collect();
        Ok(Encoding {
            buckets,
            inputs,
            fwd,
            bwd,
            states,
        })
    }

    /// Per-layer hidden states for an architecture.
    pub fn encode(&self, arch: &Arch) -> Result<Vec<Array1<f64>>> {
        Ok(self.encode_full(arch)?.states)
    }

    /// Accumulates into `grad` the parameter gradient given `dstates`.
    fn backprop_encoding(&self, enc: &Encoding, dstates: &[Array1<f64>], grad: &mut ControllerPolicy) {
        let n = enc.states.len();
        let h = self.hidden;
        let mut dinputs = vec![Array1::<f64>::zeros(EMBED_DIM); n];

        let mut carry = Array1::<f64>::zeros(h);
        for k in (0..n).rev() {
            let dh = dstates[k].slice(ndarray::s![..h]).to_owned() + &carry;
            let dz = &dh * &enc.fwd[k].mapv(|v| 1.0 - v * v);
            accumulate_outer(&mut grad.forward_cell.w_in, &enc.inputs[k], &dz);
            if k > 0 {
                accumulate_outer(&mut grad.forward_cell.w_rec, &enc.fwd[k - 1], &dz);
            }
            grad.forward_cell.bias += &dz;
            dinputs[k] += &self.forward_cell.w_in.dot(&dz);
            carry = self.forward_cell.w_rec.dot(&dz);
        }

        let mut carry = Array1::<f64>::zeros(h);
        for k in 0..n {
            let dg = dstates[k].slice(ndarray::s![h..]).to_owned() + &carry;
            let dz = &dg * &enc.bwd[k].mapv(|v| 1.0 - v * v);
            accumulate_outer(&mut grad.backward_cell.w_in, &enc.inputs[k], &dz);
            if k + 1 < n {
                accumulate_outer(&mut grad.backward_cell.w_rec, &enc.bwd[k + 1], &dz);
            }
            grad.backward_cell.bias += &dz;
            dinputs[k] += &self.backward_cell.w_in.dot(&dz);
            carry = self.backward_cell.w_rec.dot(&dz);
        }

        for (k, d) in dinputs.iter().enumerate() {
            let mut row = grad.embedding.row_mut(enc.buckets[k]);
            row += d;
        }
    }

    fn rollout(
        &self,
        initial: &Arch,
        limits: &TransformLimits,
        pick: &mut dyn FnMut(&[f64]) -> Result<usize>,
        mut grad: Option<&mut ControllerPolicy>,
    ) -> Result<Rollout> {
        let mut steps = Vec::new();
        let mut actions = Vec::new();
        let mut archs = vec![initial.clone()];

        let enc = self.encode_full(initial)?;
        let mut dstates = vec![Array1::<f64>::zeros(2 * self.hidden); enc.states.len()];
        let mut widened = initial.clone();
        let mut wider_count = 0;
        for (k, &width) in initial.hidden_widths().iter().enumerate() {
            if wider_count >= limits.max_wider {
                break;
            }
            let target = (2 * width).min(limits.max_width);
            if target <= width {
                continue;
            }
            let (z, clamped) = clamp_logit(enc.states[k].dot(&self.wider_w) + self.wider_b);
            let p = sigmoid(z);
            let choice = pick(&[1.0 - p, p])?;
            let widen = match choice {
                0 => false,
                1 => true,
                _ => return Err(RecError::InvalidAction("wider decision must be 0 or 1".into())),
            };
            let log_prob = if widen { log_sigmoid(z) } else { log_sigmoid(-z) };
            if let Some(g) = grad.as_deref_mut() {
                if !clamped {
                    let dz = if widen { 1.0 - p } else { -p };
                    dstates[k].scaled_add(dz, &self.wider_w);
                    g.wider_w.scaled_add(dz, &enc.states[k]);
                    g.wider_b += dz;
                }
            }
            steps.push(Step {
                decision: Decision::Wider { layer: k, widen },
                log_prob,
                probability: if widen { p } else { 1.0 - p },
            });
            if widen {
                let action = Action::wider(k, target);
                widened = action.apply_to_arch(&widened)?;
                actions.push(action);
                wider_count += 1;
                archs.push(widened.clone());
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            self.backprop_encoding(&enc, &dstates, g);
        }

        let mut arch = widened;
        for _ in 0..limits.max_deeper {
            let enc = self.encode_full(&arch)?;
            let n = enc.states.len();
            let mean = enc.states.iter().fold(Array1::zeros(2 * self.hidden), |acc, s| acc + s) / n as f64;
            let mut logits = Vec::with_capacity(n + 1);
            for s in &enc.states {
                logits.push(clamp_logit(s.dot(&self.deeper_w) + self.deeper_b));
            }
            logits.push(clamp_logit(mean.dot(&self.stop_w) + self.stop_b));
            let max = logits.iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l.0 - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            let probs: Vec<f64> = exp.iter().map(|e| e / total).collect();
            let choice = pick(&probs)?;
            if choice > n {
                return Err(RecError::InvalidAction(format!("deeper choice {choice} out of range")));
            }
            let log_prob = logits[choice].0 - max - total.ln();
            if let Some(g) = grad.as_deref_mut() {
                let mut dstates = vec![Array1::<f64>::zeros(2 * self.hidden); n];
                for (j, &(_, clamped)) in logits.iter().enumerate() {
                    if clamped {
                        continue;
                    }
                    let gj = if j == choice { 1.0 - probs[j] } else { -probs[j] };
                    if j < n {
                        dstates[j].scaled_add(gj, &self.deeper_w);
                        g.deeper_w.scaled_add(gj, &enc.states[j]);
                        g.deeper_b += gj;
                    } else {
                        g.stop_w.scaled_add(gj, &mean);
                        for d in dstates.iter_mut() {
                            d.scaled_add(gj / n as f64, &self.stop_w);
                        }
                        g.stop_b += gj;
                    }
                }
                self.backprop_encoding(&enc, &dstates, g);
            }
            let stop = choice == n;
            steps.push(Step {
                decision: Decision::Deeper {
                    insert_after: (!stop).then_some(choice),
                },
                log_prob,
                probability: probs[choice],
            });
            if stop {
                break;
            }
            let action = Action::deeper(choice);
            arch = action.apply_to_arch(&arch)?;
            actions.push(action);
            archs.push(arch.clone());
        }

        Ok(Rollout { steps, actions, archs })
    }

    /// Samples a transformation sequence. Caps are enforced by construction.
    pub fn sample_episode(&self, arch: &Arch, limits: &TransformLimits, seed: u64) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |probs: &[f64]| -> Result<usize> {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(probs.len() - 1)
        };
        let r = self.rollout(arch, limits, &mut pick, None)?;
        Ok(Episode {
            initial_arch: arch.clone(),
            limits: *limits,
            seed,
            steps: r.steps,
            actions: r.actions,
            states: r.archs,
            a_val: None,
            raw_reward: None,
            reward: None,
        })
    }

    /// Replays an episode's decisions; returns `(Σ log p, ∇ Σ log p)`.
    pub fn log_prob_grad(&self, episode: &Episode) -> Result<(f64, Vec<f64>)> {
        let mut grad = self.zeros_like();
        let mut recorded = episode.steps.iter();
        let mut pick = |probs: &[f64]| -> Result<usize> {
            let step = recorded
                .next()
                .ok_or_else(|| RecError::InvalidAction("episode replay ran past recorded steps".into()))?;
            Ok(match step.decision {
                Decision::Wider { widen, .. } => usize::from(widen),
                Decision::Deeper { insert_after: Some(k) } => k,
                Decision::Deeper { insert_after: None } => probs.len() - 1,
            })
        };
        let r = self.rollout(&episode.initial_arch, &episode.limits, &mut pick, Some(&mut grad))?;
        if r.actions != episode.actions {
            return Err(RecError::InvalidAction("episode replay diverged from recorded actions".into()));
        }
        let logp = r.steps.iter().map(|s| s.log_prob).sum();
        Ok((logp, grad.flatten()))
    }

    /// Gradient ascent on `(1/m) Σ_i R_i Σ_s ∇ log P(a_s | a_<s)`.
    pub fn reinforce_update(&mut self, episodes: &[Episode], lr: f64) -> Result<()> {
        if episodes.is_empty() {
            return Err(RecError::InvalidConfig("reinforce update needs at least one episode".into()));
        }
        let mut total = vec![0.0; self.param_count()];
        for ep in episodes {
            let reward = ep
                .reward
                .ok_or_else(|| RecError::InvalidConfig("episode has no reward attached".into()))?;
            let (_, g) = self.log_prob_grad(ep)?;
            for (t, gi) in total.iter_mut().zip(g) {
                *t += reward * gi;
            }
        }
        let scale = lr / episodes.len() as f64;
        let mut params = self.flatten();
        for (p, t) in params.iter_mut().zip(total) {
            *p += scale * t;
        }
        self.set_flat(&params)
    }
}

fn accumulate_outer(dst: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let mut row = dst.row_mut(i);
        row.scaled_add(ai, b);
    }
}

struct Rollout {
    steps: Vec<Step>,
    actions: Vec<Action>,
    archs: Vec<Arch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Wider { layer: usize, widen: bool },
    /// `None` is the stop option.
    Deeper { insert_after: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub decision: Decision,
    pub log_prob: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub initial_arch: Arch,
    pub limits: TransformLimits,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub actions: Vec<Action>,
    /// Architecture after each applied action, starting with the initial one.
    pub states: Vec<Arch>,
    pub a_val: Option<f64>,
    pub raw_reward: Option<f64>,
    pub reward: Option<f64>,
}

impl Episode {
    pub fn log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }

    pub fn wider_count(&self) -> usize {
        self.actions.iter().filter(|a| matches!(a, Action::Wider(_))).count()
    }

    pub fn deeper_count(&self) -> usize {
        self.actions.len() - self.wider_count()
    }
}

/// Exponential moving average of raw rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub ema: Option<f64>,
    pub decay: f64,
}

impl Default for BaselineState {
    fn default() -> Self {
        BaselineState {
            ema: None,
            decay: BASELINE_DECAY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapedReward {
    pub raw: f64,
    pub reward: f64,
}

/// `raw = tan(a·π/2)` with `a` clamped to `[0, 0.999]`; the reward is `raw`
/// minus the running baseline, which then absorbs `raw`. The first reward
/// seeds the baseline.
pub fn reward_transform(a_val: f64, baseline: &BaselineState) -> (ShapedReward, BaselineState) {
    let a = a_val.clamp(0.0, MAX_REWARD_ACCURACY);
    let raw = (a * std::f64::consts::FRAC_PI_2).tan();
    let prev = baseline.ema.unwrap_or(raw);
    let next = BaselineState {
        ema: Some(baseline.decay * prev + (1.0 - baseline.decay) * raw),
        decay: baseline.decay,
    };
    (
        ShapedReward {
            raw,
            reward: raw - prev,
        },
        next,
    )
}

/// Which validation data scores a child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardScope {
    NewTask,
    AllLearned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Total child networks sampled by the controller.
    pub episodes: usize,
    /// Children per REINFORCE batch (`m`).
    pub children_per_batch: usize,
    pub child_epochs: usize,
    pub controller_lr: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            episodes: 10,
            children_per_batch: 5,
            child_epochs: 2,
            controller_lr: 0.1,
        }
    }
}

/// A controller with its reward baseline; persists across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub policy: ControllerPolicy,
    pub baseline: BaselineState,
    pub limits: TransformLimits,
}

impl Controller {
    pub fn new(initial: &Arch, seed: u64) -> Self {
        let limits = TransformLimits::for_arch(initial);
        Controller {
            policy: ControllerPolicy::new(limits.max_width, seed),
            baseline: BaselineState::default(),
            limits,
        }
    }
}

/// Data and objective a child is fine-tuned and scored with.
#[derive(Debug, Clone, Copy)]
pub struct SearchContext<'a> {
    pub prev_net: &'a DenseNet,
    pub train: &'a Dataset,
    pub validation: &'a [&'a Dataset],
    pub prior: Option<&'a Prior>,
    pub penalty: &'a PenaltyConfig,
    pub schedule: &'a TrainSchedule,
}

#[derive(Debug, Clone)]
pub struct Child {
    pub actions: Vec<Action>,
    pub net: DenseNet,
    /// Alignment to `prev_net`; `None` when no action was applied.
    pub expansion: Option<Expansion>,
    pub a_val: f64,
    pub seed: u64,
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub actions: String,
    pub a_val: f64,
    pub raw_reward: f64,
    pub reward: f64,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Child,
    /// Score of the unexpanded child fine-tuned with the same budget.
    pub no_expansion_a_val: f64,
    pub log: Vec<EpisodeRecord>,
}

/// Applies `actions` to the previous network, fine-tunes with the masked
/// objective and scores on the validation sets.
pub fn train_child(ctx: &SearchContext<'_>, actions: &[Action], limits: &TransformLimits, epochs: usize, seed: u64) -> Result<Child> {
    let morph = apply_actions(ctx.prev_net, actions, limits, seeds::derive(seed, "morph", 0))?;
    let expansion = (!actions.is_empty()).then(|| Expansion::from(&morph));
    let net = train_task(
        &morph.net,
        ctx.train,
        ctx.prior,
        ctx.penalty,
        expansion.as_ref(),
        &ctx.schedule.with_epochs(epochs),
        seeds::derive(seed, "child-train", 0),
    )?;
    let a_val = evaluate_many(&net, ctx.validation)?;
    Ok(Child {
        actions: actions.to_vec(),
        net,
        expansion,
        a_val,
        seed,
    })
}

/// Controller-driven search over expansions of `ctx.prev_net`.
///
/// Children within a batch train in parallel; rewards are shaped and the
/// policy updated once per batch. The unexpanded child is always scored
/// first, so the returned child never validates worse than it.
pub fn search_child(
    ctx: &SearchContext<'_>,
    controller: &mut Controller,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    if cfg.episodes == 0 || cfg.children_per_batch == 0 {
        return Err(RecError::InvalidConfig("search needs at least one episode per batch".into()));
    }
    if ctx.validation.iter().all(|d| d.is_empty()) || ctx.validation.is_empty() {
        return Err(RecError::EmptyDataset("search validation"));
    }
    let arch = ctx.prev_net.arch().clone();
    let limits = controller.limits;
    let mut best = train_child(ctx, &[], &limits, cfg.child_epochs, seeds::derive(seed, "child", u64::MAX))?;
    let no_expansion_a_val = best.a_val;
    let mut log = Vec::with_capacity(cfg.episodes);

    let mut done = 0;
    while done < cfg.episodes {
        let m = cfg.children_per_batch.min(cfg.episodes - done);
        let mut episodes = (0..m)
            .map(|i| {
                let s = seeds::derive(seed, "episode", (done + i) as u64);
                controller.policy.sample_episode(&arch, &limits, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let children = episodes
            .par_iter()
            .map(|ep| train_child(ctx, &ep.actions, &limits, cfg.child_epochs, seeds::derive(ep.seed, "child", 0)))
            .collect::<Result<Vec<_>>>()?;
        for (ep, child) in episodes.iter_mut().zip(children) {
            let (shaped, next) = reward_transform(child.a_val, &controller.baseline);
            controller.baseline = next;
            ep.a_val = Some(child.a_val);
            ep.raw_reward = Some(shaped.raw);
            ep.reward = Some(shaped.reward);
            log.push(EpisodeRecord {
                seed: ep.seed,
                actions: format_action_log(&ep.actions).trim_end().replace('\n', "; "),
                a_val: child.a_val,
                raw_reward: shaped.raw,
                reward: shaped.reward,
                params: child.net.param_count(),
            });
            if child.a_val > best.a_val {
                best = child;
            }
        }
        controller.policy.reinforce_update(&episodes, cfg.controller_lr)?;
        done += m;
    }
    Ok(SearchOutcome {
        best,
        no_expansion_a_val,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(widths: &[usize]) -> Arch {
        Arch::new(8, widths.to_vec(), 3).unwrap()
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket_count(400), 10);
        assert_eq!(width_bucket(1, 10), 0);
        assert_eq!(width_bucket(2, 10), 1);
        assert_eq!(width_bucket(3, 10), 2);
        assert_eq!(width_bucket(4, 10), 2);
        assert_eq!(width_bucket(100, 10), 7);
        assert_eq!(width_bucket(5000, 10), 9);
    }

    #[test]
    fn encode_is_deterministic_and_order_sensitive() {
        let p = ControllerPolicy::new(400, 3);
        let a = p.encode(&arch(&[8, 64])).unwrap();
        assert_eq!(a, p.encode(&arch(&[8, 64])).unwrap());
        let b = p.encode(&arch(&[64, 8])).unwrap();
        assert_ne!(a[0], b[1]);
        assert_ne!(a, b);
    }

    #[test]
    fn same_bucket_same_encoding() {
        let p = ControllerPolicy::new(400, 3);
        assert_eq!(p.encode(&arch(&[65, 100])).unwrap(), p.encode(&arch(&[128, 70])).unwrap());
    }

    #[test]
    fn forced_policy_produces_no_actions() {
        let mut p = ControllerPolicy::new(400, 1);
        p.force_no_expansion();
        let limits = TransformLimits::for_arch(&arch(&[100, 100]));
        for seed in 0..50 {
            let ep = p.sample_episode(&arch(&[100, 100]), &limits, seed).unwrap();
            assert!(ep.actions.is_empty());
            assert!(ep.log_prob().is_finite());
        }
    }

    #[test]
    fn log_probs_match_product_of_step_probabilities() {
        let p = ControllerPolicy::new(400, 2);
        let a = arch(&[100, 100]);
        let limits = TransformLimits::for_arch(&a);
        for seed in 0..100 {
            let ep = p.sample_episode(&a, &limits, seed).unwrap();
            let product: f64 = ep.steps.iter().map(|s| s.probability).product();
            assert!((ep.log_prob().exp() - product).abs() < 1e-12);
            assert!(ep.wider_count() <= 2 && ep.deeper_count() <= 3);
            let (replayed, _) = p.log_prob_grad(&ep).unwrap();
            assert!((replayed - ep.log_prob()).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_transform_values() {
        let b = BaselineState { ema: Some(0.0), decay: 0.95 };
        let (r, _) = reward_transform(0.0, &b);
        assert_eq!(r.raw, 0.0);
        let (r, next) = reward_transform(0.5, &b);
        assert!((r.raw - 1.0).abs() < 1e-12);
        assert!((next.ema.unwrap() - 0.05).abs() < 1e-12);
        let (r, _) = reward_transform(1.0, &b);
        assert!(r.raw.is_finite());
    }

    #[test]
    fn constant_rewards_shape_to_zero() {
        let mut b = BaselineState { ema: Some(0.0), decay: 0.95 };
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let (r, next) = reward_transform(0.8, &b);
            b = next;
            last = r.reward;
        }
        assert!(last.abs() < 1e-9, "{last}");
    }

    #[test]
    fn zero_rewards_leave_policy_unchanged() {
        let mut p = ControllerPolicy::new(400, 5);
        let a = arch(&[100, 100]);
        let limits = TransformLimits::for_arch(&a);
        let mut eps: Vec<Episode> = (0..4).map(|s| p.sample_episode(&a, &limits, s).unwrap()).collect();
        for e in &mut eps {
            e.reward = Some(0.0);
        }
        let before = p.clone();
        p.reinforce_update(&eps, 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn reward_scaling_matches_learning_rate_scaling() {
        let a = arch(&[100, 100]);
        let limits = TransformLimits::for_arch(&a);
        let base = ControllerPolicy::new(400, 5);
        let mut ep = base.sample_episode(&a, &limits, 9).unwrap();
        ep.reward = Some(0.7);
        let mut p1 = base.clone();
        p1.reinforce_update(std::slice::from_ref(&ep), 0.02).unwrap();
        ep.reward = Some(1.4);
        let mut p2 = base.clone();
        p2.reinforce_update(std::slice::from_ref(&ep), 0.01).unwrap();
        for (x, y) in p1.flatten().iter().zip(p2.flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn baseline_stays_within_seen_rewards() {
        let mut b = BaselineState::default();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..200 {
            let a = 0.3 + 0.5 * ((i * 37 % 11) as f64 / 11.0);
            let (r, next) = reward_transform(a, &b);
            lo = lo.min(r.raw);
            hi = hi.max(r.raw);
            b = next;
            let ema = b.ema.unwrap();
            assert!(ema >= lo - 1e-12 && ema <= hi + 1e-12);
        }
    }

    #[test]
    fn unrewarded_update_is_an_error() {
        let mut p = ControllerPolicy::new(400, 5);
        let a = arch(&[100]);
        let ep = p.sample_episode(&a, &TransformLimits::for_arch(&a), 0).unwrap();
        assert!(p.reinforce_update(&[ep], 0.1).is_err());
        assert!(p.reinforce_update(&[], 0.1).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut p = ControllerPolicy::new(400, 5);
        let flat = p.flatten();
        let q = ControllerPolicy::new(400, 6);
        p.set_flat(&q.flatten()).unwrap();
        assert_eq!(p, q);
        p.set_flat(&flat).unwrap();
        assert_eq!(p.flatten(), flat);
    }
}
