//! Sequential training over a task sequence for every compared method.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{avg_per_task, AccuracyMatrix};
use super::tasks::TaskSequence;
use crate::checkpoint::Checkpoint;
use crate::controller::{search_child, Controller, EpisodeRecord, RewardScope, SearchConfig, SearchContext};
use crate::distill::{compress, DistillConfig, StudentInit};
use crate::error::{RecError, Result};
use crate::netcore::{evaluate, init_network, Arch, Dataset};
use crate::regularize::{estimate_fisher, train_task, Anchor, Expansion, FisherDiag, PenaltyConfig, Prior, TrainSchedule};
use crate::seeds;
use crate::transform::{apply_actions, Action, TransformLimits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    /// One network fine-tuned on each task in turn.
    Sn,
    /// Fixed widening before every task, no penalty.
    Net2Net,
    Ewc,
    Net2NetEwc,
    Mwc,
    EwcL1,
    EwcL21,
    Rec,
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = RecError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Sn,
        Method::Net2Net,
        Method::Ewc,
        Method::Net2NetEwc,
        Method::Mwc,
        Method::EwcL1,
        Method::EwcL21,
        Method::Rec,
    ];

    pub const ABLATIONS: [Method; 4] = [Method::Ewc, Method::EwcL1, Method::EwcL21, Method::Mwc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sn => "sn",
            Method::Net2Net => "net2net",
            Method::Ewc => "ewc",
            Method::Net2NetEwc => "net2net-ewc",
            Method::Mwc => "mwc",
            Method::EwcL1 => "ewc-l1",
            Method::EwcL21 => "ewc-l21",
            Method::Rec => "rec",
        }
    }

    pub fn expands(self) -> bool {
        matches!(self, Method::Net2Net | Method::Net2NetEwc | Method::Rec)
    }

    pub fn compresses(self) -> bool {
        self == Method::Rec
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = RecError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| RecError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Where a compressed student starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudentStart {
    Fresh,
    /// The model carried out of the previous task.
    Carried,
}

/// Hyperparameters shared by every method of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_ewc: f64,
    pub lambda_21: f64,
    pub lambda_1: f64,
    pub epsilon: f64,
    pub schedule: TrainSchedule,
    pub search: SearchConfig,
    pub distill: DistillConfig,
    pub fisher_samples: usize,
    pub reward_scope: RewardScope,
    pub student_start: StudentStart,
    pub reset_controller: bool,
}

impl Default for Hyperparams {
    /// Desk-scale defaults for 8×8 inputs and a 64-100-10 network.
    fn default() -> Self {
        Hyperparams {
            lambda_ewc: 35.0,
            lambda_21: 1e-6,
            lambda_1: 1e-6,
            epsilon: PenaltyConfig::DEFAULT_EPSILON,
            schedule: TrainSchedule {
                epochs: 40,
                batch_size: 32,
                lr: 0.05,
                momentum: 0.0,
            },
            search: SearchConfig::default(),
            distill: DistillConfig {
                epochs: 32,
                warmup_fraction: 0.25,
                batch_size: 32,
                lr: 0.01,
                momentum: 0.0,
            },
            fisher_samples: 500,
            reward_scope: RewardScope::NewTask,
            student_start: StudentStart::Fresh,
            reset_controller: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub penalty: PenaltyConfig,
    pub expansion: bool,
    pub compression: bool,
    pub reward_scope: RewardScope,
    pub schedule: TrainSchedule,
    pub search: SearchConfig,
    pub distill: DistillConfig,
    pub fisher_samples: usize,
    pub student_start: StudentStart,
    /// Fresh controller for every task instead of one carried through the sequence.
    pub reset_controller: bool,
}

impl MethodConfig {
    pub fn new(method: Method, h: &Hyperparams) -> Self {
        let (e, l21, l1) = match method {
            Method::Sn | Method::Net2Net => (0.0, 0.0, 0.0),
            Method::Ewc | Method::Net2NetEwc => (h.lambda_ewc, 0.0, 0.0),
            Method::EwcL1 => (h.lambda_ewc, 0.0, h.lambda_1),
            Method::EwcL21 => (h.lambda_ewc, h.lambda_21, 0.0),
            Method::Mwc | Method::Rec => (h.lambda_ewc, h.lambda_21, h.lambda_1),
        };
        MethodConfig {
            method,
            penalty: PenaltyConfig {
                lambda_ewc: e,
                lambda_21: l21,
                lambda_1: l1,
                epsilon: h.epsilon,
            },
            expansion: method.expands(),
            compression: method.compresses(),
            reward_scope: h.reward_scope,
            schedule: h.schedule,
            search: h.search,
            distill: h.distill,
            fisher_samples: h.fisher_samples,
            student_start: h.student_start,
            reset_controller: h.reset_controller,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        self.schedule.validate()?;
        if self.expansion != self.method.expands() || self.compression != self.method.compresses() {
            return Err(RecError::InvalidConfig(format!(
                "method {} requires expansion={} and compression={}",
                self.method,
                self.method.expands(),
                self.method.compresses()
            )));
        }
        if self.compression {
            self.distill.validate()?;
        }
        if self.fisher_samples == 0 && self.penalty.lambda_ewc > 0.0 {
            return Err(RecError::InvalidConfig("fisher_samples must be positive".into()));
        }
        Ok(())
    }

    fn uses_prior(&self) -> bool {
        self.penalty.lambda_ewc > 0.0 || self.penalty.lambda_21 > 0.0
    }
}

/// What happened while learning one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    /// Task number, from 1.
    pub task: usize,
    pub actions: Vec<Action>,
    /// Architecture of the network trained on this task, before compression.
    pub trained_arch: String,
    pub trained_params: usize,
    /// Test accuracy on this task of the network trained on it, before compression.
    pub trained_accuracy: f64,
    /// Test accuracy on this task after compression.
    pub compressed_accuracy: Option<f64>,
    pub no_expansion_a_val: Option<f64>,
    pub search: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    /// Parameter count of the carried model at each task boundary.
    pub sizes: Vec<usize>,
    /// Carried model and the prior it exports, after each task.
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<TaskLog>,
}

impl RunOutput {
    pub fn final_avg(&self) -> f64 {
        avg_per_task(&self.accuracy, self.accuracy.tasks()).expect("at least one task")
    }
}

fn at_task(err: RecError, method: Method, task: usize) -> RecError {
    match err {
        RecError::NonFinite { context, net } => RecError::NonFinite {
            context: format!("{method}, task {task}: {context}"),
            net,
        },
        other => other,
    }
}

/// Widens hidden layer `(t−2) mod H` to twice its width, clipped to the cap.
/// Returns no action once that layer is at the cap.
pub fn fixed_widen_action(arch: &Arch, task: usize, limits: &TransformLimits) -> Option<Action> {
    let widths = arch.hidden_widths();
    let layer = (task.saturating_sub(2)) % widths.len();
    let w = widths[layer];
    let target = (2 * w).min(limits.max_width);
    (target > w).then(|| Action::wider(layer, target))
}

/// Learns every task of `tasks` in order with one method.
pub fn run_sequence(tasks: &TaskSequence, initial_arch: &Arch, cfg: &MethodConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(RecError::InvalidConfig("empty task sequence".into()));
    }
    if initial_arch.input_dim() != tasks.input_dim() || initial_arch.output_dim() < tasks.output_dim() {
        return Err(RecError::InvalidArch(format!(
            "arch {initial_arch} does not fit tasks with {} inputs and {} outputs",
            tasks.input_dim(),
            tasks.output_dim()
        )));
    }
    let method = cfg.method;
    let limits = TransformLimits::for_arch(initial_arch);
    let mut controller = Controller::new(initial_arch, seeds::derive(seed, "controller", 0));
    let mut net = init_network(initial_arch, seeds::derive(seed, "init", 0));
    let mut prior: Option<Prior> = None;
    let mut out = RunOutput {
        method,
        seed,
        accuracy: AccuracyMatrix::new(),
        sizes: Vec::with_capacity(tasks.len()),
        checkpoints: Vec::with_capacity(tasks.len()),
        logs: Vec::with_capacity(tasks.len()),
    };

    for (i, task) in tasks.tasks.iter().enumerate() {
        let t = i + 1;
        let train_seed = seeds::derive(seed, "train", t as u64);
        let mut log = TaskLog {
            task: t,
            actions: Vec::new(),
            trained_arch: String::new(),
            trained_params: 0,
            trained_accuracy: 0.0,
            compressed_accuracy: None,
            no_expansion_a_val: None,
            search: Vec::new(),
        };
        let penalty = if t == 1 { PenaltyConfig::none() } else { cfg.penalty };
        let prior_ref = if t == 1 { None } else { prior.as_ref() };

        let trained = if t == 1 || !cfg.expansion {
            train_task(&net, task.train(), prior_ref, &penalty, None, &cfg.schedule, train_seed)
        } else if !cfg.compression {
            let actions: Vec<Action> = fixed_widen_action(net.arch(), t, &limits).into_iter().collect();
            let morph = apply_actions(&net, &actions, &limits, seeds::derive(seed, "morph", t as u64))?;
            let expansion = (!actions.is_empty()).then(|| Expansion::from(&morph));
            log.actions = actions;
            train_task(&morph.net, task.train(), prior_ref, &penalty, expansion.as_ref(), &cfg.schedule, train_seed)
        } else {
            let validation: Vec<&Dataset> = match cfg.reward_scope {
                RewardScope::NewTask => vec![task.validation()],
                RewardScope::AllLearned => tasks.tasks[..=i].iter().map(|k| k.validation()).collect(),
            };
            let ctx = SearchContext {
                prev_net: &net,
                train: task.train(),
                validation: &validation,
                prior: prior_ref,
                penalty: &penalty,
                schedule: &cfg.schedule,
            };
            if cfg.reset_controller {
                controller = Controller::new(initial_arch, seeds::derive(seed, "controller", t as u64));
            }
            let outcome = search_child(&ctx, &mut controller, &cfg.search, seeds::derive(seed, "search", t as u64))
                .map_err(|e| at_task(e, method, t))?;
            let best = outcome.best;
            log.actions = best.actions.clone();
            log.no_expansion_a_val = Some(outcome.no_expansion_a_val);
            log.search = outcome.log;
            let remaining = cfg.schedule.epochs.saturating_sub(cfg.search.child_epochs);
            if remaining > 0 {
                train_task(
                    &best.net,
                    task.train(),
                    prior_ref,
                    &penalty,
                    best.expansion.as_ref(),
                    &cfg.schedule.with_epochs(remaining),
                    seeds::derive(seed, "continue", t as u64),
                )
            } else {
                Ok(best.net)
            }
        }
        .map_err(|e| at_task(e, method, t))?;

        log.trained_arch = trained.arch().to_string();
        log.trained_params = trained.param_count();
        log.trained_accuracy = evaluate(&trained, task.test())?;

        net = if cfg.compression && t > 1 {
            let init = match cfg.student_start {
                StudentStart::Fresh => StudentInit::Fresh,
                StudentStart::Carried => StudentInit::From(net.clone()),
            };
            let student = compress(
                &trained,
                initial_arch,
                task.train(),
                &cfg.distill,
                init,
                seeds::derive(seed, "distill", t as u64),
            )
            .map_err(|e| at_task(e, method, t))?;
            log.compressed_accuracy = Some(evaluate(&student, task.test())?);
            student
        } else {
            trained
        };

        let row = tasks.tasks[..=i]
            .iter()
            .map(|k| evaluate(&net, k.test()))
            .collect::<Result<Vec<_>>>()?;
        out.accuracy.push_row(row)?;
        out.sizes.push(net.param_count());

        prior = if cfg.uses_prior() {
            let fisher = if cfg.penalty.lambda_ewc > 0.0 {
                estimate_fisher(&net, task.train(), cfg.fisher_samples, seeds::derive(seed, "fisher", t as u64))?
            } else {
                FisherDiag::new(vec![0.0; net.param_count()], 0)?
            };
            Some(Prior::new(Anchor::from_net(&net), fisher)?)
        } else {
            None
        };
        out.checkpoints.push(match &prior {
            Some(p) => Checkpoint::with_prior(net.clone(), p),
            None => Checkpoint::new(net.clone()),
        });
        out.logs.push(log);
    }
    Ok(out)
}

/// Runs every `(config, seed)` pair in parallel on the current rayon pool.
/// Results come back in `configs`-major, `seeds`-minor order.
pub fn run_grid(tasks: &TaskSequence, initial_arch: &Arch, configs: &[MethodConfig], seeds: &[u64]) -> Vec<Result<RunOutput>> {
    let jobs: Vec<(&MethodConfig, u64)> = configs.iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    jobs.into_par_iter()
        .map(|(c, s)| run_sequence(tasks, initial_arch, c, s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    /// Final average per-task accuracy for each seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

/// Final average per-task accuracy of EWC and its regularizer variants.
pub fn ablation_suite(tasks: &TaskSequence, initial_arch: &Arch, h: &Hyperparams, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.len() < 3 {
        return Err(RecError::InvalidConfig(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let configs: Vec<MethodConfig> = Method::ABLATIONS.iter().map(|&m| MethodConfig::new(m, h)).collect();
    let mut results = run_grid(tasks, initial_arch, &configs, seeds).into_iter();
    configs
        .iter()
        .map(|c| {
            let per_seed = results
                .by_ref()
                .take(seeds.len())
                .map(|r| r.map(|o| o.final_avg()))
                .collect::<Result<Vec<_>>>()?;
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            Ok(AblationRow {
                method: c.method,
                per_seed,
                mean,
            })
        })
        .collect()
}
