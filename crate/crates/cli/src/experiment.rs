//! `rec run`: every (method, seed) pair of a config, plus the files it leaves behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rec_core::controller::EpisodeRecord;
use rec_core::lifelong::{gen_tasks, load_idx, Splits, SyntheticSpec, TaskLog, VALIDATION_RATIO};
use rec_core::seeds::derive;
use rec_core::transform::format_action_log;
use rec_core::{AccuracyMatrix, Action, Checkpoint, Method, RecError, RunOutput, TaskSequence};

use crate::config::{DataSource, RunConfig};

pub const RUNS_FILE: &str = "runs.jsonl";
pub const RESULTS_FILE: &str = "results.csv";
pub const SEARCH_FILE: &str = "search.jsonl";

/// One task of a run as stored in `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub actions: Vec<String>,
    pub trained_arch: String,
    pub trained_params: usize,
    pub trained_accuracy: f64,
    pub compressed_accuracy: Option<f64>,
    pub no_expansion_a_val: Option<f64>,
}

impl From<&TaskLog> for TaskRecord {
    fn from(l: &TaskLog) -> Self {
        TaskRecord {
            task: l.task,
            actions: l.actions.iter().map(Action::to_string).collect(),
            trained_arch: l.trained_arch.clone(),
            trained_params: l.trained_params,
            trained_accuracy: l.trained_accuracy,
            compressed_accuracy: l.compressed_accuracy,
            no_expansion_a_val: l.no_expansion_a_val,
        }
    }
}

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub initial_arch: String,
    pub accuracy: AccuracyMatrix,
    pub sizes: Vec<usize>,
    pub tasks: Vec<TaskRecord>,
}

impl RunRecord {
    pub fn new(out: &RunOutput, initial_arch: &str) -> Self {
        RunRecord {
            method: out.method,
            seed: out.seed,
            initial_arch: initial_arch.to_string(),
            accuracy: out.accuracy.clone(),
            sizes: out.sizes.clone(),
            tasks: out.logs.iter().map(TaskRecord::from).collect(),
        }
    }
}

#[derive(Serialize)]
struct SearchLine<'a> {
    method: Method,
    /// The run's seed; the flattened record carries the child's own seed.
    run_seed: u64,
    task: usize,
    episode: usize,
    #[serde(flatten)]
    record: &'a EpisodeRecord,
}

/// Task streams for one run seed. Synthetic data is drawn from the seed;
/// IDX data is shared and only the validation split and task draws vary.
pub fn prepare_tasks(cfg: &RunConfig, seed: u64) -> rec_core::Result<TaskSequence> {
    let split_seed = derive(seed, "split", 0);
    let splits = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let spec = SyntheticSpec {
                seed: derive(seed, "data", 0),
                ..spec.clone()
            };
            let (train, test) = spec.generate()?;
            Splits::new(train, test, VALIDATION_RATIO, split_seed)?
        }
        DataSource::Idx(f) => {
            let train = load_idx(&f.train_images, &f.train_labels, f.classes, f.downsample)?;
            let test = load_idx(&f.test_images, &f.test_labels, f.classes, f.downsample)?;
            Splits::new(train, test, VALIDATION_RATIO, split_seed)?
        }
    };
    gen_tasks(cfg.task_kind, &splits, cfg.num_tasks, derive(seed, "tasks", 0))
}

pub struct Job {
    pub method: Method,
    pub seed: u64,
    pub result: rec_core::Result<RunOutput>,
}

/// Runs all pairs on the current rayon pool. Results are in method-major,
/// seed-minor order whatever the thread count.
pub fn run_all(cfg: &RunConfig) -> rec_core::Result<(Vec<Job>, String)> {
    let streams = cfg
        .seeds
        .iter()
        .map(|&s| prepare_tasks(cfg, s))
        .collect::<rec_core::Result<Vec<_>>>()?;
    let first = &streams[0];
    let arch = cfg.arch(first.input_dim(), first.output_dim())?;
    let configs = cfg.method_configs();
    let pairs: Vec<(usize, usize)> =
        (0..configs.len()).flat_map(|m| (0..cfg.seeds.len()).map(move |s| (m, s))).collect();
    let jobs = pairs
        .into_par_iter()
        .map(|(m, s)| Job {
            method: configs[m].method,
            seed: cfg.seeds[s],
            result: rec_core::lifelong::run_sequence(&streams[s], &arch, &configs[m], cfg.seeds[s]),
        })
        .collect();
    Ok((jobs, arch.to_string()))
}

fn csv_line(r: &RunRecord) -> String {
    let t = r.accuracy.tasks();
    let acc = rec_core::lifelong::avg_per_task(&r.accuracy, t).unwrap_or(f64::NAN);
    format!(
        "{},{},{},{},{:.6}\n",
        r.method,
        r.seed,
        r.sizes.first().copied().unwrap_or(0),
        r.sizes.last().copied().unwrap_or(0),
        acc
    )
}

pub fn checkpoint_dir(output: &Path, method: Method, seed: u64) -> PathBuf {
    output.join("checkpoints").join(format!("{method}-s{seed}"))
}

/// Writes the run files; returns one error message per failed run.
pub fn write_outputs(cfg: &RunConfig, jobs: &[Job], initial_arch: &str) -> std::io::Result<Vec<String>> {
    let out = &cfg.output;
    fs::create_dir_all(out)?;
    let mut runs = BufWriter::new(File::create(out.join(RUNS_FILE))?);
    let mut csv = BufWriter::new(File::create(out.join(RESULTS_FILE))?);
    let mut search = BufWriter::new(File::create(out.join(SEARCH_FILE))?);
    csv.write_all(b"method,seed,params_task1,params_task_T,acc_T\n")?;
    let mut failures = Vec::new();
    for job in jobs {
        let run = match &job.result {
            Ok(r) => r,
            Err(err) => {
                let mut msg = format!("{} seed {}: {err}", job.method, job.seed);
                if let RecError::NonFinite { net: Some(net), .. } = err {
                    let dump = out.join("failed").join(format!("{}-s{}.recnet", job.method, job.seed));
                    fs::create_dir_all(dump.parent().expect("has parent"))?;
                    match Checkpoint::new((**net).clone()).save(&dump) {
                        Ok(()) => msg.push_str(&format!(" (state dumped to {})", dump.display())),
                        Err(e) => msg.push_str(&format!(" (state dump failed: {e})")),
                    }
                }
                failures.push(msg);
                continue;
            }
        };
        let record = RunRecord::new(run, initial_arch);
        serde_json::to_writer(&mut runs, &record)?;
        runs.write_all(b"\n")?;
        csv.write_all(csv_line(&record).as_bytes())?;
        for log in &run.logs {
            for (i, rec) in log.search.iter().enumerate() {
                let line = SearchLine {
                    method: run.method,
                    run_seed: run.seed,
                    task: log.task,
                    episode: i + 1,
                    record: rec,
                };
                serde_json::to_writer(&mut search, &line)?;
                search.write_all(b"\n")?;
            }
        }
        if cfg.save_checkpoints {
            let dir = checkpoint_dir(out, run.method, run.seed);
            fs::create_dir_all(&dir)?;
            for (ckpt, log) in run.checkpoints.iter().zip(&run.logs) {
                ckpt.save(dir.join(format!("task{}.recnet", log.task)))
                    .map_err(|e| std::io::Error::other(e.to_string()))?;
                fs::write(dir.join(format!("task{}.actions", log.task)), format_action_log(&log.actions))?;
            }
        }
    }
    runs.flush()?;
    csv.flush()?;
    search.flush()?;
    Ok(failures)
}
