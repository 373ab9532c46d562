//! `rec report`: per-method summary table and plot-ready curves, recomputed
//! from `runs.jsonl`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rec_core::lifelong::{avg_per_task, forgetting_curve};
use rec_core::Method;

use crate::experiment::{RunRecord, RUNS_FILE};

pub const REPORT_FILE: &str = "report.csv";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub params_task1: Vec<usize>,
    pub params_task_t: Vec<usize>,
    /// Average per-task accuracy after the last task, one per run.
    pub acc_t: Vec<f64>,
}

impl MethodSummary {
    pub fn acc_mean(&self) -> f64 {
        self.acc_t.iter().sum::<f64>() / self.acc_t.len() as f64
    }

    /// Sample standard deviation; zero for a single run.
    pub fn acc_std(&self) -> f64 {
        let n = self.acc_t.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.acc_mean();
        (self.acc_t.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

fn size_cell(sizes: &[usize]) -> String {
    let lo = sizes.iter().min().copied().unwrap_or(0);
    let hi = sizes.iter().max().copied().unwrap_or(0);
    if lo == hi {
        lo.to_string()
    } else {
        format!("{lo}-{hi}")
    }
}

pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>, String> {
    let path = dir.join(RUNS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: RunRecord =
            serde_json::from_str(line).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
        let t = rec.accuracy.tasks();
        if t == 0 || rec.sizes.len() != t {
            return Err(format!("{} line {}: run has {t} accuracy rows and {} sizes", path.display(), i + 1, rec.sizes.len()));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(format!("{} holds no runs", path.display()));
    }
    Ok(out)
}

/// Summaries in order of each method's first appearance.
pub fn summarize(records: &[RunRecord]) -> Vec<MethodSummary> {
    let mut out: Vec<MethodSummary> = Vec::new();
    for r in records {
        let idx = match out.iter().position(|s| s.method == r.method) {
            Some(i) => i,
            None => {
                out.push(MethodSummary {
                    method: r.method,
                    runs: 0,
                    params_task1: Vec::new(),
                    params_task_t: Vec::new(),
                    acc_t: Vec::new(),
                });
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        s.runs += 1;
        s.params_task1.push(r.sizes[0]);
        s.params_task_t.push(*r.sizes.last().expect("checked nonempty"));
        s.acc_t.push(avg_per_task(&r.accuracy, r.accuracy.tasks()).expect("checked nonempty"));
    }
    out
}

pub fn table(summaries: &[MethodSummary]) -> String {
    let mut s = format!("{:<12} {:>5} {:>10} {:>10} {:>9} {:>8}\n", "method", "runs", "#W(1)", "#W(T)", "ACC(T)", "std");
    for m in summaries {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>10} {:>10} {:>9.4} {:>8.4}",
            m.method.name(),
            m.runs,
            size_cell(&m.params_task1),
            size_cell(&m.params_task_t),
            m.acc_mean(),
            m.acc_std()
        );
    }
    s
}

pub fn report_csv(summaries: &[MethodSummary]) -> String {
    let mut s = String::from("method,runs,params_task1,params_task_T,acc_T_mean,acc_T_std\n");
    for m in summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6}",
            m.method,
            m.runs,
            size_cell(&m.params_task1),
            size_cell(&m.params_task_t),
            m.acc_mean(),
            m.acc_std()
        );
    }
    s
}

/// Per run and task: average accuracy over learned tasks, and accuracy on task 1.
pub fn curves_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("method,seed,task,avg_acc,task1_acc\n");
    for r in records {
        let first = forgetting_curve(&r.accuracy, 1);
        for t in 1..=r.accuracy.tasks() {
            let avg = avg_per_task(&r.accuracy, t).expect("t in range");
            let _ = writeln!(s, "{},{},{t},{avg:.6},{:.6}", r.method, r.seed, first[t - 1]);
        }
    }
    s
}

/// Reads `dir`, writes the CSVs next to the records and returns the table.
pub fn run_report(dir: &Path) -> Result<String, String> {
    let records = read_records(dir)?;
    let summaries = summarize(&records);
    let io = |e: std::io::Error| e.to_string();
    fs::write(dir.join(REPORT_FILE), report_csv(&summaries)).map_err(io)?;
    fs::write(dir.join(CURVES_FILE), curves_csv(&records)).map_err(io)?;
    Ok(table(&summaries))
}
