//! Task-sequence generators: pixel permutations, rotations and class splits.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Splits;
use crate::error::{RecError, Result};
use crate::netcore::{Dataset, Head};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Permuted,
    Rotated,
    Split,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Permuted => "permuted",
            TaskKind::Rotated => "rotated",
            TaskKind::Split => "split",
        })
    }
}

impl FromStr for TaskKind {
    type Err = RecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permuted" => Ok(TaskKind::Permuted),
            "rotated" => Ok(TaskKind::Rotated),
            "split" => Ok(TaskKind::Split),
            _ => Err(RecError::InvalidConfig(format!("unknown task kind {s:?}"))),
        }
    }
}

/// How a task's inputs or labels were derived from the base data.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskTransform {
    /// `out[j] = in[perm[j]]`.
    Permutation(Vec<usize>),
    /// Degrees, counter-clockwise.
    Rotation(f64),
    /// Original class ids owned by the task, in head order.
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub splits: Splits,
    pub transform: TaskTransform,
}

impl Task {
    pub fn train(&self) -> &Dataset {
        &self.splits.train
    }

    pub fn validation(&self) -> &Dataset {
        &self.splits.validation
    }

    pub fn test(&self) -> &Dataset {
        &self.splits.test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub kind: TaskKind,
    pub seed: u64,
    pub tasks: Vec<Task>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].splits.input_dim()
    }

    /// Width of the shared output layer.
    pub fn output_dim(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| t.splits.train.head().end())
            .max()
            .unwrap_or(0)
    }
}

fn check_count(t: usize) -> Result<()> {
    if t == 0 {
        return Err(RecError::InvalidConfig("a task sequence needs at least one task".into()));
    }
    Ok(())
}

pub fn permute_columns(inputs: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    inputs.select(ndarray::Axis(1), perm)
}

/// Task 1 is the base data; later tasks apply independent seeded pixel
/// permutations.
pub fn gen_permuted_tasks(base: &Splits, t: usize, seed: u64) -> Result<TaskSequence> {
    check_count(t)?;
    let d = base.input_dim();
    let tasks = (0..t)
        .map(|i| {
            let mut perm: Vec<usize> = (0..d).collect();
            if i > 0 {
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, "permutation", i as u64)));
            }
            let splits = base.map_inputs(|x| Ok(permute_columns(x, &perm)))?;
            Ok(Task {
                splits,
                transform: TaskTransform::Permutation(perm),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSequence {
        kind: TaskKind::Permuted,
        seed,
        tasks,
    })
}

pub fn image_side(dim: usize) -> Result<usize> {
    let s = (dim as f64).sqrt().round() as usize;
    if s * s != dim {
        return Err(RecError::InvalidConfig(format!("input dim {dim} is not a square image")));
    }
    Ok(s)
}

/// Source pixel for every output pixel of a rotation by `degrees` about the
/// image center, or `None` where the source falls outside the image.
pub fn rotation_map(side: usize, degrees: f64) -> Vec<Option<usize>> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let c0 = (side as f64 - 1.0) / 2.0;
    let mut map = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64 - c0, c as f64 - c0);
            // Rows grow downward, so this inverse map turns content
            // counter-clockwise on screen.
            let sr = (cos * y + sin * x + c0).round();
            let sc = (-sin * y + cos * x + c0).round();
            let inside = sr >= 0.0 && sc >= 0.0 && sr < side as f64 && sc < side as f64;
            map.push(inside.then(|| sr as usize * side + sc as usize));
        }
    }
    map
}

pub fn rotate_images(inputs: &Array2<f64>, side: usize, degrees: f64) -> Result<Array2<f64>> {
    if side * side != inputs.ncols() {
        return Err(RecError::shape("rotation image size", side * side, inputs.ncols()));
    }
    let map = rotation_map(side, degrees);
    let mut out = Array2::zeros(inputs.raw_dim());
    for (src, mut dst) in inputs.outer_iter().zip(out.outer_iter_mut()) {
        for (j, m) in map.iter().enumerate() {
            if let Some(i) = *m {
                dst[j] = src[i];
            }
        }
    }
    Ok(out)
}

/// Task `t` (from 1) rotates every image by `(t−1)·180/T` degrees.
pub fn gen_rotated_tasks(base: &Splits, t: usize) -> Result<TaskSequence> {
    check_count(t)?;
    let side = image_side(base.input_dim())?;
    let tasks = (0..t)
        .map(|i| {
            let angle = i as f64 * 180.0 / t as f64;
            let splits = base.map_inputs(|x| rotate_images(x, side, angle))?;
            Ok(Task {
                splits,
                transform: TaskTransform::Rotation(angle),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSequence {
        kind: TaskKind::Rotated,
        seed: 0,
        tasks,
    })
}

fn split_dataset(d: &Dataset, classes: &[usize], offset: usize) -> Result<Dataset> {
    let idx: Vec<usize> = (0..d.len()).filter(|&i| classes.contains(&d.labels()[i])).collect();
    if idx.is_empty() {
        return Err(RecError::EmptyDataset("split task has no samples"));
    }
    let labels = idx.iter().map(|&i| d.labels()[i] - offset).collect();
    Dataset::with_head(
        d.inputs().select(ndarray::Axis(0), &idx),
        labels,
        Head {
            offset,
            classes: classes.len(),
        },
    )
}

/// Contiguous class blocks; task `t` owns output columns
/// `[t·K/T, (t+1)·K/T)` and its labels are relative to that head.
pub fn gen_split_tasks(base: &Splits, t: usize) -> Result<TaskSequence> {
    check_count(t)?;
    let k = base.classes();
    if k % t != 0 {
        return Err(RecError::InvalidConfig(format!("{k} classes cannot be split into {t} tasks")));
    }
    let per = k / t;
    let tasks = (0..t)
        .map(|i| {
            let classes: Vec<usize> = (i * per..(i + 1) * per).collect();
            let offset = i * per;
            Ok(Task {
                splits: Splits {
                    train: split_dataset(&base.train, &classes, offset)?,
                    validation: split_dataset(&base.validation, &classes, offset)?,
                    test: split_dataset(&base.test, &classes, offset)?,
                },
                transform: TaskTransform::Classes(classes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSequence {
        kind: TaskKind::Split,
        seed: 0,
        tasks,
    })
}

pub fn gen_tasks(kind: TaskKind, base: &Splits, t: usize, seed: u64) -> Result<TaskSequence> {
    match kind {
        TaskKind::Permuted => gen_permuted_tasks(base, t, seed),
        TaskKind::Rotated => gen_rotated_tasks(base, t),
        TaskKind::Split => gen_split_tasks(base, t),
    }
}
