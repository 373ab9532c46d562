//! Compression of an expanded network back to the initial architecture by
//! logit matching.
//!
//! The student first fits the teacher's logits under a mean squared ℓ2 loss,
//! then trains on cross-entropy plus that loss with unit weights.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{content_hash, Reader};
use crate::error::{RecError, Result};
use crate::netcore::{backward, forward, head_loss_ce, init_network, predict_logits, Arch, Dataset, DenseNet, Sgd};
use crate::regularize::epoch_order;

const SOFT_MAGIC: &[u8; 8] = b"RECSOFT1";

/// Teacher logits, row-aligned with the dataset they were computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    logits: Array2<f64>,
}

impl SoftTargets {
    pub fn new(logits: Array2<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(RecError::NonFinite {
                context: "soft targets".into(),
                net: None,
            });
        }
        Ok(SoftTargets { logits })
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn rows(&self) -> usize {
        self.logits.nrows()
    }

    pub fn select(&self, indices: &[usize]) -> Array2<f64> {
        self.logits.select(ndarray::Axis(0), indices)
    }

    /// Writes `RECSOFT1`, the teacher hash, `u64` rows and cols, then the
    /// logits as little-endian `f64` in row-major order.
    pub fn save(&self, path: impl AsRef<Path>, teacher_hash: &[u8; 32]) -> Result<()> {
        let mut out = Vec::with_capacity(56 + 8 * self.logits.len());
        out.extend_from_slice(SOFT_MAGIC);
        out.extend_from_slice(teacher_hash);
        out.extend_from_slice(&(self.logits.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.logits.ncols() as u64).to_le_bytes());
        for v in self.logits.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a cache file, or `Ok(None)` if it was made by a different teacher.
    pub fn load(path: impl AsRef<Path>, teacher_hash: &[u8; 32]) -> Result<Option<Self>> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(8, "soft-target magic")?;
        if magic != SOFT_MAGIC {
            return Err(RecError::BadMagic {
                expected: String::from_utf8_lossy(SOFT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        if r.take(32, "teacher hash")? != teacher_hash {
            return Ok(None);
        }
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        let data = r.f64s(rows * cols, "logits")?;
        if r.pos != bytes.len() {
            return Err(RecError::Format("trailing bytes in soft-target cache".into()));
        }
        Ok(Some(SoftTargets::new(
            Array2::from_shape_vec((rows, cols), data).expect("length matches"),
        )?))
    }
}

pub fn collect_soft_targets(teacher: &DenseNet, dataset: &Dataset) -> Result<SoftTargets> {
    SoftTargets::new(predict_logits(teacher, dataset.inputs().view())?)
}

/// Soft targets from a disk cache keyed by the teacher's content hash,
/// computing and storing them on a miss.
pub fn cached_soft_targets(teacher: &DenseNet, dataset: &Dataset, path: impl AsRef<Path>) -> Result<SoftTargets> {
    let path = path.as_ref();
    let hash = content_hash(teacher);
    if path.exists() {
        if let Some(t) = SoftTargets::load(path, &hash)? {
            if t.rows() == dataset.len() {
                return Ok(t);
            }
        }
    }
    let targets = collect_soft_targets(teacher, dataset)?;
    targets.save(path, &hash)?;
    Ok(targets)
}

/// `(1/N) Σ_i ‖f_i − z_i‖²` and its gradient `2(f − z)/N`.
pub fn kd_loss(student_logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if student_logits.dim() != targets.dim() {
        return Err(RecError::shape(
            "kd targets",
            student_logits.len(),
            targets.len(),
        ));
    }
    let n = student_logits.nrows();
    if n == 0 {
        return Err(RecError::EmptyDataset("kd loss"));
    }
    let diff = &student_logits - &targets;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
    Ok((value, diff * (2.0 / n as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub epochs: usize,
    /// Share of epochs spent on the logit-matching loss alone.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl DistillConfig {
    pub fn warmup_epochs(&self) -> usize {
        (self.epochs as f64 * self.warmup_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(0.0..=1.0).contains(&self.warmup_fraction) || !(self.lr >= 0.0) {
            return Err(RecError::InvalidConfig(format!("bad distillation config {self:?}")));
        }
        Ok(())
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 8,
            warmup_fraction: 0.25,
            batch_size: 256,
            lr: 0.001,
            momentum: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum StudentInit {
    /// He-initialized from the compression seed.
    Fresh,
    /// Start from given weights, which must have the initial architecture.
    From(DenseNet),
}

/// Trains a student with `initial_arch` to mimic `teacher` on `dataset`.
pub fn compress(
    teacher: &DenseNet,
    initial_arch: &Arch,
    dataset: &Dataset,
    cfg: &DistillConfig,
    init: StudentInit,
    seed: u64,
) -> Result<DenseNet> {
    let targets = collect_soft_targets(teacher, dataset)?;
    compress_with_targets(&targets, initial_arch, dataset, cfg, init, seed)
}

pub fn compress_with_targets(
    targets: &SoftTargets,
    initial_arch: &Arch,
    dataset: &Dataset,
    cfg: &DistillConfig,
    init: StudentInit,
    seed: u64,
) -> Result<DenseNet> {
    cfg.validate()?;
    if targets.rows() != dataset.len() {
        return Err(RecError::shape("soft-target rows", dataset.len(), targets.rows()));
    }
    if targets.logits.ncols() != initial_arch.output_dim() {
        return Err(RecError::shape("soft-target columns", initial_arch.output_dim(), targets.logits.ncols()));
    }
    let mut student = match init {
        StudentInit::Fresh => init_network(initial_arch, seed),
        StudentInit::From(net) => {
            if net.arch() != initial_arch {
                return Err(RecError::InvalidArch(format!(
                    "student init has arch {}, expected {initial_arch}",
                    net.arch()
                )));
            }
            net
        }
    };
    let warmup = cfg.warmup_epochs();
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D157);
    for epoch in 0..cfg.epochs {
        let joint = epoch >= warmup;
        for idx in epoch_order(dataset.len(), &mut rng).chunks(cfg.batch_size) {
            let batch = dataset.select(idx)?;
            let (logits, cache) = forward(&student, batch.inputs().view())?;
            let (mut value, mut dlogits) = kd_loss(logits.view(), targets.select(idx).view())?;
            if joint {
                let (ce, dce) = head_loss_ce(&logits, batch.labels(), batch.head())?;
                value += ce;
                dlogits += &dce;
            }
            if !value.is_finite() {
                return Err(RecError::NonFinite {
                    context: format!("distillation loss at epoch {epoch}"),
                    net: Some(Box::new(student)),
                });
            }
            let grads = backward(&student, &cache, &dlogits)?;
            sgd.step(&mut student, &grads)?;
        }
    }
    Ok(student)
}
