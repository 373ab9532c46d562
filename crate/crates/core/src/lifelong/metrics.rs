//! Accuracy bookkeeping across a task sequence.
//!
//! Task numbers in this module start at 1.

use serde::{Deserialize, Serialize};

use crate::error::{RecError, Result};

/// `acc[t][k]`: accuracy on task `k` after learning task `t`, for `k ≤ t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next task; it must hold one entry per learned task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(RecError::shape("accuracy row", self.rows.len() + 1, row.len()));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RecError::InvalidConfig(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, k: usize) -> Option<f64> {
        if k == 0 || k > t {
            return None;
        }
        self.rows.get(t - 1).map(|r| r[k - 1])
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        t.checked_sub(1).and_then(|i| self.rows.get(i)).map(Vec::as_slice)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Mean of `acc[t][1..=t]`.
pub fn avg_per_task(acc: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = acc
        .row(t)
        .ok_or_else(|| RecError::InvalidConfig(format!("task {t} not in 1..={}", acc.tasks())))?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `acc[t][k]` for `t = k..=T`.
pub fn forgetting_curve(acc: &AccuracyMatrix, k: usize) -> Vec<f64> {
    (k.max(1)..=acc.tasks()).filter_map(|t| acc.get(t, k)).collect()
}
