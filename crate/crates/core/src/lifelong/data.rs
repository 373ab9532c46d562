//! Base datasets: a bundled synthetic digit generator and IDX files.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RecError, Result};
use crate::netcore::Dataset;
use crate::seeds;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const VALIDATION_RATIO: f64 = 0.1;

/// Train, validation and test splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Holds out a seeded `validation_ratio` share of each class of `train`.
    pub fn new(train: Dataset, test: Dataset, validation_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_ratio) {
            return Err(RecError::InvalidConfig(format!("validation ratio {validation_ratio} not in [0, 1)")));
        }
        if train.input_dim() != test.input_dim() {
            return Err(RecError::shape("test input dim", train.input_dim(), test.input_dim()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut val = Vec::new();
        let mut rest = Vec::new();
        for class in 0..train.head().classes {
            let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels()[i] == class).collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let k = ((idx.len() as f64 * validation_ratio).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
            val.extend_from_slice(&idx[..k]);
            rest.extend_from_slice(&idx[k..]);
        }
        if rest.is_empty() {
            return Err(RecError::EmptyDataset("too few training samples for a validation split"));
        }
        val.sort_unstable();
        rest.sort_unstable();
        Ok(Splits {
            train: train.select(&rest)?,
            validation: train.select(&val)?,
            test,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.train.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.train.head().classes
    }

    pub fn map_inputs(&self, mut f: impl FnMut(&Array2<f64>) -> Result<Array2<f64>>) -> Result<Splits> {
        Ok(Splits {
            train: self.train.map_inputs(f(self.train.inputs())?)?,
            validation: self.validation.map_inputs(f(self.validation.inputs())?)?,
            test: self.test.map_inputs(f(self.test.inputs())?)?,
        })
    }
}

/// Digit-like images built from blurred random strokes.
///
/// Each class has a fixed prototype; samples are the prototype shifted by up
/// to one pixel in each direction plus Gaussian pixel noise, clipped to
/// `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub side: usize,
    pub classes: usize,
    pub strokes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            side: 8,
            classes: 10,
            strokes: 3,
            train_per_class: 220,
            test_per_class: 100,
            noise: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 4 || self.classes < 2 || self.strokes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(RecError::InvalidConfig(format!("bad synthetic spec {self:?}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(RecError::InvalidConfig(format!("bad synthetic noise {}", self.noise)));
        }
        Ok(())
    }

    pub fn prototypes(&self) -> Array2<f64> {
        let s = self.side;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, "prototypes", 0));
        let mut out = Array2::zeros((self.classes, s * s));
        let lo = 1.0;
        let hi = (s - 2) as f64;
        for mut row in out.outer_iter_mut() {
            for _ in 0..self.strokes {
                let (r0, c0) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                let (r1, c1) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                let steps = 4 * s;
                for k in 0..=steps {
                    let u = k as f64 / steps as f64;
                    let (pr, pc) = (r0 + u * (r1 - r0), c0 + u * (c1 - c0));
                    for r in 0..s {
                        for c in 0..s {
                            let d2 = (r as f64 - pr).powi(2) + (c as f64 - pc).powi(2);
                            let v = (-d2 / (2.0 * 0.6 * 0.6)).exp();
                            let px: &mut f64 = &mut row[r * s + c];
                            *px = px.max(v);
                        }
                    }
                }
            }
        }
        out
    }

    /// `(train, test)` sets, labelled `0..classes`, class-interleaved.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let protos = self.prototypes();
        let train = self.sample(&protos, self.train_per_class, seeds::derive(self.seed, "train", 0))?;
        let test = self.sample(&protos, self.test_per_class, seeds::derive(self.seed, "test", 0))?;
        Ok((train, test))
    }

    fn sample(&self, protos: &Array2<f64>, per_class: usize, seed: u64) -> Result<Dataset> {
        let s = self.side as isize;
        let n = per_class * self.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise).map_err(|e| RecError::InvalidConfig(e.to_string()))?;
        let mut inputs = Array2::zeros((n, (s * s) as usize));
        let mut labels = Vec::with_capacity(n);
        for (i, mut row) in inputs.outer_iter_mut().enumerate() {
            let class = i % self.classes;
            labels.push(class);
            let (dr, dc) = (rng.random_range(-1..=1i64) as isize, rng.random_range(-1..=1i64) as isize);
            for r in 0..s {
                for c in 0..s {
                    let (sr, sc) = (r - dr, c - dc);
                    let base = if (0..s).contains(&sr) && (0..s).contains(&sc) {
                        protos[[class, (sr * s + sc) as usize]]
                    } else {
                        0.0
                    };
                    row[(r * s + c) as usize] = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        Dataset::new(inputs, labels, self.classes)
    }
}

fn read_be_u32(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| RecError::Truncated(format!("IDX {what}")))
}

/// Parses an IDX image file into `[n, rows·cols]` with values scaled to `[0, 1]`.
/// Returns the matrix and the image side lengths.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Array2<f64>, usize, usize)> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(RecError::BadMagic {
            expected: format!("{IDX_IMAGES_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = read_be_u32(bytes, 4, "count")? as usize;
    let rows = read_be_u32(bytes, 8, "rows")? as usize;
    let cols = read_be_u32(bytes, 12, "cols")? as usize;
    let len = n * rows * cols;
    let data = bytes
        .get(16..16 + len)
        .ok_or_else(|| RecError::Truncated(format!("IDX images: expected {len} pixel bytes")))?;
    if bytes.len() != 16 + len {
        return Err(RecError::Format("trailing bytes in IDX image file".into()));
    }
    let values = data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Array2::from_shape_vec((n, rows * cols), values).expect("length matches"), rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(RecError::BadMagic {
            expected: format!("{IDX_LABELS_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = read_be_u32(bytes, 4, "count")? as usize;
    let data = bytes
        .get(8..8 + n)
        .ok_or_else(|| RecError::Truncated(format!("IDX labels: expected {n} label bytes")))?;
    if bytes.len() != 8 + n {
        return Err(RecError::Format("trailing bytes in IDX label file".into()));
    }
    Ok(data.iter().map(|&b| b as usize).collect())
}

/// Averages non-overlapping 2×2 blocks of square-or-rectangular images.
pub fn downsample_2x2(inputs: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if rows * cols != inputs.ncols() || rows % 2 != 0 || cols % 2 != 0 {
        return Err(RecError::InvalidConfig(format!("cannot downsample {rows}x{cols} images")));
    }
    let (hr, hc) = (rows / 2, cols / 2);
    let mut out = Array2::zeros((inputs.nrows(), hr * hc));
    for (src, mut dst) in inputs.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for r in 0..hr {
            for c in 0..hc {
                let at = |dr: usize, dc: usize| src[(2 * r + dr) * cols + 2 * c + dc];
                dst[r * hc + c] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    Ok(out)
}

/// Loads an IDX image/label pair. Label values must be below `classes`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, classes: usize, downsample: bool) -> Result<Dataset> {
    let (mut x, rows, cols) = parse_idx_images(&std::fs::read(images)?)?;
    let y = parse_idx_labels(&std::fs::read(labels)?)?;
    if downsample {
        x = downsample_2x2(&x, rows, cols)?;
    }
    Dataset::new(x, y, classes)
}

/// Writes images as IDX, quantizing `[0, 1]` values to bytes.
pub fn write_idx_images(path: impl AsRef<Path>, inputs: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != inputs.ncols() {
        return Err(RecError::shape("IDX image size", inputs.ncols(), rows * cols));
    }
    let mut out = Vec::with_capacity(16 + inputs.len());
    for v in [IDX_IMAGES_MAGIC, inputs.nrows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(inputs.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| RecError::Format(format!("label {l} does not fit a byte")))?);
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            train_per_class: 5,
            test_per_class: 3,
            ..SyntheticSpec::default()
        };
        let (a, at) = spec.generate().unwrap();
        let (b, _) = spec.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_eq!(at.len(), 30);
        assert_eq!(a.input_dim(), 64);
        assert!(a.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
        for k in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 5);
        }
        let (c, _) = SyntheticSpec { seed: 1, ..spec }.generate().unwrap();
        assert_ne!(a.inputs(), c.inputs());
    }

    #[test]
    fn splits_are_disjoint_and_cover_train() {
        let spec = SyntheticSpec {
            train_per_class: 10,
            test_per_class: 2,
            ..SyntheticSpec::default()
        };
        let (train, test) = spec.generate().unwrap();
        let s = Splits::new(train.clone(), test, VALIDATION_RATIO, 3).unwrap();
        assert_eq!(s.validation.len(), 10);
        assert_eq!(s.train.len() + s.validation.len(), train.len());
        let mut rows: Vec<Vec<u64>> = s
            .train
            .inputs()
            .outer_iter()
            .chain(s.validation.inputs().outer_iter())
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), train.len());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let x = array![[0.0, 1.0, 0.5, 0.25], [1.0, 1.0, 0.0, 0.0]];
        let xi = dir.path().join("x.idx");
        let yi = dir.path().join("y.idx");
        write_idx_images(&xi, &x, 2, 2).unwrap();
        write_idx_labels(&yi, &[3, 1]).unwrap();
        let d = load_idx(&xi, &yi, 4, false).unwrap();
        assert_eq!(d.labels(), &[3, 1]);
        assert_eq!(d.inputs()[[0, 1]], 1.0);
        assert!((d.inputs()[[0, 2]] - 128.0 / 255.0).abs() < 1e-12);
        let small = load_idx(&xi, &yi, 4, true).unwrap();
        assert_eq!(small.input_dim(), 1);
        assert!((small.inputs()[[1, 0]] - 0.5).abs() < 1e-12);

        let bytes = std::fs::read(&xi).unwrap();
        assert!(matches!(parse_idx_labels(&bytes), Err(RecError::BadMagic { .. })));
        assert!(matches!(parse_idx_images(&bytes[..18]), Err(RecError::Truncated(_))));
    }
}
