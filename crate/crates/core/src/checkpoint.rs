//! `RECNET01` checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes   "RECNET01"
//! layers     u32       L
//! dims       u64 × (L+1)   input, hidden..., output
//! acts       u8 × L    0 = relu, 1 = identity
//! params     f64 × P   flat view (per layer: weights row-major, then bias)
//! sections   u32       S
//! S × { tag [u8; 4] ("ANCH" | "FISH"), aux u64, len u64, f64 × len }
//! ```
//!
//! `aux` is the Fisher sample count and zero for anchors. Section arrays are
//! aligned with the network's flat view.

use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{RecError, Result};
use crate::netcore::{Activation, Arch, DenseNet, Layer};
use crate::regularize::{Anchor, FisherDiag, Prior};

pub const MAGIC: &[u8; 8] = b"RECNET01";
const TAG_ANCHOR: &[u8; 4] = b"ANCH";
const TAG_FISHER: &[u8; 4] = b"FISH";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DenseNet,
    pub anchor: Option<Anchor>,
    pub fisher: Option<FisherDiag>,
}

impl Checkpoint {
    pub fn new(net: DenseNet) -> Self {
        Checkpoint {
            net,
            anchor: None,
            fisher: None,
        }
    }

    pub fn with_prior(net: DenseNet, prior: &Prior) -> Self {
        Checkpoint {
            net,
            anchor: Some(prior.anchor.clone()),
            fisher: Some(prior.fisher.clone()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.net.param_count();
        for (name, len) in [
            ("anchor", self.anchor.as_ref().map(|a| a.params().len())),
            ("fisher", self.fisher.as_ref().map(FisherDiag::len)),
        ] {
            if let Some(len) = len {
                if len != n {
                    return Err(RecError::Format(format!("{name} length {len} != parameter count {n}")));
                }
            }
        }
        let mut out = Vec::with_capacity(64 + 8 * n);
        out.extend_from_slice(MAGIC);
        let layers = self.net.layers();
        out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for d in self.net.arch().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for layer in layers {
            out.push(match layer.activation() {
                Activation::Relu => 0,
                Activation::Identity => 1,
            });
        }
        for p in self.net.flatten() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let sections = usize::from(self.anchor.is_some()) + usize::from(self.fisher.is_some());
        out.extend_from_slice(&(sections as u32).to_le_bytes());
        if let Some(a) = &self.anchor {
            write_section(&mut out, TAG_ANCHOR, 0, a.params());
        }
        if let Some(f) = &self.fisher {
            write_section(&mut out, TAG_FISHER, f.sample_count() as u64, f.values());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic header")?;
        if magic != MAGIC {
            return Err(RecError::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let depth = r.u32("layer count")? as usize;
        if depth == 0 {
            return Err(RecError::Format("checkpoint with zero layers".into()));
        }
        let dims = (0..=depth)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = Arch::from_dims(&dims)?;
        let acts = r.take(depth, "activations")?.to_vec();
        let mut layers = Vec::with_capacity(depth);
        for (l, (fan_in, fan_out)) in arch.layer_shapes().into_iter().enumerate() {
            let w = r.f64s(fan_in * fan_out, "weights")?;
            let b = r.f64s(fan_out, "bias")?;
            let activation = match acts[l] {
                0 => Activation::Relu,
                1 => Activation::Identity,
                c => return Err(RecError::Format(format!("unknown activation code {c}"))),
            };
            layers.push(Layer::new(
                Array2::from_shape_vec((fan_in, fan_out), w).expect("length matches"),
                Array1::from(b),
                activation,
            )?);
        }
        let net = DenseNet::from_layers(layers)?;
        let n = net.param_count();
        let sections = r.u32("section count")?;
        let mut anchor = None;
        let mut fisher = None;
        for _ in 0..sections {
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
            let aux = r.u64("section aux")?;
            let len = r.u64("section length")? as usize;
            if len != n {
                return Err(RecError::Format(format!("section length {len} != parameter count {n}")));
            }
            let values = r.f64s(len, "section data")?;
            match &tag {
                TAG_ANCHOR => anchor = Some(Anchor::new(arch.clone(), values)?),
                TAG_FISHER => fisher = Some(FisherDiag::new(values, aux as usize)?),
                other => {
                    return Err(RecError::Format(format!(
                        "unknown section tag {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(RecError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { net, anchor, fisher })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn prior(&self) -> Option<Prior> {
        match (&self.anchor, &self.fisher) {
            (Some(a), Some(f)) => Prior::new(a.clone(), f.clone()).ok(),
            _ => None,
        }
    }
}

/// SHA-256 of a network's checkpoint encoding.
pub fn content_hash(net: &DenseNet) -> [u8; 32] {
    let bytes = Checkpoint::new(net.clone()).to_bytes().expect("bare network always encodes");
    Sha256::digest(&bytes).into()
}

fn write_section(out: &mut Vec<u8>, tag: &[u8; 4], aux: u64, values: &[f64]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&aux.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(RecError::Truncated(format!("{what} at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| RecError::Format("length overflow".into()))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
