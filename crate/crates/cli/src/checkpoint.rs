//! `rec checkpoint`: write and inspect `RECNET01` files.

use std::fmt::Write as _;
use std::path::Path;

use rec_core::checkpoint::content_hash;
use rec_core::netcore::init_network;
use rec_core::{Arch, Checkpoint};

/// Where `checkpoint save` takes its network from.
#[derive(Debug, Clone, PartialEq)]
pub enum SaveSource<'a> {
    /// Re-encode an existing checkpoint.
    Copy(&'a Path),
    /// Seeded He initialization of `dims` (input, hidden..., output).
    Fresh { dims: &'a [usize], seed: u64 },
}

pub fn save(path: &Path, source: SaveSource<'_>) -> rec_core::Result<Checkpoint> {
    let ckpt = match source {
        SaveSource::Copy(src) => Checkpoint::load(src)?,
        SaveSource::Fresh { dims, seed } => Checkpoint::new(init_network(&Arch::from_dims(dims)?, seed)),
    };
    ckpt.save(path)?;
    Ok(ckpt)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Loads `path` and describes it in a few lines.
pub fn describe(path: &Path) -> rec_core::Result<String> {
    let c = Checkpoint::load(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "arch      {}", c.net.arch());
    let _ = writeln!(s, "params    {}", c.net.param_count());
    let _ = writeln!(s, "sha256    {}", hex(&content_hash(&c.net)));
    let _ = writeln!(s, "anchor    {}", if c.anchor.is_some() { "yes" } else { "no" });
    match &c.fisher {
        Some(f) => {
            let _ = writeln!(s, "fisher    {} samples", f.sample_count());
        }
        None => {
            let _ = writeln!(s, "fisher    no");
        }
    }
    Ok(s)
}
