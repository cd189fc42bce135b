//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic            8 bytes  "DRLMCTS\0"
//! version          u32
//! network count    u32
//! per network:
//!   layer count    u32
//!   per layer:
//!     rows         u32      (output width)
//!     cols         u32      (input width)
//!     activation   u8       (0 relu, 1 tanh, 2 softmax, 3 identity)
//!     weights      rows·cols f64, row-major
//!     biases       rows f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Activation, DenseLayer, Mlp};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DRLMCTS\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(nets: &[&Mlp]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
    for net in nets {
        out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
        for layer in net.layers() {
            out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
            out.push(layer.activation.tag());
            for v in layer.weights.iter().chain(&layer.biases) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Corruption("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<Mlp>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(CHECKPOINT_MAGIC.len()).map_err(|_| Error::Format("file too short for magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
    }
    let net_count = r.u32()?;
    let mut nets = Vec::new();
    for _ in 0..net_count {
        let layer_count = r.u32()?;
        let mut layers = Vec::new();
        for _ in 0..layer_count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let tag = r.take(1)?[0];
            let activation = Activation::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("unknown activation tag {tag}")))?;
            let weights = r.f64s(rows * cols)?;
            let biases = r.f64s(rows)?;
            layers.push(DenseLayer::from_parts(cols, rows, weights, biases, activation)?);
        }
        nets.push(Mlp::from_layers(layers).map_err(|e| Error::Corruption(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(nets)
}

pub fn save_checkpoint(nets: &[&Mlp], path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(nets))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Mlp>> {
    read_checkpoint(&fs::read(path)?)
}
