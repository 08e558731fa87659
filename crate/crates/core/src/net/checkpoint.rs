//! Binary parameter file: `IFCK`, u32 version, then records until end of file, each
//! `u32 name_len, name, u32 rank, u32 extents[rank], f64 payload[]`. All little-endian.
//! The architecture is recovered from parameter names and shapes.

use std::path::Path;

use super::{NetConfig, StreamParams, TwoStreamModel};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &TwoStreamModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in model.named_params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(std::fs::write(path, out)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return contract(format!("checkpoint truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<TwoStreamModel> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return contract(format!("{}: not a checkpoint (bad magic)", path.display()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return contract(format!("{}: unsupported checkpoint version {version}", path.display()));
    }
    let mut records: Vec<(String, Tensor)> = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| crate::Error::Contract("checkpoint name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur.take(8 * n)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    let config = infer_config(&records)?;
    let layout = config.param_layout();
    let mut streams = Vec::new();
    for stream in ["albedo", "shading"] {
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let full = format!("{stream}.{name}");
            let Some((_, t)) = records.iter().find(|(n, _)| *n == full) else {
                return contract(format!("checkpoint lacks parameter {full}"));
            };
            if t.shape() != shape.as_slice() {
                return contract(format!("{full} has shape {:?}, expected {shape:?}", t.shape()));
            }
            tensors.push(t.clone());
        }
        streams.push(StreamParams { tensors });
    }
    if records.len() != 2 * layout.len() {
        return contract(format!("checkpoint has {} records, expected {}", records.len(), 2 * layout.len()));
    }
    let shading = streams.pop().unwrap();
    let albedo = streams.pop().unwrap();
    Ok(TwoStreamModel { config, albedo, shading })
}

fn infer_config(records: &[(String, Tensor)]) -> Result<NetConfig> {
    let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let mut channels = Vec::new();
    while let Some(w) = find(&format!("albedo.enc{}.weight", channels.len() + 1)) {
        channels.push(w.shape()[0]);
    }
    let Some(agg) = find("albedo.agg1.weight") else {
        return contract("checkpoint lacks albedo.agg1.weight");
    };
    if channels.is_empty() {
        return contract("checkpoint lacks encoder parameters");
    }
    let out = find("albedo.out.weight");
    Ok(NetConfig {
        channels,
        fuse_channels: agg.shape()[0],
        zero_init_output: out.is_some_and(|t| t.data().iter().all(|&v| v == 0.0)),
    })
}
