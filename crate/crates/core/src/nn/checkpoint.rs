//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OVHR" | version: u32 | tensor*
//! tensor := name_len: u32 | name: utf-8 | rank: u32 | extents: u64 * rank | data: f64 * prod(extents)
//! ```
//!
//! Tensors run to end of file. Besides the ten parameter tensors the file
//! carries `meta.pool_size` and `meta.seed` (the u64 seed bit-cast to f64).

use std::collections::BTreeMap;
use std::path::Path;

use super::layers::{BiLstmLayer, Conv1dLayer, DenseLayer, LstmDirection};
use super::{NnError, RegressorModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OVHR";
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &RegressorModel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + model.parameter_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in model.named_parameters() {
        push_tensor(&mut buf, name, t);
    }
    push_tensor(&mut buf, "meta.pool_size", &Tensor::full(&[1], model.pool_size as f64));
    push_tensor(&mut buf, "meta.seed", &Tensor::full(&[1], f64::from_bits(model.seed)));
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Truncated { offset: self.pos, what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RegressorModel, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(NnError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mut tensors = BTreeMap::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| NnError::Corrupt(format!("tensor name at byte {} is not utf-8", r.pos - name_len)))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(NnError::Corrupt(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= (bytes.len() - r.pos) / 8 + 1)
            .ok_or_else(|| NnError::Corrupt(format!("tensor {name} has implausible extents {shape:?}")))?;
        let raw = r.take(len * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&shape, data)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(NnError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| NnError::Corrupt(format!("missing tensor {name}")))
    };
    let conv_weight = take("conv.weight")?;
    let conv_bias = take("conv.bias")?;
    let mut dir = |prefix: &str| -> Result<LstmDirection, NnError> {
        Ok(LstmDirection {
            w_ih: take(&format!("{prefix}.w_ih"))?,
            w_hh: take(&format!("{prefix}.w_hh"))?,
            bias: take(&format!("{prefix}.bias"))?,
        })
    };
    let fwd = dir("lstm.forward")?;
    let bwd = dir("lstm.backward")?;
    let head_weight = take("head.weight")?;
    let head_bias = take("head.bias")?;
    let pool = take("meta.pool_size")?.data()[0];
    let seed = take("meta.seed")?.data()[0].to_bits();
    if let Some(extra) = tensors.keys().next() {
        return Err(NnError::Corrupt(format!("unexpected tensor {extra}")));
    }

    if conv_weight.rank() != 3 || head_weight.rank() != 2 || fwd.w_hh.rank() != 2 {
        return Err(NnError::Corrupt("parameter ranks do not describe a regressor".into()));
    }
    let (filters, in_channels, kernel) = (conv_weight.shape()[0], conv_weight.shape()[1], conv_weight.shape()[2]);
    let hidden = fwd.w_hh.shape()[1];
    let out_dim = head_weight.shape()[0];
    if !(pool >= 1.0 && pool.fract() == 0.0) {
        return Err(NnError::Corrupt(format!("pool size {pool}")));
    }
    let expected = [
        (&conv_bias, vec![filters]),
        (&fwd.w_ih, vec![4 * hidden, filters]),
        (&fwd.w_hh, vec![4 * hidden, hidden]),
        (&fwd.bias, vec![4 * hidden]),
        (&bwd.w_ih, vec![4 * hidden, filters]),
        (&bwd.w_hh, vec![4 * hidden, hidden]),
        (&bwd.bias, vec![4 * hidden]),
        (&head_weight, vec![out_dim, 2 * hidden]),
        (&head_bias, vec![out_dim]),
    ];
    for (t, shape) in expected {
        t.expect_shape("checkpoint tensor", &shape)?;
    }
    let conv = Conv1dLayer {
        in_channels,
        out_channels: filters,
        kernel,
        weight: conv_weight,
        bias: conv_bias,
    };
    let lstm = BiLstmLayer {
        input_size: filters,
        hidden_size: hidden,
        forward: fwd,
        backward: bwd,
    };
    let head = DenseLayer {
        weight: head_weight,
        bias: head_bias,
    };
    Ok(RegressorModel::from_layers(conv, pool as usize, lstm, head, seed))
}

pub fn save_checkpoint(model: &RegressorModel, path: impl AsRef<Path>) -> Result<(), NnError> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RegressorModel, NnError> {
    decode_checkpoint(&std::fs::read(path)?)
}
