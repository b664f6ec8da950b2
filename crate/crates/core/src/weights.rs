//! `SDNW` weight container: magic, format version, tensor count, then per
//! tensor its UTF-8 name, rank, dims and little-endian `f32` data. Holds
//! every parameter and every batch-norm running statistic.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Network, Op};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub const MAGIC: &[u8; 4] = b"SDNW";
pub const VERSION: u32 = 1;

/// Named tensors in container order: parameters first, then running
/// statistics as `<bn node>.running_mean` / `.running_var`.
pub fn named_tensors<T: Scalar>(net: &Network<T>) -> Vec<(String, Tensor4<f32>)> {
    let mut out: Vec<(String, Tensor4<f32>)> = net
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.cast()))
        .collect();
    for node in net.graph().nodes() {
        if let Op::BatchNorm { stats, .. } = node.op {
            let st = &net.stats[stats];
            let shape = Shape4::new(1, st.channels(), 1, 1);
            let as_tensor = |v: &[T]| Tensor4::from_fn(shape, |i| v[i].f64() as f32);
            out.push((format!("{}.running_mean", node.name), as_tensor(&st.mean)));
            out.push((format!("{}.running_var", node.name), as_tensor(&st.var)));
        }
    }
    out
}

pub fn encode(tensors: &[(String, Tensor4<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("container truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor4<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an SDNW container".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!(
                "tensor '{name}' has unsupported rank {rank}"
            )));
        }
        let mut dims = [1usize; 4];
        for d in &mut dims[4 - rank..] {
            *d = r.u32()? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(shape.numel() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor4::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, net: &Network<T>) -> Result<()> {
    fs::write(path, encode(&named_tensors(net)))?;
    Ok(())
}

/// Overwrite `net`'s parameters and running statistics with the tensors
/// in `tensors`, matched by name. Every tensor of the network must be
/// present with the same shape.
pub fn load_tensors<T: Scalar>(
    net: &mut Network<T>,
    tensors: Vec<(String, Tensor4<f32>)>,
) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor4<f32>> =
        tensors.into_iter().collect();
    let mut take = |name: &str, shape: Shape4| -> Result<Tensor4<f32>> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::Format(format!("weights lack tensor '{name}'")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {}, expected {shape}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for p in net.params.iter_mut() {
        p.value = take(&p.name, p.value.shape())?.cast();
    }
    let bn: Vec<(usize, String)> = net
        .graph()
        .nodes()
        .iter()
        .filter_map(|n| match n.op {
            Op::BatchNorm { stats, .. } => Some((stats, n.name.clone())),
            _ => None,
        })
        .collect();
    for (idx, name) in bn {
        let shape = Shape4::new(1, net.stats[idx].channels(), 1, 1);
        let mean = take(&format!("{name}.running_mean"), shape)?;
        let var = take(&format!("{name}.running_var"), shape)?;
        net.stats[idx].mean = mean.data().iter().map(|&v| T::of(f64::from(v))).collect();
        net.stats[idx].var = var.data().iter().map(|&v| T::of(f64::from(v))).collect();
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!(
            "weights contain unknown tensor '{extra}'"
        )));
    }
    Ok(())
}

pub fn load<T: Scalar>(path: &Path, net: &mut Network<T>) -> Result<()> {
    load_tensors(net, decode(&fs::read(path)?)?)
}
