//! Flat binary container for named real arrays.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes   b"SFBCARR\0"
//! version  u32       currently 1
//! count    u32       number of arrays
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (u64 x ndim)
//!   data     f64 x product(dims), row-major
//! ```
//!
//! Nothing may follow the last array.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::{Dense, MlpParams, MlpSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SFBCARR\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        let expected: usize = a.shape.iter().product();
        if expected != a.data.len() {
            return Err(Error::shape(format!("array {}", a.name), expected, a.data.len()));
        }
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_owned();
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("array {name} too large")))?;
        let raw = c.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(arrays)
}

pub fn write_arrays(path: impl AsRef<Path>, arrays: &[NamedArray]) -> Result<()> {
    std::fs::write(path, encode(arrays)?)?;
    Ok(())
}

pub fn read_arrays(path: impl AsRef<Path>) -> Result<Vec<NamedArray>> {
    decode(&std::fs::read(path)?)
}

impl MlpParams {
    /// Arrays named `{prefix}.{layer}.weight` and `{prefix}.{layer}.bias`.
    pub fn to_named(&self, prefix: &str) -> Vec<NamedArray> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push(NamedArray {
                name: format!("{prefix}.{i}.weight"),
                shape: l.weights.shape().to_vec(),
                data: l.weights.iter().copied().collect(),
            });
            out.push(NamedArray {
                name: format!("{prefix}.{i}.bias"),
                shape: vec![l.bias.len()],
                data: l.bias.to_vec(),
            });
        }
        out
    }

    pub fn from_named(spec: &MlpSpec, prefix: &str, arrays: &[NamedArray]) -> Result<Self> {
        let find = |name: String| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
        };
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, w) in spec.layer_widths.windows(2).enumerate() {
            let weight = find(format!("{prefix}.{i}.weight"))?;
            let bias = find(format!("{prefix}.{i}.bias"))?;
            if weight.shape != [w[0], w[1]] || bias.shape != [w[1]] {
                return Err(Error::shape(
                    format!("{prefix} layer {i}"),
                    format!("[{}, {}]", w[0], w[1]),
                    format!("{:?}", weight.shape),
                ));
            }
            layers.push(Dense {
                weights: Array2::from_shape_vec((w[0], w[1]), weight.data.clone())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
                bias: Array1::from_vec(bias.data.clone()),
            });
        }
        Ok(Self { layers })
    }
}
