//! Named parameter tensors and the BTFW checkpoint container.
//!
//! BTFW layout (little-endian): magic `BTFW`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u16`, UTF-8 name, rank `u8`, dims `u32[rank]`,
//! `f32` payload.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::graph::{Graph, Var};
use crate::rng::{standard_normal, Rng};
use crate::tensor::Tensor;

pub const BTFW_MAGIC: [u8; 4] = *b"BTFW";
pub const BTFW_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.entries.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(FormatError::MalformedHeader(format!("missing tensor `{name}`"))))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let i = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(i).1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors_mut().for_each(Tensor::round_to_f32);
    }

    /// Registers every tensor as a graph leaf, tracked or not.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound { names: self.entries.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable))).collect() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&BTFW_MAGIC);
        out.extend_from_slice(&BTFW_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != BTFW_MAGIC {
            return Err(FormatError::BadMagic { expected: BTFW_MAGIC, found: magic }.into());
        }
        let version = r.u32()?;
        if version != BTFW_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| FormatError::MalformedHeader("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .filter(|&n| n.checked_mul(4).is_some())
                .ok_or_else(|| FormatError::DimensionOverflow(dims.clone()))?;
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            store.insert(name, Tensor::new(dims.iter().map(|&d| d as usize).collect(), data));
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Graph handles for a bound [`ParamStore`], looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<(String, Var)>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.names
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// He-style normal initialization for a conv or linear weight with the given fan-in.
pub fn he_normal(rng: &mut Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let n = shape.iter().product();
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Tensor::new(shape, standard_normal(rng, n).into_iter().map(|v| v * std).collect())
}

/// Temporal-conv weights `[co, ci, kt]` initialized to the identity on the center
/// tap plus small noise, so fresh blocks start as near pass-throughs.
pub fn temporal_identity(rng: &mut Rng, co: usize, ci: usize, kt: usize, noise: f64) -> Tensor {
    let mut data: Vec<f64> = standard_normal(rng, co * ci * kt).into_iter().map(|v| v * noise).collect();
    for o in 0..co.min(ci) {
        data[(o * ci + o) * kt + kt / 2] += 1.0;
    }
    Tensor::new(vec![co, ci, kt], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a/w", he_normal(&mut rng_from_seed(1), vec![2, 3, 3, 3], 27, 1.0));
        s.insert("a/b", Tensor::new(vec![2], vec![0.5, -0.25]));
        s.round_to_f32();
        s
    }

    #[test]
    fn btfw_round_trip_is_exact() {
        let s = sample();
        assert_eq!(ParamStore::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn btfw_rejects_bad_input() {
        let mut b = sample().to_bytes();
        assert!(matches!(
            ParamStore::from_bytes(&b[..b.len() - 3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        b.push(0);
        assert!(matches!(ParamStore::from_bytes(&b), Err(Error::Format(FormatError::TrailingBytes(1)))));
        b[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&b), Err(Error::Format(FormatError::BadMagic { .. }))));
    }
}
