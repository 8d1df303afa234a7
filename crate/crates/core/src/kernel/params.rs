//! Named parameter storage and the flat binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"DPKP"
//! u32    format version
//! u32    entry count
//! per entry:
//!   u32  name length, name bytes (UTF-8)
//!   u32  rank, then rank x u64 dims
//!   f64  x prod(dims) values
//! ```

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

/// Owns every parameter and buffer of one model instance.
///
/// Buffers (e.g. batchnorm running statistics) are entries with
/// `trainable == false`; they are checkpointed but never receive gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = vec![0.0; value.len()];
        self.entries.push(Entry {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let e = &mut self.entries[id.0];
        (e.value.data_mut(), &e.grad)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Ids whose name starts with `prefix`, trainable only.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.is_trainable(id) && self.name(id).starts_with(prefix))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Order-sensitive hash of all values and buffers, bit-exact.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over names and raw bits.
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for e in &self.entries {
            e.name.bytes().for_each(&mut eat);
            for v in e.value.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("writing checkpoint", e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name).map_err(io)?;
            w.write_all(&(e.value.rank() as u32).to_le_bytes()).map_err(io)?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(e.value.len() * 8);
            for v in e.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a checkpoint as a flat list of named tensors.
    pub fn read_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = read_u32(r)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > 4096 {
                return Err(Error::format("checkpoint", "name too long"));
            }
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::format("checkpoint", format!("rank {rank} of {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| Error::format("checkpoint", format!("oversized {name}")))?;
            let mut raw = vec![0u8; n * 8];
            read_exact(r, &mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }

    /// Overwrites values in `self` from a checkpoint. Every entry must be
    /// present with a matching shape; extra entries are rejected.
    pub fn load_from<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let entries = Self::read_entries(r)?;
        if entries.len() != self.entries.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} entries, model has {}", entries.len(), self.entries.len()),
            ));
        }
        for (name, value) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown entry {name}")))?;
            let slot = &mut self.entries[id.0].value;
            if slot.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: slot.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            *slot = value;
        }
        Ok(())
    }

    /// Copies all values (not grads) from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(a.name, b.name);
            a.value = b.value.clone();
        }
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("checkpoint", "truncated")
        } else {
            Error::io("reading checkpoint", e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
