//! Named parameter tensors and the `VGP1` checkpoint format.
//!
//! A checkpoint is the magic `VGP1` followed by one record per tensor, in
//! name order: u32 name length, UTF-8 name, u32 rank, u32 extents, then the
//! f64 little-endian payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VGP1";

/// Names of non-trainable entries: running statistics and metadata scalars.
pub fn is_buffer_name(name: &str) -> bool {
    name.starts_with("meta.") || name.contains(".running_")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        if !is_buffer_name(&name) {
            self.trainable.insert(name.clone());
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable.iter().map(|n| self.entries[n].numel()).sum()
    }

    /// Puts every tensor on the tape: trainable ones as parameters, buffers as constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(name, t)| {
                let id = if self.trainable.contains(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), id)
            })
            .collect();
        BoundParams { ids }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let u32_of = |v: usize| u32::try_from(v).map_err(|_| Error::DimensionOverflow(vec![v as u64]));
        for (name, t) in &self.entries {
            out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(t.shape().len())?.to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&u32_of(e)?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated { expected: 4, found: bytes.len() });
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found });
        }
        let mut at = 4;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Truncated {
                expected: at.saturating_add(n),
                found: bytes.len(),
            })?;
            let s = &bytes[*at..end];
            *at = end;
            Ok(s)
        };
        let read_u32 = |at: &mut usize| -> Result<usize> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize) };
        let mut set = ParamSet::new();
        while at < bytes.len() {
            let len = read_u32(&mut at)?;
            let name = String::from_utf8(take(&mut at, len)?.to_vec())
                .map_err(|_| Error::BadHeader("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut at)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut at)?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::DimensionOverflow(shape.iter().map(|&e| e as u64).collect()))?;
            let data = take(&mut at, n)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(set)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Tape node ids of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn from_pairs(pairs: Vec<(String, NodeId)>) -> Self {
        Self { ids: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of every trainable entry after a backward pass.
    pub fn grads(&self, tape: &Tape, set: &ParamSet) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .filter(|(name, _)| set.is_trainable(name))
            .map(|(name, id)| (name.clone(), tape.grad(*id)))
            .collect()
    }
}
