//! Named parameter tensors and the `PFNN1` checkpoint format.
//!
//! Layout: the 5-byte magic `PFNN1`, then one record per tensor until end of
//! file: `u16` name length, UTF-8 name, `u8` rank, `u32` extents, and the
//! elements as little-endian `f64`. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PFNN1";

/// Ordered collection of named tensors. Insertion order is preserved and
/// defines the on-disk order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Mutable element slices for `names`, in the order given.
    pub fn slices_mut(&mut self, names: &[&str]) -> Result<Vec<&mut [f64]>> {
        let mut positions = Vec::with_capacity(names.len());
        for name in names {
            let pos = self
                .entries
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::invalid(format!("missing parameter tensor `{name}`")))?;
            if positions.contains(&pos) {
                return Err(Error::invalid(format!("parameter `{name}` requested twice")));
            }
            positions.push(pos);
        }
        let mut slots: Vec<Option<&mut Tensor>> = self.entries.iter_mut().map(|(_, t)| Some(t)).collect();
        Ok(positions
            .into_iter()
            .map(|p| slots[p].take().expect("positions are distinct").data_mut())
            .collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank of `{name}` exceeds 255")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent of `{name}` exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(5)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let len = u16::from_le_bytes(cur.array()?) as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?
                .to_owned();
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.array()?) as usize);
            }
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| cur.array().map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            let t =
                Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", format!("tensor `{name}`: {e}")))?;
            if store.get(&name).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate tensor `{name}`")));
            }
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}
