//! Named parameters and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `BASR`, version `u32`, count
//! `u32`, then per parameter: name length `u16`, UTF-8 name, rank `u8`,
//! `rank` dims as `u32`, and the values as `f32` in row-major order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BASR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub gradient: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "parameter {name} registered twice");
        let id = ParamId(self.params.len());
        let gradient = Tensor::zeros(tensor.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, gradient });
        id
    }

    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        let mut t = Tensor::zeros(shape);
        t.fill(v);
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.tensor.shape().len() as u8);
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Reads every tensor of a checkpoint, in file order.
    pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |msg: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = cur.u32().ok_or_else(|| bad("truncated header"))?;
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let trunc = || bad("truncated parameter record");
            let len = cur.u16().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(cur.take(len).ok_or_else(trunc)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            let rank = cur.take(1).ok_or_else(trunc)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32().ok_or_else(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4).ok_or_else(trunc)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(out)
    }

    /// Overwrites parameters of this store with the checkpoint's values.
    /// Every parameter in the store must be present with a matching shape;
    /// with `allow_extra`, checkpoint entries unknown to the store are skipped.
    pub fn load(&mut self, path: &Path, allow_extra: bool) -> Result<()> {
        self.load_matching(path, allow_extra, |_| true)
    }

    /// Like [`ParamStore::load`], restricted to store parameters accepted by
    /// `filter`; the rest keep their current values.
    pub fn load_matching(&mut self, path: &Path, allow_extra: bool, filter: impl Fn(&str) -> bool) -> Result<()> {
        let entries = Self::read_checkpoint(path)?;
        let mut found = vec![false; self.params.len()];
        for (name, tensor) in entries {
            match self.by_name.get(&name) {
                Some(&id) if filter(&name) => {
                    let p = &mut self.params[id.0];
                    if p.tensor.shape() != tensor.shape() {
                        return Err(Error::Checkpoint {
                            path: path.to_path_buf(),
                            msg: format!(
                                "{name}: shape {:?} does not match {:?}",
                                tensor.shape(),
                                p.tensor.shape()
                            ),
                        });
                    }
                    p.tensor = tensor;
                    found[id.0] = true;
                }
                Some(_) => {}
                None if allow_extra => {}
                None => {
                    return Err(Error::Checkpoint {
                        path: path.to_path_buf(),
                        msg: format!("unexpected parameter {name}"),
                    })
                }
            }
        }
        if let Some((i, _)) = found
            .iter()
            .enumerate()
            .find(|(i, f)| !**f && filter(&self.params[*i].name))
        {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("missing parameter {}", self.params[i].name),
            });
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_in_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.normal("a.w", &[3, 4], 0.02, &mut rng);
        store.zeros("a.b", &[4]);
        store.filled("ln.gamma", &[2], 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.basr");
        store.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"BASR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);

        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.get_mut(id).tensor.fill(9.0);
        }
        other.load(&path, false).unwrap();
        for (id, p) in store.iter() {
            for (a, b) in p.tensor.data().iter().zip(other.value(id).data()) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    #[test]
    fn load_rejects_shape_mismatch_and_missing() {
        let mut store = ParamStore::new();
        store.zeros("w", &[2, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.basr");
        store.save(&path).unwrap();

        let mut wrong = ParamStore::new();
        wrong.zeros("w", &[4]);
        assert!(wrong.load(&path, false).is_err());

        let mut more = ParamStore::new();
        more.zeros("w", &[2, 2]);
        more.zeros("v", &[1]);
        assert!(more.load(&path, false).is_err());
        more.load_matching(&path, false, |n| n == "w").unwrap();
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let mut store = ParamStore::new();
        store.zeros("w", &[8]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.basr");
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(ParamStore::read_checkpoint(&path).is_err());
    }
}
