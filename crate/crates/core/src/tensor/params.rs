use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph};
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TP3P";
pub const CHECKPOINT_VERSION: u32 = 1;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    pub grad: Tensor,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }
}

/// Named trainable tensors of one subnetwork.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    frozen: bool,
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            frozen: self.frozen,
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            frozen: false,
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.params[id.0].value_mut()
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `weight ·` the gradient of every parameter leaf of this store that
    /// appears on `graph`. Frozen stores are never touched.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients, weight: f64) {
        if self.frozen {
            return;
        }
        for &(uid, idx, var) in graph.param_leaves() {
            if uid != self.uid {
                continue;
            }
            if let Some(g) = grads.get(var) {
                for (dst, src) in self.params[idx].grad.data_mut().iter_mut().zip(g) {
                    *dst += weight * src;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= c;
            }
        }
    }

    /// Checkpoint bytes: magic, version, then parameters sorted by name, each
    /// as name length (u32), name bytes, rank (u32), extents (u32 each) and
    /// little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, &i) in &self.index {
            let p = &self.params[i];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes into (name, tensor) pairs in file order.
    pub fn parse_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let mut out = Vec::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format {
                offset: start,
                detail: "parameter name is not utf-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let t = Tensor::new(&shape, data).map_err(|_| Error::Format {
                offset: start,
                detail: format!("bad shape {shape:?} for {name}"),
            })?;
            out.push((name, t));
        }
        Ok(out)
    }

    /// Overwrites values by name. Every stored parameter must be present with
    /// the same shape.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = ParamStore::parse_bytes(bytes)?;
        if entries.len() != self.params.len() {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "checkpoint has {} parameters, model expects {}",
                    entries.len(),
                    self.params.len()
                ),
            });
        }
        for (name, t) in entries {
            let Some(&i) = self.index.get(&name) else {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("unknown parameter {name}"),
                });
            };
            if self.params[i].value.shape() != t.shape() {
                return Err(Error::dim("load_bytes", self.params[i].value.shape(), t.shape()));
            }
            self.params[i].value = Arc::new(t);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("b.w", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap())
            .unwrap();
        s.add("a.bias", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 7.0]))
            .unwrap();
        s
    }

    #[test]
    fn checkpoint_layout_sorted_by_name() {
        let b = store().to_bytes();
        assert_eq!(&b[..4], b"TP3P");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 6);
        assert_eq!(&b[12..18], b"a.bias");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = store();
        let bytes = s.to_bytes();
        let mut t = store();
        for p in t.params_mut() {
            p.value_mut().data_mut().fill(9.0);
        }
        t.load_bytes(&bytes).unwrap();
        assert_eq!(t.to_bytes(), bytes);
        assert_eq!(t.hash(), s.hash());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut bytes = store().to_bytes();
        let mut s = store();
        assert!(s.load_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(s.load_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.add("b.w", Tensor::scalar(0.0)).is_err());
    }
}
