//! Named parameter storage, autodiff binding and the binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Matrix, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated or malformed checkpoint")]
    Malformed,
    #[error("parameter layout mismatch at '{0}'")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Parameters in declaration order. Checkpoints preserve this order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Uniform(-1/sqrt(rows), 1/sqrt(rows)) matrix; `rows` is the fan-in of `x · W`.
    pub fn uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        self.uniform_fan(name, rows, cols, rows, rng)
    }

    pub fn uniform_fan(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Matrix { rows, cols, data })
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Fresh leaf tensors for one autodiff graph; `trainable` selects which receive gradients.
    pub fn bind(&self, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, m)| {
                    if trainable(n) {
                        Tensor::variable(m)
                    } else {
                        Tensor::constant(m)
                    }
                })
                .collect(),
        }
    }

    pub fn bind_all(&self) -> Bound {
        self.bind(|_| true)
    }

    pub fn bind_frozen(&self) -> Bound {
        self.bind(|_| false)
    }

    /// Serializes with `meta` (free-form text, typically `key=value` lines).
    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, m) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Returns the stored parameters and the metadata text.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, String), CheckpointError> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed)?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| CheckpointError::Malformed)?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(
                rows.checked_mul(cols)
                    .and_then(|n| n.checked_mul(8))
                    .ok_or(CheckpointError::Malformed)?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if store.index.contains_key(&name) {
                return Err(CheckpointError::Malformed);
            }
            store.add(&name, Matrix { rows, cols, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed);
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(meta))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, String), CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Copies values from `other`, requiring identical names and shapes in the same order.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), CheckpointError> {
        if other.names != self.names {
            let at = self
                .names
                .iter()
                .zip(&other.names)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.clone())
                .unwrap_or_else(|| "<count>".into());
            return Err(CheckpointError::Layout(at));
        }
        for (i, (dst, src)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if dst.shape() != src.shape() {
                return Err(CheckpointError::Layout(self.names[i].clone()));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Malformed)?;
        let s = self
            .b
            .get(self.pos..end)
            .ok_or(CheckpointError::Malformed)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parameter leaves of one autodiff graph, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn t(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Per-parameter gradients in declaration order (zeros where unreached).
    pub fn grads(&self, g: &Gradients) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| g.wrt(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.uniform("a.w", 3, 2, &mut rng);
        s.zeros("a.b", 1, 2);
        s.uniform("b", 1, 1, &mut rng);
        s
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = store();
        assert_eq!(a, store());
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.get(ParamId(0)).data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let bytes = s.to_bytes("h=32\n");
        assert_eq!(&bytes[..4], b"MVCB");
        let (back, meta) = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta, "h=32\n");
        assert_eq!(back.to_bytes("h=32\n"), bytes);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let bytes = store().to_bytes("");
        assert!(matches!(
            ParamStore::from_bytes(b"NOPE"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            ParamStore::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Malformed)
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            ParamStore::from_bytes(&v),
            Err(CheckpointError::Version(9))
        ));
    }

    #[test]
    fn frozen_binding_has_no_gradients() {
        let s = store();
        let b = s.bind(|n| n.starts_with("a."));
        assert!(b.t(ParamId(0)).requires_grad());
        assert!(!b.t(ParamId(2)).requires_grad());
    }
}
