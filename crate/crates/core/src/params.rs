//! Named parameter storage, initialization, optimizers, and checkpoints.
//!
//! # Checkpoint layout
//!
//! All integers little-endian. Entries appear in ascending path order.
//!
//! ```text
//! magic       8 bytes   b"RAFCKPT1"
//! count       u32       number of entries
//! entry*:
//!   path_len  u32
//!   path      path_len bytes, UTF-8
//!   rank      u32
//!   extents   rank x u64
//!   values    prod(extents) x f64 (IEEE-754 bits, little-endian)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RAFCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.params.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params.get(path).ok_or_else(|| Error::Parameter {
            path: path.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params.get_mut(path).ok_or_else(|| Error::Parameter {
            path: path.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Xavier-uniform `fan_in x fan_out` weight.
    pub fn init_xavier(&mut self, path: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        self.insert(path, Tensor::new(&[fan_in, fan_out], data).unwrap());
    }

    pub fn init_full(&mut self, path: &str, shape: &[usize], value: f64) {
        self.insert(path, Tensor::full(shape, value));
    }

    pub fn init_normal(&mut self, path: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).unwrap();
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(path, Tensor::new(shape, data).unwrap());
    }

    /// Checks that `other` has exactly the same paths and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (path, t) in &self.params {
            let o = other.get(path)?;
            if o.shape() != t.shape() {
                return Err(Error::Parameter {
                    path: path.clone(),
                    reason: format!("shape {:?}, expected {:?}", o.shape(), t.shape()),
                });
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Parameter {
                path: extra.clone(),
                reason: "unexpected".into(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, t) in &self.params {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let path = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(path, Tensor::new(&shape, data)?);
        }
        if !r.is_done() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::error::read_file(path)?)
    }
}

/// Cursor over a little-endian byte buffer.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.what, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// A tape plus the parameters bound onto it.
///
/// Parameters are recorded lazily the first time a path is requested, so a
/// forward pass only pays for the parameters it touches.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    /// `trainable = false` records parameters as constants (inference).
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let t = self.store.get(path)?.clone();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backpropagates from `loss` and collects parameter gradients by path.
    pub fn backward(mut self, loss: Var) -> Result<Grads> {
        self.tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (path, v) in self.bound {
            if let Some(g) = self.tape.grad(v) {
                grads.insert(path, g.to_vec());
            }
        }
        Ok(Grads(grads))
    }
}

/// Parameter gradients keyed by path. Missing paths have zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads(pub BTreeMap<String, Vec<f64>>);

impl Grads {
    pub fn get(&self, path: &str) -> Option<&[f64]> {
        self.0.get(path).map(Vec::as_slice)
    }

    /// Adds `other` into `self`, path by path.
    pub fn accumulate(&mut self, other: &Grads) {
        for (path, g) in &other.0 {
            match self.0.get_mut(path) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.0.insert(path.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (path, g) in &grads.0 {
            let p = store.get_mut(path)?;
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
pub fn sgd_step(store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
    for (path, g) in &grads.0 {
        let p = store.get_mut(path)?;
        p.data_mut().iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.init_xavier("a.w", 3, 4, &mut rng);
        s.init_full("a.b", &[4], 0.0);
        s.init_normal("emb", &[2, 2, 2], 1.0, &mut rng);
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample_store();
        let bytes = s.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_layout_header() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(&[1], vec![1.5]).unwrap());
        let b = s.to_bytes();
        assert_eq!(&b[..8], b"RAFCKPT1");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(b[16], b'x');
        assert_eq!(f64::from_le_bytes(b[b.len() - 8..].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 8 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let bytes = sample_store().to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ParamStore::from_bytes(b"NOTACKPT").is_err());
    }

    #[test]
    fn xavier_bounds() {
        let s = sample_store();
        let a = (6.0f64 / 7.0).sqrt();
        assert!(s.get("a.w").unwrap().data().iter().all(|v| v.abs() < a));
    }

    #[test]
    fn compatibility_names_offending_path() {
        let s = sample_store();
        let mut other = s.clone();
        other.insert("a.b", Tensor::zeros(&[5]));
        let err = s.check_compatible(&other).unwrap_err().to_string();
        assert!(err.contains("a.b"), "{err}");
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = Grads::default();
        g.0.insert("w".into(), vec![0.5, -2.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut s, &g).unwrap();
        // first bias-corrected Adam step has magnitude ~lr
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
