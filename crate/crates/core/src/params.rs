//! Named parameter storage, initialization, the AdamW optimizer and the
//! binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//! `"ATIN"`, version, count, then per tensor: name length, name bytes,
//! rank, dims, and the values as little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"ATIN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; panics on duplicate names (a programming error).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.values) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if pos + n > bytes.len() {
                return Err(format!("truncated checkpoint at byte {pos}"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic, expected ATIN".into());
        }
        let word = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let version = word(take(4)?);
        if version != CHECKPOINT_VERSION as usize {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let count = word(take(4)?);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = word(take(4)?);
            let name = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| "parameter name is not UTF-8".to_string())?;
            let rank = word(take(4)?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(word(take(4)?));
            }
            let n: usize = shape.iter().product();
            let raw = take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if store.id(&name).is_some() {
                return Err(format!("duplicate parameter {name}"));
            }
            store.add(name, Tensor { shape, data });
        }
        if pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - pos));
        }
        Ok(store)
    }

    /// Copies values from `other` for every parameter name both stores share
    /// with equal shapes; returns the names that were missing or mismatched.
    pub fn load_from(&mut self, other: &ParamStore) -> Vec<String> {
        let mut problems = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            match other.by_name(name) {
                Some(t) if t.shape == self.values[i].shape => self.values[i] = t.clone(),
                _ => problems.push(name.clone()),
            }
        }
        problems
    }
}

/// Normal(0, σ) truncated to ±2σ by resampling.
pub fn truncated_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Adam with decoupled weight decay. Parameters whose name ends in a
/// listed suffix (biases, norm offsets) are excluded from decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(&store.get(id).shape))
            .collect();
        let decay = store
            .ids()
            .map(|id| {
                let n = store.name(id);
                !(n.ends_with(".b")
                    || n.ends_with("_b")
                    || n.ends_with(".beta")
                    || n.ends_with(".gamma"))
            })
            .collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is `None` for parameters that did not
    /// take part in the loss.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            if self.decay[i] && self.weight_decay > 0.0 {
                let f = 1.0 - self.lr * self.weight_decay;
                p.data.iter_mut().for_each(|w| *w *= f);
            }
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..g.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data[j] * g.data[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("a.w", truncated_normal(&mut rng, &[3, 4], 0.02));
        s.add("a.b", Tensor::zeros(&[4]));
        s.add("scalar", Tensor::scalar(0.5));
        let bytes = s.encode();
        assert_eq!(&bytes[..4], b"ATIN");
        let back = ParamStore::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.by_name("a.w").unwrap().shape, vec![3, 4]);
        assert!(ParamStore::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = truncated_normal(&mut rng, &[1000], 0.02);
        assert!(t.data.iter().all(|v| v.abs() <= 0.04));
        let mean = t.data.iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn adamw_zero_lr_is_identity_and_decay_skips_biases() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[2], 1.0));
        s.add("w.b", Tensor::full(&[2], 1.0));
        let before = s.clone();
        let mut opt = AdamW::new(&s, 0.0, 0.1);
        opt.step(
            &mut s,
            &[Some(Tensor::full(&[2], 1.0)), Some(Tensor::full(&[2], 1.0))],
        );
        assert_eq!(s, before);
        let mut opt = AdamW::new(&s, 0.1, 0.5);
        opt.step(&mut s, &[None, None]);
        assert!((s.by_name("w").unwrap().data[0] - 0.95).abs() < 1e-12);
        assert_eq!(s.by_name("w.b").unwrap().data[0], 1.0);
    }
}
