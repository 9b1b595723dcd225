use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DWD1";
const VERSION: u32 = 1;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors plus Adam state.
///
/// Names are kept in a `BTreeMap` so every iteration (hashing, serialization,
/// optimizer updates) happens in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
        self.moments.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copies every parameter under `prefix` from `other`, replacing existing values.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for (k, t) in other.params.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            let mut t = t.clone();
            t.grad = None;
            self.params.insert(k.clone(), t);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients recorded on `graph` into the matching parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        for (name, g) in graph.param_grads() {
            let t = self
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Global L2 norm of all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in self.params.values_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update on every parameter not matched by `frozen`.
    ///
    /// Frozen parameters are never touched. Gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig, frozen: &FreezeMask) -> Result<()> {
        if let Some(name) = self
            .params
            .iter()
            .find(|(k, t)| !frozen.is_frozen(k) && t.grad.is_none())
            .map(|(k, _)| k.clone())
        {
            return Err(Error::MissingGradient(name));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in self.params.iter_mut() {
            if frozen.is_frozen(name) {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for (((w, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Clears Adam moments and the step counter (new training phase).
    pub fn reset_optimizer(&mut self) {
        self.moments.clear();
        self.step = 0;
    }

    /// SHA-256 over names and raw values of every parameter under any of `prefixes`.
    pub fn hash_prefixes<S: AsRef<str>>(&self, prefixes: &[S]) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.params {
            if prefixes.iter().any(|p| k.starts_with(p.as_ref())) {
                h.update(k.as_bytes());
                for x in t.data() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn hash_all(&self) -> String {
        self.hash_prefixes(&[""])
    }

    // ------------------------------------------------------- serialization

    /// Writes the flat binary checkpoint: magic, version, count, then one
    /// record per parameter (name, rank, dims, little-endian f64 values).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Set of parameter-name prefixes excluded from optimization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    prefixes: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new<S: AsRef<str>>(prefixes: &[S]) -> Self {
        FreezeMask {
            prefixes: prefixes.iter().map(|p| p.as_ref().to_string()).collect(),
        }
    }

    pub fn all() -> Self {
        Self::new(&[""])
    }

    pub fn with(mut self, prefix: &str) -> Self {
        self.prefixes.insert(prefix.to_string());
        self
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn prefixes(&self) -> Vec<String> {
        self.prefixes.iter().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        s.get_mut("w").unwrap().grad = Some(vec![1.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        s.adam_step(&cfg, &FreezeMask::none()).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-6, "{w}");
        assert_eq!(s.step(), 1);
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = scalar_store(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..100 {
            let w = s.get("w").unwrap().data()[0];
            s.get_mut("w").unwrap().grad = Some(vec![2.0 * (w - 3.0)]);
            s.adam_step(&cfg, &FreezeMask::none()).unwrap();
        }
        let w = s.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.05, "{w}");
    }

    #[test]
    fn frozen_store_is_bitwise_unchanged() {
        let mut s = scalar_store(1.25);
        s.insert("v", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap()).unwrap();
        let before = s.to_bytes();
        for _ in 0..5 {
            s.get_mut("w").unwrap().grad = Some(vec![1.0]);
            s.adam_step(&AdamConfig::default(), &FreezeMask::all()).unwrap();
        }
        assert_eq!(before, s.to_bytes());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(0.0);
        let err = s.adam_step(&AdamConfig::default(), &FreezeMask::none()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "w"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(0.0);
        assert!(s.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("a.b", Tensor::new(vec![2, 3], vec![0.1, -2.0, 3e-300, f64::MIN_POSITIVE, 5.5, -0.0]).unwrap())
            .unwrap();
        s.insert("z", Tensor::new(vec![], vec![42.0]).unwrap()).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"DWD1");
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("a.b").unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(ParamStore::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut s = scalar_store(0.0);
        s.get_mut("w").unwrap().grad = Some(vec![30.0]);
        let before = s.clip_grad_norm(5.0);
        assert_eq!(before, 30.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }
}
