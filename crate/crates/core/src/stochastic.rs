//! Seeded randomness, Concrete (Gumbel-Softmax) relaxation and the categorical
//! KL against a uniform prior.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied inside logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

/// Reproducible random stream identified by `(seed, name)`.
///
/// Every draw goes through [`RngStream::next_u64`], so `counter` is the exact
/// number of 64-bit words consumed and a stream can be re-created at any
/// position with [`RngStream::at`].
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    name: String,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(name.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        RngStream {
            seed,
            name: name.to_string(),
            counter: 0,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Stream positioned after `counter` draws.
    pub fn at(seed: u64, name: &str, counter: u64) -> Self {
        let mut s = Self::new(seed, name);
        s.rng.set_word_pos(u128::from(counter) * 2);
        s.counter = counter;
        s
    }

    /// Independent child stream `<name>/<child>` with the same seed.
    pub fn split(&self, child: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.name, child))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let b = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&b[..chunk.len()]);
        }
    }
}

/// One draw from a K-way Concrete distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcreteSample {
    pub soft: Vec<f64>,
    /// Zero-based category with the largest soft weight (lowest index on ties).
    pub hard_index: usize,
    pub temperature: f64,
}

/// Lowest-index argmax.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// softmax((logits + Gumbel noise) / temperature).
pub fn gumbel_softmax(logits: &[f64], temperature: f64, rng: &mut RngStream) -> Result<ConcreteSample> {
    if logits.len() < 2 {
        return Err(Error::Invalid("gumbel_softmax needs K >= 2".into()));
    }
    check_temperature(temperature)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax logits".into()));
    }
    let noise: Vec<f64> = (0..logits.len()).map(|_| rng.gumbel()).collect();
    Ok(concrete_from_noise(logits, &noise, temperature))
}

/// Deterministic part of the relaxation given pre-drawn Gumbel noise.
pub fn concrete_from_noise(logits: &[f64], noise: &[f64], temperature: f64) -> ConcreteSample {
    let z: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    let soft: Vec<f64> = e.iter().map(|x| x / s).collect();
    let hard_index = argmax(&soft);
    ConcreteSample {
        soft,
        hard_index,
        temperature,
    }
}

/// Relaxed samples for every row of `logits` (`[rows, K]`), differentiable
/// through the soft weights. Noise comes from `rng` in row-major order.
pub fn gumbel_softmax_var(g: &mut Graph, logits: Var, temperature: f64, rng: &mut RngStream) -> Result<Var> {
    check_temperature(temperature)?;
    let shape = g.shape(logits).to_vec();
    let noise: Vec<f64> = (0..g.value(logits).len()).map(|_| rng.gumbel()).collect();
    let noise = g.constant(&shape, noise)?;
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / temperature)?;
    g.softmax(scaled)
}

fn check_normalized(probs: &[f64], what: &str) -> Result<()> {
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-6 || probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Invalid(format!("{what} not normalized (sum {s})")));
    }
    Ok(())
}

/// KL(q || Uniform(K)) = sum_k q_k (log q_k + log K), from log-probabilities.
pub fn kl_categorical_uniform(log_probs: &[f64]) -> Result<f64> {
    let k = log_probs.len();
    if k == 0 {
        return Err(Error::Invalid("empty distribution".into()));
    }
    let floor = LOG_FLOOR.ln();
    let q: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    check_normalized(&q, "kl_categorical_uniform input")?;
    let log_k = (k as f64).ln();
    Ok(q
        .iter()
        .zip(log_probs)
        .map(|(q, l)| q * (l.max(floor) + log_k))
        .sum::<f64>()
        .max(0.0))
}

/// Row-wise KL against the uniform prior for log-probabilities `[rows, K]`,
/// returned as `[rows]`.
pub fn kl_uniform_var(g: &mut Graph, log_probs: Var) -> Result<Var> {
    let k = *g.shape(log_probs).last().unwrap_or(&1);
    let q = g.exp(log_probs)?;
    let shifted = g.add_scalar(log_probs, (k as f64).ln())?;
    let terms = g.mul(q, shifted)?;
    g.sum_rows(terms)
}

/// Zero-based index drawn with the given probabilities.
pub fn sample_categorical(probs: &[f64], rng: &mut RngStream) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Invalid("empty distribution".into()));
    }
    check_normalized(probs, "sample_categorical probs")?;
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // rounding left u beyond the cumulative sum: take the last non-zero bin
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
}

/// Temperature schedule: constant, or linear from `start` to `end` over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal: bool,
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule {
            start: 1.0,
            end: 0.5,
            anneal: false,
        }
    }
}

impl TauSchedule {
    /// Temperature at training progress `frac` in [0, 1].
    pub fn at(&self, frac: f64) -> f64 {
        if self.anneal {
            self.start + (self.end - self.start) * frac.clamp(0.0, 1.0)
        } else {
            self.start
        }
    }
}

/// Standard-normal noise tensor of the given shape.
pub fn normal_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches")
}
