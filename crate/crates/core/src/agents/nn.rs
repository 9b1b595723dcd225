//! Layer building blocks over [`Graph`]: parameter initialisation and the
//! forward maps used by every module of the Q-bot.

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::stochastic::RngStream;

/// Training or evaluation behaviour of stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter initialiser writing into a store.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: RngStream,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (2.0 * self.rng.uniform() - 1.0) * bound).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.store.insert(name, Tensor::new(shape.to_vec(), vec![value; n])?)
    }

    fn glorot(i: usize, o: usize) -> f64 {
        (6.0 / (i + o) as f64).sqrt()
    }

    pub fn matrix(&mut self, name: &str, i: usize, o: usize) -> Result<()> {
        self.uniform(name, &[i, o], Self::glorot(i, o))
    }

    pub fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<()> {
        self.matrix(&format!("{name}.w"), i, o)?;
        self.constant(&format!("{name}.b"), &[o], 0.0)
    }

    /// Weight-normalised linear map; `g` starts at the column norms of `v`
    /// so the effective weight equals the initial direction matrix.
    pub fn wn_linear(&mut self, name: &str, i: usize, o: usize) -> Result<()> {
        let bound = Self::glorot(i, o);
        let v: Vec<f64> = (0..i * o).map(|_| (2.0 * self.rng.uniform() - 1.0) * bound).collect();
        let mut norms = vec![0.0; o];
        for r in 0..i {
            for c in 0..o {
                norms[c] += v[r * o + c] * v[r * o + c];
            }
        }
        let norms = norms.into_iter().map(f64::sqrt).collect();
        self.store.insert(&format!("{name}.v"), Tensor::new(vec![i, o], v)?)?;
        self.store.insert(&format!("{name}.g"), Tensor::new(vec![o], norms)?)?;
        self.constant(&format!("{name}.b"), &[o], 0.0)
    }

    pub fn mlp2(&mut self, name: &str, i: usize, hid: usize, o: usize) -> Result<()> {
        self.wn_linear(&format!("{name}.0"), i, hid)?;
        self.wn_linear(&format!("{name}.1"), hid, o)
    }

    /// LSTM cell with gate order (input, forget, candidate, output) and
    /// forget-gate bias 1.
    pub fn lstm(&mut self, name: &str, i: usize, h: usize) -> Result<()> {
        self.matrix(&format!("{name}.wx"), i, 4 * h)?;
        self.matrix(&format!("{name}.wh"), h, 4 * h)?;
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        self.store.insert(&format!("{name}.b"), Tensor::new(vec![4 * h], b)?)
    }
}

/// Forward-pass context: parameters, mode, and the noise source for dropout
/// and relaxed sampling. `scope` prefixes every parameter name, which lets a
/// second frozen copy of the model live in the same store.
pub struct Fwd<'a> {
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub rng: RngStream,
    pub dropout: f64,
    pub tau: f64,
    pub scope: String,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, rng: RngStream) -> Self {
        Fwd {
            store,
            mode,
            rng,
            dropout: 0.1,
            tau: 1.0,
            scope: String::new(),
        }
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn name(&self, n: &str) -> String {
        format!("{}{}", self.scope, n)
    }

    pub fn p(&self, g: &mut Graph, n: &str) -> Result<Var> {
        g.param(self.store, &self.name(n))
    }

    pub fn has(&self, n: &str) -> bool {
        self.store.contains(&self.name(n))
    }

    pub fn linear(&self, g: &mut Graph, n: &str, x: Var) -> Result<Var> {
        let w = self.p(g, &format!("{n}.w"))?;
        let b = self.p(g, &format!("{n}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn wn_linear(&self, g: &mut Graph, n: &str, x: Var) -> Result<Var> {
        let v = self.p(g, &format!("{n}.v"))?;
        let gn = self.p(g, &format!("{n}.g"))?;
        let b = self.p(g, &format!("{n}.b"))?;
        // the normalised matrix is shared by every call in this graph
        let key = format!("wn:{}{n}", self.scope);
        let w = g.memo(&key, |g| g.weight_norm(v, gn))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Two weight-normalised layers, ReLU after each.
    pub fn mlp2(&self, g: &mut Graph, n: &str, x: Var) -> Result<Var> {
        let a = self.wn_linear(g, &format!("{n}.0"), x)?;
        let a = g.relu(a)?;
        let b = self.wn_linear(g, &format!("{n}.1"), a)?;
        g.relu(b)
    }

    /// Two weight-normalised layers with ReLU and dropout on the hidden
    /// activation and a linear output.
    pub fn mlp2_linear_out(&mut self, g: &mut Graph, n: &str, x: Var) -> Result<Var> {
        let a = self.wn_linear(g, &format!("{n}.0"), x)?;
        let a = g.relu(a)?;
        let a = self.drop(g, a)?;
        self.wn_linear(g, &format!("{n}.1"), a)
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.train() || self.dropout <= 0.0 {
            return Ok(x);
        }
        let rate = self.dropout;
        let keep: Vec<bool> = (0..g.value(x).len()).map(|_| !self.rng.bernoulli(rate)).collect();
        g.dropout(x, &keep, rate)
    }

    /// One LSTM step; returns the new `(h, c)`.
    pub fn lstm(&self, g: &mut Graph, n: &str, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hid = g.shape(h)[1];
        let wx = self.p(g, &format!("{n}.wx"))?;
        let wh = self.p(g, &format!("{n}.wh"))?;
        let b = self.p(g, &format!("{n}.b"))?;
        let zx = g.matmul(x, wx)?;
        let zh = g.matmul(h, wh)?;
        let z = g.add(zx, zh)?;
        let z = g.add_row(z, b)?;
        let i = g.slice(z, 0, hid)?;
        let f = g.slice(z, hid, hid)?;
        let cand = g.slice(z, 2 * hid, hid)?;
        let o = g.slice(z, 3 * hid, hid)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}

/// Row indices repeating each of `rows` entries `times` times, used with
/// `gather_rows` to broadcast per-game rows over pool boxes.
pub(crate) fn repeat_idx(rows: usize, times: usize) -> Vec<usize> {
    (0..rows).flat_map(|r| std::iter::repeat_n(r, times)).collect()
}

/// Dense one-hot rows.
pub(crate) fn one_hot(idx: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; idx.len() * width];
    for (r, &i) in idx.iter().enumerate() {
        out[r * width + i] = 1.0;
    }
    out
}
