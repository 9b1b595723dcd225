use super::game::{BatchState, PoolBatch};
use super::nn::{one_hot, repeat_idx, Fwd};
use super::{ModelConfig, ZKind, PLACEHOLDER_ANSWER, QBAG_WIDTH};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::stochastic::{argmax, gumbel_softmax_var};
use crate::synthworld::{Question, FEATURE_DIM};

/// Bag-of-tokens rows `[G, QBAG_WIDTH]`: token frequencies of each question
/// (end token included), or the placeholder column for `None`.
pub fn question_bag(g: &mut Graph, questions: &[Option<&Question>]) -> Result<Var> {
    let mut data = vec![0.0; questions.len() * QBAG_WIDTH];
    for (row, q) in data.chunks_mut(QBAG_WIDTH).zip(questions) {
        match q {
            Some(q) => {
                let w = 1.0 / q.tokens.len().max(1) as f64;
                for &t in &q.tokens {
                    row[t] += w;
                }
            }
            None => row[QBAG_WIDTH - 1] = 1.0,
        }
    }
    g.constant(&[questions.len(), QBAG_WIDTH], data)
}

/// Result of one pass of a context coder.
pub struct ContextOut {
    /// Attended pool encoding `[G, d]`.
    pub v_hat: Var,
    /// Image attention `[G, P]`.
    pub alpha: Var,
    /// Box attention within each image `[G * P, B]`.
    pub beta: Var,
    /// `[v_hat, e_q, e_a]`, present for the planner's coder only.
    pub x_context: Option<Var>,
}

/// Hierarchical pool attention under the coder named by `pfx` with query
/// `[G, E]`. The image score averages the per-box scores of that image.
pub(crate) fn attend_pool(fwd: &Fwd, g: &mut Graph, pfx: &str, pools: &PoolBatch, query: Var) -> Result<ContextOut> {
    let (gs, p, b) = (pools.games, pools.p, pools.b);
    let feats = pools.var(g)?;
    let f1 = g.memo(&format!("{}{pfx}f1(I)#{}", fwd.scope, pools.id), |g| fwd.mlp2(g, &format!("{pfx}f1"), feats))?;
    let f3 = g.memo(&format!("{}{pfx}f3(I)#{}", fwd.scope, pools.id), |g| fwd.mlp2(g, &format!("{pfx}f3"), feats))?;
    let gq = fwd.mlp2(g, &format!("{pfx}g"), query)?;
    let gq = g.gather_rows(gq, &repeat_idx(gs, p * b))?;

    let a = g.mul(gq, f1)?;
    let a = fwd.wn_linear(g, &format!("{pfx}f2"), a)?;
    let a = g.reshape(a, &[gs * p, b])?;
    let a = g.sum_rows(a)?;
    let a = g.scale(a, 1.0 / b as f64)?;
    let a = g.reshape(a, &[gs, p])?;
    let alpha = g.softmax(a)?;

    let s = g.mul(gq, f3)?;
    let s = fwd.wn_linear(g, &format!("{pfx}f4"), s)?;
    let s = g.reshape(s, &[gs * p, b])?;
    let beta = g.softmax(s)?;

    let col = g.reshape(alpha, &[gs * p, 1])?;
    let col = g.gather_rows(col, &repeat_idx(gs * p, b))?;
    let col = g.reshape(col, &[gs * p, b])?;
    let w = g.mul(col, beta)?;
    let w = g.reshape(w, &[gs, 1, p * b])?;
    let boxes = g.reshape(feats, &[gs, p * b, FEATURE_DIM])?;
    let v = g.bmm(w, boxes)?;
    let v_hat = g.reshape(v, &[gs, FEATURE_DIM])?;
    Ok(ContextOut {
        v_hat,
        alpha,
        beta,
        x_context: None,
    })
}

/// Planner context coder: the query mixes `h_bar` with the embedded fact
/// `(question bag [G, QBAG_WIDTH], answer ids)`.
pub fn context_encode(
    fwd: &Fwd,
    g: &mut Graph,
    pools: &PoolBatch,
    h_bar: Var,
    q_bag: Var,
    answers: &[usize],
) -> Result<ContextOut> {
    let eq_t = fwd.p(g, "ctx.eq")?;
    let ea_t = fwd.p(g, "ctx.ea")?;
    let e_q = g.matmul(q_bag, eq_t)?;
    let e_a = g.gather_rows(ea_t, answers)?;
    let cat = g.concat(&[h_bar, e_q, e_a])?;
    let e_c = fwd.linear(g, "ctx.f5", cat)?;
    let mut out = attend_pool(fwd, g, "ctx.", pools, e_c)?;
    out.x_context = Some(g.concat(&[out.v_hat, e_q, e_a])?);
    Ok(out)
}

/// Advances the dialog cell. Returns `(h, h_bar, c)`.
pub fn dialog_rnn_step(fwd: &mut Fwd, g: &mut Graph, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var, Var)> {
    let (h, c) = fwd.lstm(g, "rnn.cell", x, h_prev, c_prev)?;
    let h = fwd.drop(g, h)?;
    let w1 = fwd.p(g, "rnn.w1")?;
    let w2 = fwd.p(g, "rnn.w2")?;
    let bbar = fwd.p(g, "rnn.bbar")?;
    let gx = g.matmul(x, w1)?;
    let gh = g.matmul(h_prev, w2)?;
    let gate = g.add(gx, gh)?;
    let gate = g.add_row(gate, bbar)?;
    let gate = g.sigmoid(gate)?;
    let tc = g.tanh(c)?;
    let h_bar = g.mul(gate, tc)?;
    let h_bar = fwd.drop(g, h_bar)?;
    Ok((h, h_bar, c))
}

/// Discrete intention of one game.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    /// Zero-based category per variable.
    pub indices: Vec<usize>,
    /// Relaxed (training) or one-hot (evaluation) sample, one row per variable.
    pub soft: Vec<Vec<f64>>,
    /// Log-probabilities, one row per variable.
    pub logits: Vec<Vec<f64>>,
}

/// Question-policy output for a batch.
pub struct PolicyOut {
    /// Code fed to the speaker, `[G, z_dim]`.
    pub z: Var,
    /// Planner state after the residual update.
    pub h: Var,
    /// Log-probabilities `[G * N, K]` for discrete codes.
    pub log_probs: Option<Var>,
    /// Per-game codes for discrete models (empty otherwise).
    pub codes: Vec<LatentCode>,
}

/// Maps `h` to the intention code and applies the residual `h + relu(W^l l)`.
pub fn question_policy(fwd: &mut Fwd, g: &mut Graph, cfg: &ModelConfig, h: Var) -> Result<PolicyOut> {
    let gs = g.shape(h)[0];
    match cfg.z_kind {
        ZKind::Identity => Ok(PolicyOut {
            z: h,
            h,
            log_probs: None,
            codes: Vec::new(),
        }),
        ZKind::Discrete => {
            let (n, k) = (cfg.n_latent, cfg.k_categories);
            let wz = fwd.p(g, "policy.wz")?;
            let raw = g.matmul(h, wz)?;
            let raw = g.reshape(raw, &[gs * n, k])?;
            let l = g.log_softmax(raw)?;
            let z = if fwd.train() {
                let tau = fwd.tau;
                gumbel_softmax_var(g, l, tau, &mut fwd.rng)?
            } else {
                let idx: Vec<usize> = g.value(l).chunks(k).map(argmax).collect();
                g.constant(&[gs * n, k], one_hot(&idx, k))?
            };
            let codes = (0..gs)
                .map(|i| {
                    let rows = |v: &[f64]| -> Vec<Vec<f64>> {
                        v[i * n * k..(i + 1) * n * k].chunks(k).map(<[f64]>::to_vec).collect()
                    };
                    let soft = rows(g.value(z));
                    LatentCode {
                        indices: soft.iter().map(|r| argmax(r)).collect(),
                        soft,
                        logits: rows(g.value(l)),
                    }
                })
                .collect();
            let lflat = g.reshape(l, &[gs, n * k])?;
            let h = residual(fwd, g, h, lflat)?;
            Ok(PolicyOut {
                z: g.reshape(z, &[gs, n * k])?,
                h,
                log_probs: Some(l),
                codes,
            })
        }
        ZKind::Gaussian => {
            let d = cfg.gauss_dim;
            let wz = fwd.p(g, "policy.wz")?;
            let out = g.matmul(h, wz)?;
            let mu = g.slice(out, 0, d)?;
            let z = if fwd.train() {
                let logvar = g.slice(out, d, d)?;
                gaussian_sample(fwd, g, mu, logvar)?
            } else {
                mu
            };
            let h = residual(fwd, g, h, out)?;
            Ok(PolicyOut {
                z,
                h,
                log_probs: None,
                codes: Vec::new(),
            })
        }
    }
}

fn residual(fwd: &Fwd, g: &mut Graph, h: Var, l: Var) -> Result<Var> {
    let wl = fwd.p(g, "policy.wl")?;
    let r = g.matmul(l, wl)?;
    let r = g.relu(r)?;
    g.add(h, r)
}

/// Reparameterised draw `mu + exp(logvar / 2) * eps`.
pub(crate) fn gaussian_sample(fwd: &mut Fwd, g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let eps: Vec<f64> = (0..g.value(mu).len()).map(|_| fwd.rng.normal()).collect();
    let eps = g.constant(&shape, eps)?;
    let half = g.scale(logvar, 0.5)?;
    let sd = g.exp(half)?;
    let noise = g.mul(sd, eps)?;
    g.add(mu, noise)
}

/// Runs the planner for one round: context coder on the last complete fact,
/// dialog cell, then question policy. Returns the policy output and updates
/// `state.h`, `state.h_bar`, `state.c`.
pub(crate) fn plan(
    fwd: &mut Fwd,
    g: &mut Graph,
    cfg: &ModelConfig,
    pools: &PoolBatch,
    state: &mut BatchState,
) -> Result<(PolicyOut, ContextOut)> {
    let last = state.facts.last().expect("state always holds the placeholder fact");
    let (q_bag, answers) = (last.q_bag, last.answers.clone());
    let ctx = context_encode(fwd, g, pools, state.h_bar, q_bag, &answers)?;
    let x = ctx.x_context.expect("planner coder sets x_context");
    let (h, h_bar, c) = dialog_rnn_step(fwd, g, x, state.h, state.c)?;
    let pol = question_policy(fwd, g, cfg, h)?;
    state.h = pol.h;
    state.h_bar = h_bar;
    state.c = c;
    Ok((pol, ctx))
}

pub(crate) fn placeholder_answers(games: usize) -> Vec<usize> {
    vec![PLACEHOLDER_ANSWER; games]
}
