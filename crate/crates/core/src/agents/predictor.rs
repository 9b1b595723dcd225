use super::game::{Fact, PoolBatch};
use super::nn::{repeat_idx, Fwd};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::synthworld::FEATURE_DIM;

/// Guess distribution and the attention weights behind it.
pub struct Prediction {
    /// Log-probabilities over pool images `[G, P]`.
    pub log_probs: Var,
    /// Attention over facts `[G, F]`.
    pub fact_attention: Var,
    /// Attention over boxes within each image `[G * P, B]`.
    pub box_attention: Var,
}

/// Scores every pool image from the dialog state `h` (`[G, H]`) and the
/// facts so far: attention over facts, then per-image attention over boxes,
/// then `g3(g2(Q_y) * g1(e_I))`.
pub fn predict(fwd: &mut Fwd, g: &mut Graph, pools: &PoolBatch, h: Var, facts: &[Fact]) -> Result<Prediction> {
    if facts.is_empty() {
        return Err(Error::Invalid("predict needs at least the placeholder fact".into()));
    }
    if pools.p == 0 {
        return Err(Error::Invalid("empty pool".into()));
    }
    let (gs, p, b) = (pools.games, pools.p, pools.b);
    let nf = facts.len();
    let eq_t = fwd.p(g, "predictor.eq")?;
    let ea_t = fwd.p(g, "predictor.ea")?;
    let mut rows = Vec::with_capacity(nf);
    for f in facts {
        let e_q = g.matmul(f.q_bag, eq_t)?;
        let e_a = g.gather_rows(ea_t, &f.answers)?;
        rows.push(g.concat(&[e_q, e_a])?);
    }
    let fw = g.shape(rows[0])[1];
    let stacked = g.concat(&rows)?;
    let keys = g.reshape(stacked, &[gs * nf, fw])?;
    let keys = fwd.mlp2(g, "predictor.fact_k", keys)?;
    let q = fwd.mlp2(g, "predictor.fact_q", h)?;
    let q = g.gather_rows(q, &repeat_idx(gs, nf))?;
    let s = g.mul(q, keys)?;
    let s = fwd.wn_linear(g, "predictor.fact_s", s)?;
    let s = g.reshape(s, &[gs, nf])?;
    let fact_attention = g.softmax(s)?;
    let w = g.reshape(fact_attention, &[gs, 1, nf])?;
    let values = g.reshape(stacked, &[gs, nf, fw])?;
    let e_f = g.bmm(w, values)?;
    let e_f = g.reshape(e_f, &[gs, fw])?;
    let q_y = g.concat(&[h, e_f])?;

    let feats = pools.var(g)?;
    let key = format!("{}predictor.box_k(I)#{}", fwd.scope, pools.id);
    let box_k = g.memo(&key, |g| fwd.mlp2(g, "predictor.box_k", feats))?;
    let bq = fwd.mlp2(g, "predictor.box_q", q_y)?;
    let bq = g.gather_rows(bq, &repeat_idx(gs, p * b))?;
    let s = g.mul(bq, box_k)?;
    let s = fwd.wn_linear(g, "predictor.box_s", s)?;
    let s = g.reshape(s, &[gs * p, b])?;
    let box_attention = g.softmax(s)?;
    let w = g.reshape(box_attention, &[gs * p, 1, b])?;
    let boxes = g.reshape(feats, &[gs * p, b, FEATURE_DIM])?;
    let e_i = g.bmm(w, boxes)?;
    let e_i = g.reshape(e_i, &[gs * p, FEATURE_DIM])?;

    let e_i = fwd.mlp2(g, "predictor.g1", e_i)?;
    let q_p = fwd.mlp2(g, "predictor.g2", q_y)?;
    let q_p = g.gather_rows(q_p, &repeat_idx(gs, p))?;
    let joint = g.mul(q_p, e_i)?;
    let l_y = fwd.mlp2_linear_out(g, "predictor.g3", joint)?;
    let l_y = g.reshape(l_y, &[gs, p])?;
    let log_probs = g.log_softmax(l_y)?;
    Ok(Prediction {
        log_probs,
        fact_attention,
        box_attention,
    })
}
