use super::game::PoolBatch;
use super::nn::Fwd;
use super::planner::{attend_pool, ContextOut};
use super::{ModelConfig, ZKind};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Approximate posterior over the round-1 intention.
pub enum Posterior {
    /// Log-probabilities `[G * N, K]`.
    Discrete { log_probs: Var },
    /// Mean and log-variance, each `[G, gauss_dim]`.
    Gaussian { mu: Var, logvar: Var },
}

/// Encodes `(pool, question)` into the posterior over codes. The context
/// coder is queried by the question embedding alone; `q_bag` is
/// `[G, QBAG_WIDTH]`.
pub fn encode_posterior(
    fwd: &Fwd,
    g: &mut Graph,
    cfg: &ModelConfig,
    pools: &PoolBatch,
    q_bag: Var,
) -> Result<(Posterior, ContextOut)> {
    if !cfg.has_encoder() {
        return Err(Error::Missing("model has no encoder".into()));
    }
    let gs = pools.games;
    let eq_t = fwd.p(g, "encoder.eq")?;
    let e_q = g.matmul(q_bag, eq_t)?;
    let ctx = attend_pool(fwd, g, "encoder.ctx.", pools, e_q)?;
    let wzt = fwd.p(g, "encoder.wzt")?;
    let h = g.matmul(ctx.v_hat, wzt)?;
    let wz = fwd.p(g, "encoder.wz")?;
    let out = g.matmul(h, wz)?;
    let post = match cfg.z_kind {
        ZKind::Discrete => {
            let raw = g.reshape(out, &[gs * cfg.n_latent, cfg.k_categories])?;
            Posterior::Discrete {
                log_probs: g.log_softmax(raw)?,
            }
        }
        ZKind::Gaussian => Posterior::Gaussian {
            mu: g.slice(out, 0, cfg.gauss_dim)?,
            logvar: g.slice(out, cfg.gauss_dim, cfg.gauss_dim)?,
        },
        ZKind::Identity => unreachable!("checked by has_encoder"),
    };
    Ok((post, ctx))
}
