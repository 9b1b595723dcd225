use std::collections::BTreeMap;

use super::{Checkpoint, CheckpointMeta, LogRecord, Stage, TrainConfig, GRAD_CLIP};
use crate::agents::{
    encode_posterior, initial_state, observe, plan, predict, question_bag, teacher_forced, Fwd, Mode, ModelConfig,
    Pending, PoolBatch, Posterior, QBot, ZKind,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::stochastic::{argmax, gumbel_softmax_var, kl_uniform_var, RngStream};
use crate::synthworld::{Answer, Stage1Example};

/// `mean_g(-log p(q_g)) + (1 / (G N)) * sum KL(q(z_n) || U(K))` for
/// log-likelihoods `[G]` and posterior log-probabilities `[G * N, K]`.
pub fn elbo_loss(g: &mut Graph, recon_logprob: Var, log_probs: Var) -> Result<Var> {
    let games = g.value(recon_logprob).len().max(1);
    let rows = g.shape(log_probs)[0].max(1);
    let recon = g.sum(recon_logprob)?;
    let recon = g.scale(recon, -1.0 / games as f64)?;
    let kl = kl_uniform_var(g, log_probs)?;
    let kl = g.sum(kl)?;
    let kl = g.scale(kl, 1.0 / rows as f64)?;
    g.add(recon, kl)
}

/// Diagonal-Gaussian KL to N(0, I), averaged over dimensions and games.
fn gaussian_kl(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let n = g.value(mu).len().max(1);
    let m2 = g.mul(mu, mu)?;
    let var = g.exp(logvar)?;
    let t = g.add(m2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum(t)?;
    g.scale(s, 0.5 / n as f64)
}

/// Loss of one pre-training batch and its parts.
pub struct Stage1Loss {
    pub total: Var,
    pub recon: f64,
    pub kl: f64,
    pub ce: f64,
    /// Games whose guess after the gold fact hits the target.
    pub correct: usize,
}

/// Pre-training loss for a batch of contrast examples: reconstruction of the
/// gold question from a code (sampled from the encoder posterior, or the
/// planner state for the identity policy), the KL term when an encoder
/// exists, and the predictor's cross-entropy after the gold fact.
pub fn stage1_batch_loss(
    fwd: &mut Fwd,
    g: &mut Graph,
    cfg: &ModelConfig,
    batch: &[&Stage1Example],
) -> Result<Stage1Loss> {
    let gs = batch.len();
    if gs == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let pools = PoolBatch::new(&batch.iter().map(|e| &e.pool).cloned().collect::<Vec<_>>())?;
    let gold: Vec<_> = batch.iter().map(|e| e.question.clone()).collect();
    let refs: Vec<_> = gold.iter().map(Some).collect();
    let q_bag = question_bag(g, &refs)?;

    let mut state = initial_state(g, cfg, gs)?;
    let (pol, _) = plan(fwd, g, cfg, &pools, &mut state)?;

    let (z, kl) = match cfg.z_kind {
        ZKind::Identity => (pol.z, None),
        _ => {
            let (post, _) = encode_posterior(fwd, g, cfg, &pools, q_bag)?;
            match post {
                Posterior::Discrete { log_probs } => {
                    let k = cfg.k_categories;
                    let z = if fwd.train() {
                        let tau = fwd.tau;
                        gumbel_softmax_var(g, log_probs, tau, &mut fwd.rng)?
                    } else {
                        let idx: Vec<usize> = g.value(log_probs).chunks(k).map(argmax).collect();
                        g.constant(g.shape(log_probs).to_vec().as_slice(), crate::agents::nn::one_hot(&idx, k))?
                    };
                    let z = g.reshape(z, &[gs, cfg.n_latent * k])?;
                    let kl = kl_uniform_var(g, log_probs)?;
                    let kl = g.sum(kl)?;
                    let kl = g.scale(kl, 1.0 / (gs * cfg.n_latent) as f64)?;
                    (z, Some(kl))
                }
                Posterior::Gaussian { mu, logvar } => {
                    let z = if fwd.train() {
                        crate::agents::gaussian_sample(fwd, g, mu, logvar)?
                    } else {
                        mu
                    };
                    (z, Some(gaussian_kl(g, mu, logvar)?))
                }
            }
        }
    };

    let tf = teacher_forced(fwd, g, z, &gold)?;
    let recon = g.sum(tf.nll)?;
    let recon = g.scale(recon, 1.0 / gs as f64)?;

    state.pending = Some(Pending {
        questions: gold,
        q_bag,
    });
    let answers: Vec<Answer> = batch.iter().map(|e| e.gold_answer()).collect();
    observe(&mut state, &answers)?;
    let pred = predict(fwd, g, &pools, state.h, &state.facts)?;
    let targets: Vec<usize> = batch.iter().map(|e| e.pool.target).collect();
    let picked = g.pick_cols(pred.log_probs, &targets)?;
    let ce = g.sum(picked)?;
    let ce = g.scale(ce, -1.0 / gs as f64)?;
    let correct = g
        .value(pred.log_probs)
        .chunks(pools.p)
        .zip(&targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();

    let mut total = g.add(recon, ce)?;
    if let Some(kl) = kl {
        total = g.add(total, kl)?;
    }
    Ok(Stage1Loss {
        total,
        recon: g.scalar(recon),
        kl: kl.map_or(0.0, |k| g.scalar(k)),
        ce: g.scalar(ce),
        correct,
    })
}

/// Deterministic Fisher-Yates permutation.
pub(crate) fn permutation(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        idx.swap(i, j);
    }
    idx
}

/// Pre-trains a fresh Q-bot on contrast examples. Returns the checkpoint with
/// one log record per epoch.
pub fn stage1_train(cfg: &TrainConfig, train: &[Stage1Example]) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("stage 1 needs a non-empty dataset".into()));
    }
    let mut qbot = QBot::new(cfg.model.clone(), cfg.seed)?;
    let mask = cfg.variant.optimizer_mask(Stage::Stage1);
    let adam = cfg.adam();
    let mut shuffle = RngStream::new(cfg.seed, "stage1.shuffle");
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(train.len(), &mut shuffle);
        let tau = cfg.tau.at(epoch as f64 / cfg.epochs.max(1) as f64);
        let mut sums = BTreeMap::<String, f64>::new();
        let mut batches = 0usize;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Stage1Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let rng = RngStream::new(cfg.seed, &format!("stage1.noise.{epoch}.{bi}"));
            let mut fwd = Fwd::new(&qbot.params, Mode::Train, rng);
            fwd.dropout = cfg.dropout;
            fwd.tau = tau;
            let loss = stage1_batch_loss(&mut fwd, &mut g, &qbot.cfg, &batch)?;
            let total = g.scalar(loss.total);
            if !total.is_finite() {
                return Err(Error::Diverged(format!("stage 1 epoch {epoch} batch {bi}: loss {total}")));
            }
            g.backward(loss.total)?;
            qbot.params.accumulate_grads(&g)?;
            qbot.params.clip_grad_norm(GRAD_CLIP);
            qbot.params.adam_step(&adam, &mask)?;
            for (k, v) in [
                ("total", total),
                ("recon", loss.recon),
                ("kl", loss.kl),
                ("ce", loss.ce),
                ("elbo", loss.recon + loss.kl),
            ] {
                *sums.entry(k.to_string()).or_default() += v;
            }
            batches += 1;
            correct += loss.correct;
        }
        sums.values_mut().for_each(|v| *v /= batches as f64);
        history.push(LogRecord {
            stage: Stage::Stage1,
            epoch,
            split: "train".into(),
            terms: sums,
            accuracy: Some(correct as f64 / train.len() as f64),
        });
    }
    qbot.params.reset_optimizer();
    Ok(Checkpoint {
        qbot,
        meta: CheckpointMeta {
            stage: Stage::Stage1,
            variant: cfg.variant,
            epoch: cfg.epochs,
            config: cfg.clone(),
            metrics: BTreeMap::new(),
            history,
        },
    })
}
