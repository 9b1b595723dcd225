use std::sync::atomic::{AtomicU64, Ordering};

use super::nn::Fwd;
use super::planner::{placeholder_answers, plan, question_bag, ContextOut, PolicyOut};
use super::predictor::{predict, Prediction};
use super::speaker::{speaker_decode, Decoded};
use super::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::synthworld::{ask_oracle, Answer, Pool, Question, FEATURE_DIM};

static NEXT_BATCH_ID: AtomicU64 = AtomicU64::new(0);

/// Features of `G` pools sharing one pool size, laid out `[G * P * B, d]`.
#[derive(Clone, Debug)]
pub struct PoolBatch {
    pub games: usize,
    pub p: usize,
    pub b: usize,
    pub feats: Vec<f64>,
    /// Distinguishes batches in graph memo keys; carries no model meaning.
    pub(crate) id: u64,
}

impl PoolBatch {
    pub fn new<P: std::borrow::Borrow<Pool>>(pools: &[P]) -> Result<PoolBatch> {
        let first = pools
            .first()
            .ok_or_else(|| Error::Invalid("empty pool batch".into()))?
            .borrow();
        let (p, b) = (first.len(), first.slots());
        let mut feats = Vec::with_capacity(pools.len() * p * b * FEATURE_DIM);
        for pool in pools {
            let pool = pool.borrow();
            if pool.len() != p || pool.slots() != b {
                return Err(Error::Invalid(format!(
                    "pool batch mixes shapes {p}x{b} and {}x{}",
                    pool.len(),
                    pool.slots()
                )));
            }
            feats.extend(pool.features());
        }
        Ok(Self::from_features(pools.len(), p, b, feats))
    }

    pub fn from_features(games: usize, p: usize, b: usize, feats: Vec<f64>) -> PoolBatch {
        assert_eq!(feats.len(), games * p * b * FEATURE_DIM, "feature buffer size");
        PoolBatch {
            games,
            p,
            b,
            feats,
            id: NEXT_BATCH_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn var(&self, g: &mut Graph) -> Result<Var> {
        let shape = [self.games * self.p * self.b, FEATURE_DIM];
        g.memo(&format!("pool#{}", self.id), |g| g.constant(&shape, self.feats.clone()))
    }
}

/// One observed round for every game in the batch.
#[derive(Clone, Debug)]
pub struct Fact {
    /// Question encoding `[G, QBAG_WIDTH]`.
    pub q_bag: Var,
    /// Answer-embedding rows (the placeholder row for round 0).
    pub answers: Vec<usize>,
}

/// Question asked but not yet answered.
#[derive(Clone, Debug)]
pub struct Pending {
    pub questions: Vec<Question>,
    pub q_bag: Var,
}

/// Q-bot's per-game recurrent state for a batch. `facts[0]` is the
/// placeholder fact, so `facts.len() == round + 1`. There is deliberately no
/// target field: the questioner never sees the answerer's image.
#[derive(Clone, Debug)]
pub struct BatchState {
    pub h: Var,
    pub h_bar: Var,
    pub c: Var,
    pub facts: Vec<Fact>,
    pub round: usize,
    pub pending: Option<Pending>,
}

pub fn initial_state(g: &mut Graph, cfg: &ModelConfig, games: usize) -> Result<BatchState> {
    let h = g.zeros(&[games, cfg.hidden]);
    let h_bar = g.zeros(&[games, cfg.hidden]);
    let c = g.zeros(&[games, cfg.hidden]);
    let q_bag = question_bag(g, &vec![None; games])?;
    Ok(BatchState {
        h,
        h_bar,
        c,
        facts: vec![Fact {
            q_bag,
            answers: placeholder_answers(games),
        }],
        round: 0,
        pending: None,
    })
}

pub fn answer_ids(answers: &[Answer]) -> Vec<usize> {
    answers.iter().map(|a| a.id()).collect()
}

/// Completes the pending question with its answers.
pub fn observe(state: &mut BatchState, answers: &[Answer]) -> Result<()> {
    let pending = state
        .pending
        .take()
        .ok_or_else(|| Error::Invalid("no question awaiting an answer".into()))?;
    if answers.len() != pending.questions.len() {
        return Err(Error::Invalid(format!(
            "{} answers for {} questions",
            answers.len(),
            pending.questions.len()
        )));
    }
    state.facts.push(Fact {
        q_bag: pending.q_bag,
        answers: answer_ids(answers),
    });
    state.round += 1;
    Ok(())
}

/// Everything one call of [`qbot_round`] produced.
pub struct RoundOutput {
    /// Guess from the facts observed before this round's question.
    pub guess: Prediction,
    pub questions: Vec<Question>,
    pub policy: PolicyOut,
    pub context: ContextOut,
    pub decoded: Decoded,
}

/// One Q-bot turn in the fixed order: fold in the previous answers, predict,
/// plan (context coder, dialog cell, policy), speak.
///
/// With `supplier` set the spoken code comes from that second model (its own
/// forward context and state) while this model's planner still runs and
/// feeds its own residual state.
#[allow(clippy::too_many_arguments)]
pub fn qbot_round(
    fwd: &mut Fwd,
    g: &mut Graph,
    cfg: &ModelConfig,
    pools: &PoolBatch,
    state: &mut BatchState,
    prev_answers: Option<&[Answer]>,
    supplier: Option<(&mut Fwd, &mut BatchState)>,
    relaxed_speaker: bool,
) -> Result<RoundOutput> {
    if let Some(ans) = prev_answers {
        observe(state, ans)?;
    }
    let guess = predict(fwd, g, pools, state.h, &state.facts)?;
    let (policy, context) = plan(fwd, g, cfg, pools, state)?;
    let z = match supplier {
        Some((bfwd, bstate)) => {
            bstate.facts.clone_from(&state.facts);
            bstate.round = state.round;
            let (bpol, _) = plan(bfwd, g, cfg, pools, bstate)?;
            bpol.z
        }
        None => policy.z,
    };
    let decoded = speaker_decode(fwd, g, z, relaxed_speaker)?;
    let q_bag = match decoded.soft_bag {
        Some(v) => v,
        None => {
            let refs: Vec<Option<&Question>> = decoded.questions.iter().map(Some).collect();
            question_bag(g, &refs)?
        }
    };
    let questions = decoded.questions.clone();
    state.pending = Some(Pending {
        questions: questions.clone(),
        q_bag,
    });
    Ok(RoundOutput {
        guess,
        questions,
        policy,
        context,
        decoded,
    })
}

/// Folds in the last answers and returns the guess that follows them.
pub fn final_guess(
    fwd: &mut Fwd,
    g: &mut Graph,
    pools: &PoolBatch,
    state: &mut BatchState,
    answers: &[Answer],
) -> Result<Prediction> {
    observe(state, answers)?;
    predict(fwd, g, pools, state.h, &state.facts)
}

/// Oracle answer about the target image plus, for every pool image, whether
/// the oracle would find the question relevant to it.
pub fn abot_answer(pool: &Pool, target: usize, question: &Question) -> (Answer, Vec<bool>) {
    let answer = ask_oracle(&pool.images[target], question);
    let relevant = pool
        .images
        .iter()
        .map(|img| ask_oracle(img, question) != Answer::NotRelevant)
        .collect();
    (answer, relevant)
}
