use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, CheckpointMeta, LogRecord, Stage, TrainConfig, Variant, GRAD_CLIP};
use crate::agents::{
    abot_answer, final_guess, initial_state, qbot_round, Fwd, Mode, ModelConfig, PoolBatch, Prediction, QBot,
    CONTEXT, COPY_B, POLICY, RNN,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::stochastic::{argmax, RngStream};
use crate::synthworld::{sample_random_pool, Answer, Pool, WorldConfig};

/// Seeded source of random-pool games for adaptation.
#[derive(Clone, Debug)]
pub struct GameSampler {
    pub world: WorldConfig,
    pub seed: u64,
    pub pool_sizes: Vec<usize>,
}

impl GameSampler {
    pub fn new(world: WorldConfig, seed: u64, pool_sizes: Vec<usize>) -> GameSampler {
        GameSampler {
            world,
            seed,
            pool_sizes,
        }
    }

    /// Pool size used by batch `index`; sizes cycle batch by batch.
    pub fn pool_size(&self, index: usize) -> usize {
        self.pool_sizes[index % self.pool_sizes.len()]
    }

    /// `games` random pools for batch `index` of `epoch`, all of one size.
    pub fn batch(&self, epoch: usize, index: usize, games: usize) -> Result<Vec<Pool>> {
        if self.pool_sizes.is_empty() {
            return Err(Error::Config("no pool sizes to sample from".into()));
        }
        let p = self.pool_size(index);
        let mut rng = RngStream::new(self.seed, &format!("stage2.games.{epoch}.{index}"));
        (0..games).map(|_| sample_random_pool(p, &self.world, &mut rng)).collect()
    }
}

/// Loss of one rollout batch.
pub struct Stage2Loss {
    pub total: Var,
    /// Mean cross-entropy of the guess after each round's answer.
    pub round_ce: Vec<f64>,
    /// Games whose final guess hits the target.
    pub correct: usize,
}

/// Rolls out `rounds`-round games against the oracle answerer and sums, over
/// rounds, the mean cross-entropy of the guess made after each answer.
///
/// `supplier` is the frozen z-supplying copy of the parallel-speaker variant.
/// `relaxed_speaker` decodes with per-token Concrete samples so the loss
/// reaches the policy (and the speaker, when it is trainable).
pub fn stage2_batch_loss(
    fwd: &mut Fwd,
    g: &mut Graph,
    cfg: &ModelConfig,
    pools: &[Pool],
    rounds: usize,
    mut supplier: Option<&mut Fwd>,
    relaxed_speaker: bool,
) -> Result<Stage2Loss> {
    if pools.is_empty() || rounds == 0 {
        return Err(Error::Invalid("stage 2 needs games and at least one round".into()));
    }
    let gs = pools.len();
    let batch = PoolBatch::new(pools)?;
    let targets: Vec<usize> = pools.iter().map(|p| p.target).collect();
    let mut state = initial_state(g, cfg, gs)?;
    let mut bstate = initial_state(g, cfg, gs)?;
    let mut guesses: Vec<Prediction> = Vec::with_capacity(rounds);
    let mut prev: Option<Vec<Answer>> = None;
    for r in 0..rounds {
        let sup = supplier.as_deref_mut().map(|f| (f, &mut bstate));
        let out = qbot_round(fwd, g, cfg, &batch, &mut state, prev.as_deref(), sup, relaxed_speaker)?;
        if r > 0 {
            guesses.push(out.guess);
        }
        let answers = pools
            .iter()
            .zip(&out.questions)
            .map(|(pool, q)| abot_answer(pool, pool.target, q).0)
            .collect();
        prev = Some(answers);
    }
    let last = prev.expect("at least one round");
    guesses.push(final_guess(fwd, g, &batch, &mut state, &last)?);

    let mut total: Option<Var> = None;
    let mut round_ce = Vec::with_capacity(rounds);
    for pred in &guesses {
        let picked = g.pick_cols(pred.log_probs, &targets)?;
        let s = g.sum(picked)?;
        let ce = g.scale(s, -1.0 / gs as f64)?;
        round_ce.push(g.scalar(ce));
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    let final_pred = guesses.last().expect("final guess");
    let correct = g
        .value(final_pred.log_probs)
        .chunks(batch.p)
        .zip(&targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    Ok(Stage2Loss {
        total: total.expect("at least one guess"),
        round_ce,
        correct,
    })
}

/// Stores a frozen copy of the planner (context coder, dialog cell, policy)
/// under [`COPY_B`] so it can supply codes to the speaker. Replaces any
/// existing copy.
pub fn prepare_parallel(qbot: &mut QBot) -> Result<()> {
    qbot.params.remove_prefix(COPY_B);
    let copies: Vec<(String, Tensor)> = qbot
        .params
        .iter()
        .filter(|(n, _)| [CONTEXT, RNN, POLICY].iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| {
            let mut t = t.clone();
            t.grad = None;
            (format!("{COPY_B}{n}"), t)
        })
        .collect();
    for (n, t) in copies {
        qbot.params.insert(&n, t)?;
    }
    Ok(())
}

/// Runs one stage-2 phase from `init`. Hashes the frozen modules before and
/// after every epoch and fails if any of them moved.
pub fn stage2_train(cfg: &TrainConfig, init: &Checkpoint, sampler: &GameSampler) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.stage == Stage::Stage1 {
        return Err(Error::Config("stage2_train needs a stage-2 phase".into()));
    }
    if init.meta.variant != cfg.variant {
        return Err(Error::Config(format!(
            "checkpoint is {}, config asks for {}",
            init.meta.variant.name(),
            cfg.variant.name()
        )));
    }
    let expected = match cfg.stage {
        Stage::Stage2b => Stage::Stage2a,
        _ => Stage::Stage1,
    };
    if init.meta.stage != expected {
        return Err(Error::Config(format!(
            "{} starts from a {} checkpoint, got {}",
            cfg.stage.name(),
            expected.name(),
            init.meta.stage.name()
        )));
    }
    let mut qbot = init.qbot.clone();
    qbot.params.zero_grad();
    if cfg.variant == Variant::ParallelSpeaker && !qbot.params.names().any(|n| n.starts_with(COPY_B)) {
        prepare_parallel(&mut qbot)?;
    }
    let freeze = cfg.variant.freeze_set(cfg.stage);
    let mask = cfg.variant.optimizer_mask(cfg.stage);
    let relaxed = cfg.variant.speaker_trained();
    let adam = cfg.adam();
    let batches = cfg.games_per_epoch.div_ceil(cfg.batch_size).max(1);
    let mut history = init.meta.history.clone();
    for epoch in 0..cfg.epochs {
        let before = qbot.params.hash_prefixes(&freeze);
        let tau = cfg.tau.at(epoch as f64 / cfg.epochs.max(1) as f64);
        let mut sums = BTreeMap::<String, f64>::new();
        let mut correct = 0usize;
        let mut games = 0usize;
        for bi in 0..batches {
            let pools = sampler.batch(epoch, bi, cfg.batch_size)?;
            let mut g = Graph::with_frozen(&mask.prefixes());
            let noise = RngStream::new(cfg.seed, &format!("{}.noise.{epoch}.{bi}", cfg.stage.name()));
            let mut fwd = Fwd::new(&qbot.params, Mode::Train, noise.split("a"));
            fwd.dropout = cfg.dropout;
            fwd.tau = tau;
            let mut supplier = (cfg.variant == Variant::ParallelSpeaker).then(|| {
                let mut b = Fwd::new(&qbot.params, Mode::Eval, noise.split("b"));
                b.scope = COPY_B.to_string();
                b
            });
            let loss = stage2_batch_loss(
                &mut fwd,
                &mut g,
                &qbot.cfg,
                &pools,
                cfg.rounds,
                supplier.as_mut(),
                relaxed,
            )?;
            let total = g.scalar(loss.total);
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} epoch {epoch} batch {bi}: loss {total}",
                    cfg.stage.name()
                )));
            }
            g.backward(loss.total)?;
            drop(fwd);
            drop(supplier);
            qbot.params.accumulate_grads(&g)?;
            qbot.params.clip_grad_norm(GRAD_CLIP);
            qbot.params.adam_step(&adam, &mask)?;
            *sums.entry("total".into()).or_default() += total;
            for (r, ce) in loss.round_ce.iter().enumerate() {
                *sums.entry(format!("ce_round_{}", r + 1)).or_default() += ce;
            }
            correct += loss.correct;
            games += pools.len();
        }
        sums.values_mut().for_each(|v| *v /= batches as f64);
        let after = qbot.params.hash_prefixes(&freeze);
        if before != after {
            return Err(Error::Invalid(format!(
                "{} epoch {epoch}: frozen modules {freeze:?} changed",
                cfg.stage.name()
            )));
        }
        history.push(LogRecord {
            stage: cfg.stage,
            epoch,
            split: "train".into(),
            terms: sums,
            accuracy: Some(correct as f64 / games.max(1) as f64),
        });
    }
    qbot.params.reset_optimizer();
    Ok(Checkpoint {
        qbot,
        meta: CheckpointMeta {
            stage: cfg.stage,
            variant: cfg.variant,
            epoch: cfg.epochs,
            config: cfg.clone(),
            metrics: BTreeMap::new(),
            history,
        },
    })
}

/// Epochs of `stage` when `total` stage-2 epochs are split in the default
/// 20:5 proportion between the two phases.
pub(crate) fn phase_epochs(stage: Stage, total: usize) -> usize {
    let first = (total * 4).div_ceil(5);
    match stage {
        Stage::Stage2a => first,
        Stage::Stage2b => total - first,
        _ => total,
    }
}

/// Runs the variant's stage-2 phases from its stage-1 checkpoint. `base`
/// supplies everything but the stage; `base.epochs` is the total stage-2
/// budget, split 4:1 for two-phase curricula. Returns one checkpoint per
/// phase.
pub fn run_curriculum(stage1: &Checkpoint, base: &TrainConfig, sampler: &GameSampler) -> Result<Vec<Checkpoint>> {
    if stage1.meta.stage != Stage::Stage1 {
        return Err(Error::Config(format!("curriculum starts from stage1, got {}", stage1.tag())));
    }
    let mut out: Vec<Checkpoint> = Vec::new();
    for &stage in base.variant.curriculum() {
        let cfg = TrainConfig {
            stage,
            epochs: phase_epochs(stage, base.epochs),
            ..base.clone()
        };
        let from = out.last().unwrap_or(stage1);
        let next = stage2_train(&cfg, from, sampler)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ZeroShot,
    Typical,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::ZeroShot => "zero_shot",
            BaselineKind::Typical => "typical",
        }
    }

    pub fn parse(s: &str) -> Option<BaselineKind> {
        [BaselineKind::ZeroShot, BaselineKind::Typical].into_iter().find(|k| k.name() == s)
    }
}

/// Builds a baseline from a stage-1 checkpoint. Zero-shot returns it
/// unchanged. Typical needs the likelihood-pre-trained identity-policy
/// checkpoint and fine-tunes everything, speaker included, in one phase.
pub fn build_baseline(
    kind: BaselineKind,
    stage1: &Checkpoint,
    base: &TrainConfig,
    sampler: &GameSampler,
) -> Result<Checkpoint> {
    if stage1.meta.stage != Stage::Stage1 {
        return Err(Error::Missing(format!("baseline needs a stage-1 checkpoint, got {}", stage1.tag())));
    }
    match kind {
        BaselineKind::ZeroShot => Ok(stage1.clone()),
        BaselineKind::Typical => {
            let variant = Variant::TypicalTransfer;
            if stage1.meta.variant != variant {
                return Err(Error::Missing(format!(
                    "typical baseline needs a {} stage-1 checkpoint, got {}",
                    variant.name(),
                    stage1.tag()
                )));
            }
            let cfg = TrainConfig {
                stage: Stage::Stage2,
                variant,
                model: stage1.qbot.cfg.clone(),
                ..base.clone()
            };
            let mut phases = run_curriculum(stage1, &cfg, sampler)?;
            Ok(phases.pop().expect("one phase"))
        }
    }
}
