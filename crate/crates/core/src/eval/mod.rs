//! Dialog rollouts against the oracle answerer and the automated metrics:
//! final-round accuracy, question relevance, metric-LM perplexity and
//! distinct-n-gram diversity, plus per-round accuracy and report tables.

mod lm;
mod report;

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::agents::{
    abot_answer, final_guess, initial_state, qbot_round, Fwd, Mode, PoolBatch, Prediction, COPY_B,
};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::stochastic::{argmax, RngStream};
use crate::synthworld::{Answer, Pool, Question, Stage1Example};
use crate::trainer::{stage1_batch_loss, Checkpoint, Variant};

pub use lm::{perplexity, random_questions, train_metric_lm, LmConfig, MetricLm};
pub use report::{evaluate, report, MetricReport, Report, ReportRow, Setting, SETTINGS};

/// Games rolled out in one batched forward pass.
pub const ROLLOUT_CHUNK: usize = 50;

/// One question/answer exchange and the guess that followed the answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRound {
    pub question: Question,
    pub text: String,
    pub answer: Answer,
    /// Guess distribution over the pool after this round's answer.
    pub guess: Vec<f64>,
    /// Discrete intention indices (empty for continuous policies).
    pub latent: Vec<usize>,
    /// Per pool image, whether the oracle finds the question relevant.
    pub relevant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub pool: Pool,
    /// Zero-based target.
    pub target_index: usize,
    pub rounds: Vec<TranscriptRound>,
    /// Zero-based argmax of the last round's guess.
    pub final_guess: usize,
}

impl Transcript {
    pub fn correct(&self) -> bool {
        self.final_guess == self.target_index
    }

    pub fn questions(&self) -> impl Iterator<Item = &Question> {
        self.rounds.iter().map(|r| &r.question)
    }
}

fn probs(pred: &Prediction, g: &Graph, p: usize) -> Vec<Vec<f64>> {
    g.value(pred.log_probs)
        .chunks(p)
        .map(|row| row.iter().map(|l| l.exp()).collect())
        .collect()
}

fn parallel_supplier<'a>(ck: &'a Checkpoint, seed: u64) -> Option<Fwd<'a>> {
    (ck.meta.variant == Variant::ParallelSpeaker).then(|| {
        let mut b = Fwd::new(&ck.qbot.params, Mode::Eval, RngStream::new(seed, "rollout.b"));
        b.scope = COPY_B.to_string();
        b
    })
}

/// Plays pools that share one shape in a single batch.
fn play_chunk(ck: &Checkpoint, pools: &[&Pool], rounds: usize, seed: u64) -> Result<Vec<Transcript>> {
    let cfg = &ck.qbot.cfg;
    let gs = pools.len();
    let batch = PoolBatch::new(pools)?;
    let mut g = Graph::with_frozen(&[""]);
    let mut fwd = Fwd::new(&ck.qbot.params, Mode::Eval, RngStream::new(seed, "rollout"));
    let mut supplier = parallel_supplier(ck, seed);
    let mut state = initial_state(&mut g, cfg, gs)?;
    let mut bstate = initial_state(&mut g, cfg, gs)?;
    let mut recs: Vec<Vec<TranscriptRound>> = vec![Vec::with_capacity(rounds); gs];
    let mut prev: Option<Vec<Answer>> = None;
    for r in 0..rounds {
        let sup = supplier.as_mut().map(|f| (f, &mut bstate));
        let out = qbot_round(&mut fwd, &mut g, cfg, &batch, &mut state, prev.as_deref(), sup, false)?;
        if r > 0 {
            for (rec, p) in recs.iter_mut().zip(probs(&out.guess, &g, batch.p)) {
                rec.last_mut().expect("previous round").guess = p;
            }
        }
        let mut answers = Vec::with_capacity(gs);
        for (i, q) in out.questions.iter().enumerate() {
            let (answer, relevant) = abot_answer(pools[i], pools[i].target, q);
            answers.push(answer);
            recs[i].push(TranscriptRound {
                question: q.clone(),
                text: q.text(),
                answer,
                guess: Vec::new(),
                latent: out.policy.codes.get(i).map(|c| c.indices.clone()).unwrap_or_default(),
                relevant,
            });
        }
        prev = Some(answers);
    }
    let last = prev.expect("at least one round");
    let fin = final_guess(&mut fwd, &mut g, &batch, &mut state, &last)?;
    for (rec, p) in recs.iter_mut().zip(probs(&fin, &g, batch.p)) {
        rec.last_mut().expect("final round").guess = p;
    }
    Ok(pools
        .iter()
        .zip(recs)
        .map(|(pool, rounds)| {
            let final_guess = argmax(&rounds.last().expect("rounds").guess);
            Transcript {
                pool: (*pool).clone(),
                target_index: pool.target,
                rounds,
                final_guess,
            }
        })
        .collect())
}

/// Deterministic evaluation-mode games for many pools, batched by pool
/// shape. Output order follows `pools`.
pub fn rollout_batch(ck: &Checkpoint, pools: &[Pool], rounds: usize, seed: u64) -> Result<Vec<Transcript>> {
    if rounds == 0 {
        return Err(Error::Invalid("a game needs at least one round".into()));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in pools.iter().enumerate() {
        if !p.is_valid() {
            return Err(Error::Invalid(format!("pool {i} is malformed")));
        }
        groups.entry((p.len(), p.slots())).or_default().push(i);
    }
    let mut out: Vec<Option<Transcript>> = vec![None; pools.len()];
    for idx in groups.values() {
        for chunk in idx.chunks(ROLLOUT_CHUNK) {
            let refs: Vec<&Pool> = chunk.iter().map(|&i| &pools[i]).collect();
            for (&i, t) in chunk.iter().zip(play_chunk(ck, &refs, rounds, seed)?) {
                out[i] = Some(t);
            }
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every pool played")).collect())
}

/// One evaluation-mode game.
pub fn rollout(ck: &Checkpoint, pool: &Pool, rounds: usize, seed: u64) -> Result<Transcript> {
    Ok(rollout_batch(ck, std::slice::from_ref(pool), rounds, seed)?.remove(0))
}

fn nonempty(ts: &[Transcript]) -> Result<()> {
    if ts.is_empty() {
        return Err(Error::Invalid("no transcripts".into()));
    }
    Ok(())
}

/// Fraction of games whose final guess is the target.
pub fn accuracy(ts: &[Transcript]) -> Result<f64> {
    nonempty(ts)?;
    Ok(ts.iter().filter(|t| t.correct()).count() as f64 / ts.len() as f64)
}

/// Mean over all rounds of "the question is relevant to some pool image".
pub fn relevance(ts: &[Transcript]) -> Result<f64> {
    nonempty(ts)?;
    let (hits, n) = ts
        .iter()
        .flat_map(|t| &t.rounds)
        .fold((0usize, 0usize), |(h, n), r| (h + r.relevant.iter().any(|&x| x) as usize, n + 1));
    if n == 0 {
        return Err(Error::Invalid("transcripts hold no rounds".into()));
    }
    Ok(hits as f64 / n as f64)
}

/// Per-round accuracy of the guess made after each answer.
pub fn accuracy_by_round(ts: &[Transcript]) -> Result<Vec<f64>> {
    nonempty(ts)?;
    let r = ts[0].rounds.len();
    if ts.iter().any(|t| t.rounds.len() != r) {
        return Err(Error::Invalid("transcripts mix different round counts".into()));
    }
    let mut hits = vec![0usize; r];
    for t in ts {
        for (k, round) in t.rounds.iter().enumerate() {
            hits[k] += (argmax(&round.guess) == t.target_index) as usize;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / ts.len() as f64).collect())
}

/// `100 * D_n / G_n` over word sequences: the share of distinct n-grams
/// among all n-grams. `None` when no sequence has `n` items.
pub fn diversity_of<T: Hash + Eq, S: AsRef<[T]>>(seqs: &[S], n: usize) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let mut total = 0usize;
    let mut distinct: HashSet<&[T]> = HashSet::new();
    for s in seqs {
        for w in s.as_ref().windows(n) {
            total += 1;
            distinct.insert(w);
        }
    }
    (total > 0).then(|| 100.0 * distinct.len() as f64 / total as f64)
}

/// Diversity of questions over their words (end token excluded).
pub fn diversity(qs: &[Question], n: usize) -> Option<f64> {
    let words: Vec<Vec<&str>> = qs.iter().map(Question::words).collect();
    diversity_of(&words, n)
}

/// Held-out round-1 guess accuracy given the gold question and answer.
pub fn stage1_accuracy(ck: &Checkpoint, examples: &[Stage1Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("no examples".into()));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(ROLLOUT_CHUNK * 4) {
        let refs: Vec<&Stage1Example> = chunk.iter().collect();
        let mut g = Graph::with_frozen(&[""]);
        let mut fwd = Fwd::new(&ck.qbot.params, Mode::Eval, RngStream::new(0, "stage1.eval"));
        correct += stage1_batch_loss(&mut fwd, &mut g, &ck.qbot.cfg, &refs)?.correct;
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Writes transcripts as one JSON object per line.
pub fn write_transcripts<W: std::io::Write>(w: &mut W, ts: &[Transcript]) -> Result<()> {
    for t in ts {
        serde_json::to_writer(&mut *w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_transcripts<R: std::io::BufRead>(r: R) -> Result<Vec<Transcript>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
