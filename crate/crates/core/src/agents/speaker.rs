use super::nn::Fwd;
use super::QBAG_WIDTH;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::stochastic::{argmax, gumbel_softmax_var};
use crate::synthworld::{Question, END, MAX_QUESTION_LEN, PAD, START, VOCAB_SIZE};

fn initial_state(fwd: &Fwd, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
    let ez = fwd.p(g, "speaker.ez")?;
    let h0 = g.matmul(z, ez)?;
    let c0 = g.zeros(g.shape(h0).to_vec().as_slice());
    Ok((h0, c0))
}

fn step(fwd: &Fwd, g: &mut Graph, input: Var, h: Var, c: Var) -> Result<(Var, Var, Var)> {
    let (h, c) = fwd.lstm(g, "speaker.cell", input, h, c)?;
    let logits = fwd.linear(g, "speaker.out", h)?;
    let logp = g.log_softmax(logits)?;
    Ok((h, c, logp))
}

/// Teacher-forced likelihood of a batch of target questions.
pub struct TeacherForced {
    /// Negative log-likelihood per question `[G]` (end token included).
    pub nll: Var,
    /// Per-token log-probabilities of each target.
    pub token_logp: Vec<Vec<f64>>,
}

/// Scores `targets` under the decoder seeded by codes `z` (`[G, z_dim]`).
pub fn teacher_forced(fwd: &Fwd, g: &mut Graph, z: Var, targets: &[Question]) -> Result<TeacherForced> {
    let gs = targets.len();
    if let Some(q) = targets.iter().find(|q| q.len() > MAX_QUESTION_LEN) {
        return Err(Error::Invalid(format!(
            "target of {} tokens exceeds the cap of {MAX_QUESTION_LEN}",
            q.len()
        )));
    }
    let steps = targets.iter().map(Question::len).max().unwrap_or(0);
    let emb = fwd.p(g, "speaker.emb")?;
    let (mut h, mut c) = initial_state(fwd, g, z)?;
    let mut total: Option<Var> = None;
    let mut token_logp = vec![Vec::new(); gs];
    for t in 0..steps {
        let inputs: Vec<usize> = targets
            .iter()
            .map(|q| if t == 0 { START } else { q.tokens.get(t - 1).copied().unwrap_or(PAD) })
            .collect();
        let x = g.gather_rows(emb, &inputs)?;
        let (h2, c2, logp) = step(fwd, g, x, h, c)?;
        h = h2;
        c = c2;
        let tgt: Vec<usize> = targets.iter().map(|q| q.tokens.get(t).copied().unwrap_or(PAD)).collect();
        let picked = g.pick_cols(logp, &tgt)?;
        for (i, q) in targets.iter().enumerate() {
            if t < q.len() {
                token_logp[i].push(g.value(picked)[i]);
            }
        }
        let mask: Vec<f64> = targets.iter().map(|q| if t < q.len() { -1.0 } else { 0.0 }).collect();
        let mask = g.constant(&[gs], mask)?;
        let term = g.mul(picked, mask)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let nll = match total {
        Some(v) => v,
        None => g.zeros(&[gs]),
    };
    Ok(TeacherForced { nll, token_logp })
}

/// Output of free-running decoding.
pub struct Decoded {
    pub questions: Vec<Question>,
    pub token_logp: Vec<Vec<f64>>,
    /// Relaxed bag-of-tokens `[G, QBAG_WIDTH]` when decoding with per-token
    /// Concrete samples, differentiable into the decoder.
    pub soft_bag: Option<Var>,
}

/// Greedy decoding from codes `z` (`[G, z_dim]`), at most
/// [`MAX_QUESTION_LEN`] tokens with the end token forced at the cap.
///
/// With `relaxed` set (training only) each step draws a Concrete sample from
/// the token distribution; its argmax is the emitted token and the soft
/// sample is the next input, so gradients reach the decoder through
/// [`Decoded::soft_bag`].
pub fn speaker_decode(fwd: &mut Fwd, g: &mut Graph, z: Var, relaxed: bool) -> Result<Decoded> {
    let gs = g.shape(z)[0];
    let relaxed = relaxed && fwd.train();
    let emb = fwd.p(g, "speaker.emb")?;
    let (mut h, mut c) = initial_state(fwd, g, z)?;
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); gs];
    let mut token_logp = vec![Vec::new(); gs];
    let mut done = vec![false; gs];
    let mut soft_steps: Vec<(Var, Vec<bool>)> = Vec::new();
    let mut x = g.gather_rows(emb, &vec![START; gs])?;
    for t in 0..MAX_QUESTION_LEN {
        let (h2, c2, logp) = step(fwd, g, x, h, c)?;
        h = h2;
        c = c2;
        let last = t + 1 == MAX_QUESTION_LEN;
        let (chosen, soft) = if relaxed {
            let tau = fwd.tau;
            let s = gumbel_softmax_var(g, logp, tau, &mut fwd.rng)?;
            let idx = g.value(s).chunks(VOCAB_SIZE).map(argmax).collect::<Vec<_>>();
            (idx, Some(s))
        } else {
            (g.value(logp).chunks(VOCAB_SIZE).map(argmax).collect::<Vec<_>>(), None)
        };
        let lp = g.value(logp).to_vec();
        let mut active = vec![false; gs];
        let mut next = vec![PAD; gs];
        for i in 0..gs {
            if done[i] {
                continue;
            }
            active[i] = true;
            let tok = if last { END } else { chosen[i] };
            tokens[i].push(tok);
            token_logp[i].push(lp[i * VOCAB_SIZE + tok]);
            next[i] = tok;
            if tok == END {
                done[i] = true;
            }
        }
        if let Some(s) = soft {
            soft_steps.push((s, active));
            x = g.matmul(s, emb)?;
        } else {
            x = g.gather_rows(emb, &next)?;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    let questions: Vec<Question> = tokens.iter().map(|t| Question::from_tokens(t)).collect();
    let soft_bag = if soft_steps.is_empty() {
        None
    } else {
        Some(soft_bag(g, &soft_steps, &questions)?)
    };
    Ok(Decoded {
        questions,
        token_logp,
        soft_bag,
    })
}

/// Length-normalised sum of the relaxed token rows of each question, padded
/// with a zero placeholder column.
fn soft_bag(g: &mut Graph, steps: &[(Var, Vec<bool>)], questions: &[Question]) -> Result<Var> {
    let gs = questions.len();
    let mut acc: Option<Var> = None;
    for (s, active) in steps {
        let mut w = vec![0.0; gs * VOCAB_SIZE];
        for i in 0..gs {
            if active[i] {
                let inv = 1.0 / questions[i].len() as f64;
                w[i * VOCAB_SIZE..(i + 1) * VOCAB_SIZE].fill(inv);
            }
        }
        let w = g.constant(&[gs, VOCAB_SIZE], w)?;
        let term = g.mul(*s, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.expect("at least one decoding step");
    let pad = g.zeros(&[gs, QBAG_WIDTH - VOCAB_SIZE]);
    g.concat(&[acc, pad])
}
