use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::nn::Init;
use crate::agents::{Fwd, Mode};
use crate::autodiff::{read_u64, AdamConfig, FreezeMask, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::stochastic::RngStream;
use crate::synthworld::{Question, END, MAX_QUESTION_LEN, PAD, START, VOCAB_SIZE};
use crate::trainer::GRAD_CLIP;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub hidden: usize,
    pub embed: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            hidden: 64,
            embed: 32,
            epochs: 10,
            lr: 3e-3,
            batch_size: 32,
            seed: 7,
        }
    }
}

/// One-layer LSTM token model used only to score question fluency.
#[derive(Clone, Debug)]
pub struct MetricLm {
    pub cfg: LmConfig,
    pub params: ParamStore,
}

impl MetricLm {
    pub fn new(cfg: LmConfig) -> Result<MetricLm> {
        if cfg.hidden == 0 || cfg.embed == 0 || cfg.batch_size == 0 {
            return Err(Error::Config("metric LM sizes must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: RngStream::new(cfg.seed, "lm.init"),
        };
        init.uniform("lm.emb", &[VOCAB_SIZE, cfg.embed], 0.1)?;
        init.lstm("lm.cell", cfg.embed, cfg.hidden)?;
        init.uniform("lm.out.w", &[cfg.hidden, VOCAB_SIZE], 0.01)?;
        init.constant("lm.out.b", &[VOCAB_SIZE], 0.0)?;
        Ok(MetricLm { cfg, params })
    }

    /// Summed token NLL `[G]` of `qs`, end token included.
    fn nll(&self, g: &mut Graph, qs: &[&Question]) -> Result<Var> {
        let gs = qs.len();
        let fwd = Fwd::new(&self.params, Mode::Eval, RngStream::new(0, "lm"));
        let emb = fwd.p(g, "lm.emb")?;
        let mut h = g.zeros(&[gs, self.cfg.hidden]);
        let mut c = g.zeros(&[gs, self.cfg.hidden]);
        let steps = qs.iter().map(|q| q.len()).max().unwrap_or(0);
        let mut total = g.zeros(&[gs]);
        for t in 0..steps {
            let inputs: Vec<usize> = qs
                .iter()
                .map(|q| if t == 0 { START } else { q.tokens.get(t - 1).copied().unwrap_or(PAD) })
                .collect();
            let x = g.gather_rows(emb, &inputs)?;
            (h, c) = fwd.lstm(g, "lm.cell", x, h, c)?;
            let logits = fwd.linear(g, "lm.out", h)?;
            let logp = g.log_softmax(logits)?;
            let tgt: Vec<usize> = qs.iter().map(|q| q.tokens.get(t).copied().unwrap_or(PAD)).collect();
            let picked = g.pick_cols(logp, &tgt)?;
            let mask: Vec<f64> = qs.iter().map(|q| if t < q.len() { -1.0 } else { 0.0 }).collect();
            let mask = g.constant(&[gs], mask)?;
            let term = g.mul(picked, mask)?;
            total = g.add(total, term)?;
        }
        Ok(total)
    }

    /// Negative log-likelihood of each question.
    pub fn question_nll(&self, qs: &[Question]) -> Result<Vec<f64>> {
        check_questions(qs)?;
        let mut out = Vec::with_capacity(qs.len());
        for chunk in qs.chunks(256) {
            let refs: Vec<&Question> = chunk.iter().collect();
            let mut g = Graph::with_frozen(&[""]);
            let v = self.nll(&mut g, &refs)?;
            out.extend_from_slice(g.value(v));
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.params.write_to(w)?;
        let json = serde_json::to_vec(&self.cfg)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<MetricLm> {
        let params = ParamStore::read_from(r)?;
        let len = read_u64(r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        Ok(MetricLm {
            cfg: serde_json::from_slice(&json)?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<MetricLm> {
        let bytes = std::fs::read(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn check_questions(qs: &[Question]) -> Result<()> {
    if qs.is_empty() {
        return Err(Error::Invalid("no questions to score".into()));
    }
    if let Some(q) = qs
        .iter()
        .find(|q| q.is_empty() || q.len() > MAX_QUESTION_LEN || q.tokens.iter().any(|&t| t >= VOCAB_SIZE))
    {
        return Err(Error::Invalid(format!("cannot score token sequence {:?}", q.tokens)));
    }
    Ok(())
}

/// Trains the metric LM by token cross-entropy on `corpus`.
pub fn train_metric_lm(corpus: &[Question], cfg: &LmConfig) -> Result<MetricLm> {
    check_questions(corpus)?;
    let mut lm = MetricLm::new(cfg.clone())?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut shuffle = RngStream::new(cfg.seed, "lm.shuffle");
    for _ in 0..cfg.epochs {
        let order = crate::trainer::permutation(corpus.len(), &mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let qs: Vec<&Question> = chunk.iter().map(|&i| &corpus[i]).collect();
            let mut g = Graph::new();
            let nll = lm.nll(&mut g, &qs)?;
            let s = g.sum(nll)?;
            let loss = g.scale(s, 1.0 / qs.len() as f64)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::Diverged("metric LM loss is not finite".into()));
            }
            g.backward(loss)?;
            lm.params.accumulate_grads(&g)?;
            lm.params.clip_grad_norm(GRAD_CLIP);
            lm.params.adam_step(&adam, &FreezeMask::none())?;
        }
    }
    lm.params.reset_optimizer();
    Ok(lm)
}

/// `exp(total NLL / total tokens)`, end tokens counted. Each distinct
/// question is scored once and the sum runs in a fixed order, so the result
/// does not depend on the order of `qs`.
pub fn perplexity(lm: &MetricLm, qs: &[Question]) -> Result<f64> {
    check_questions(qs)?;
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for q in qs {
        *counts.entry(q.tokens.as_slice()).or_default() += 1;
    }
    let unique: Vec<Question> = counts
        .keys()
        .map(|t| Question {
            tokens: t.to_vec(),
            template_id: None,
        })
        .collect();
    let nll = lm.question_nll(&unique)?;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ((t, &n), l) in counts.iter().zip(&nll) {
        total += n as f64 * l;
        tokens += n * t.len();
    }
    Ok((total / tokens as f64).exp())
}

/// `n` token strings of uniformly random words (no control tokens) with
/// lengths drawn like `like`, each closed by the end token.
pub fn random_questions(like: &[Question], seed: u64) -> Vec<Question> {
    let mut rng = RngStream::new(seed, "lm.random");
    like.iter()
        .map(|q| {
            let words = q.len().saturating_sub(1);
            let mut tokens: Vec<usize> = (0..words).map(|_| 3 + rng.below(VOCAB_SIZE - 3)).collect();
            tokens.push(END);
            Question {
                tokens,
                template_id: None,
            }
        })
        .collect()
}
