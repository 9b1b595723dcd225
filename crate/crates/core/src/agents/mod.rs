//! The questioner (Q-bot) and the oracle-backed answerer (A-bot).
//!
//! Every forward function works on a batch of `G` games that share one pool
//! size, recording onto a caller-owned [`Graph`]. Parameters live in one
//! [`ParamStore`] under fixed name prefixes so training stages can freeze
//! whole modules by prefix:
//!
//! | prefix       | module                                             |
//! |--------------|----------------------------------------------------|
//! | `ctx.`       | planner context coder and its question/answer embeddings |
//! | `rnn.`       | planner dialog cell and the parallel output gate   |
//! | `policy.`    | latent-code heads and the residual map             |
//! | `speaker.`   | latent dictionaries and the decoder                |
//! | `predictor.` | fact/box attention and the image scorer            |
//! | `encoder.`   | variational posterior used only in pre-training    |

mod encoder;
mod game;
pub(crate) mod nn;
mod planner;
mod predictor;
mod speaker;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::stochastic::RngStream;
use crate::synthworld::{Answer, FEATURE_DIM, VOCAB_SIZE};

pub use encoder::{encode_posterior, Posterior};
pub use game::{
    abot_answer, answer_ids, final_guess, initial_state, observe, qbot_round, BatchState, Fact, Pending, PoolBatch,
    RoundOutput,
};
pub use nn::{Fwd, Mode};
pub use planner::{context_encode, dialog_rnn_step, question_bag, question_policy, ContextOut, LatentCode, PolicyOut};
pub(crate) use planner::{gaussian_sample, plan};
pub use predictor::{predict, Prediction};
pub use speaker::{speaker_decode, teacher_forced, Decoded, TeacherForced};

pub const CONTEXT: &str = "ctx.";
pub const RNN: &str = "rnn.";
pub const POLICY: &str = "policy.";
pub const SPEAKER: &str = "speaker.";
pub const PREDICTOR: &str = "predictor.";
pub const ENCODER: &str = "encoder.";
/// Scope of the frozen latent-code supplier in the parallel-speaker ablation.
pub const COPY_B: &str = "copyb.";

/// Width of the bag-of-tokens question encoding: the vocabulary plus one
/// column for the round-0 placeholder question.
pub const QBAG_WIDTH: usize = VOCAB_SIZE + 1;
/// Answer-embedding row used for the round-0 placeholder answer.
pub const PLACEHOLDER_ANSWER: usize = Answer::COUNT;

/// Form of the intention passed from planner to speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZKind {
    /// N K-way Concrete variables.
    Discrete,
    /// Diagonal Gaussian with a learned mean and log-variance.
    Gaussian,
    /// The planner state itself (no policy head, no encoder).
    Identity,
}

/// Shapes of the Q-bot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    pub n_latent: usize,
    pub k_categories: usize,
    pub gauss_dim: usize,
    pub z_kind: ZKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            embed: 32,
            n_latent: 8,
            k_categories: 4,
            gauss_dim: 32,
            z_kind: ZKind::Discrete,
        }
    }
}

impl ModelConfig {
    pub fn with_z(mut self, z_kind: ZKind) -> Self {
        self.z_kind = z_kind;
        self
    }

    /// Width of the code the speaker consumes.
    pub fn z_dim(&self) -> usize {
        match self.z_kind {
            ZKind::Discrete => self.n_latent * self.k_categories,
            ZKind::Gaussian => self.gauss_dim,
            ZKind::Identity => self.hidden,
        }
    }

    /// Width of the policy output fed through the residual map.
    pub fn policy_width(&self) -> usize {
        match self.z_kind {
            ZKind::Discrete => self.n_latent * self.k_categories,
            ZKind::Gaussian => 2 * self.gauss_dim,
            ZKind::Identity => 0,
        }
    }

    pub fn has_encoder(&self) -> bool {
        self.z_kind != ZKind::Identity
    }

    /// Planner recurrent input `[v_hat, e_q, e_a]`.
    pub fn context_width(&self) -> usize {
        FEATURE_DIM + 2 * self.embed
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 || self.n_latent == 0 || self.gauss_dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.k_categories < 2 {
            return Err(Error::Config("model.k_categories must be at least 2".into()));
        }
        Ok(())
    }
}

/// Q-bot parameters with the shapes they were built for.
#[derive(Clone, Debug)]
pub struct QBot {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn init_context_coder(init: &mut nn::Init, pfx: &str, cfg: &ModelConfig) -> Result<()> {
    let (h, e, d) = (cfg.hidden, cfg.embed, FEATURE_DIM);
    init.mlp2(&format!("{pfx}g"), e, h, h)?;
    init.mlp2(&format!("{pfx}f1"), d, h, h)?;
    init.mlp2(&format!("{pfx}f3"), d, h, h)?;
    init.wn_linear(&format!("{pfx}f2"), h, 1)?;
    init.wn_linear(&format!("{pfx}f4"), h, 1)
}

impl QBot {
    /// Freshly initialised Q-bot; a pure function of `(cfg, seed)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<QBot> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = nn::Init {
            store: &mut params,
            rng: RngStream::new(seed, "init"),
        };
        let (h, e, d) = (cfg.hidden, cfg.embed, FEATURE_DIM);
        let a_rows = Answer::COUNT + 1;

        init.uniform("ctx.eq", &[QBAG_WIDTH, e], 0.1)?;
        init.uniform("ctx.ea", &[a_rows, e], 0.1)?;
        init.linear("ctx.f5", h + 2 * e, e)?;
        init_context_coder(&mut init, "ctx.", &cfg)?;

        init.lstm("rnn.cell", cfg.context_width(), h)?;
        init.matrix("rnn.w1", cfg.context_width(), h)?;
        init.matrix("rnn.w2", h, h)?;
        init.constant("rnn.bbar", &[h], 0.0)?;

        if cfg.z_kind != ZKind::Identity {
            init.matrix("policy.wz", h, cfg.policy_width())?;
            init.matrix("policy.wl", cfg.policy_width(), h)?;
        }

        init.matrix("speaker.ez", cfg.z_dim(), h)?;
        init.uniform("speaker.emb", &[VOCAB_SIZE, e], 0.1)?;
        init.lstm("speaker.cell", e, h)?;
        // near-uniform output distribution before training
        init.uniform("speaker.out.w", &[h, VOCAB_SIZE], 0.01)?;
        init.constant("speaker.out.b", &[VOCAB_SIZE], 0.0)?;

        init.uniform("predictor.eq", &[QBAG_WIDTH, e], 0.1)?;
        init.uniform("predictor.ea", &[a_rows, e], 0.1)?;
        init.mlp2("predictor.fact_q", h, h, h)?;
        init.mlp2("predictor.fact_k", 2 * e, h, h)?;
        init.wn_linear("predictor.fact_s", h, 1)?;
        init.mlp2("predictor.box_q", h + 2 * e, h, h)?;
        init.mlp2("predictor.box_k", d, h, h)?;
        init.wn_linear("predictor.box_s", h, 1)?;
        init.mlp2("predictor.g1", d, h, h)?;
        init.mlp2("predictor.g2", h + 2 * e, h, h)?;
        init.mlp2("predictor.g3", h, h, 1)?;

        if cfg.has_encoder() {
            init.uniform("encoder.eq", &[QBAG_WIDTH, e], 0.1)?;
            init_context_coder(&mut init, "encoder.ctx.", &cfg)?;
            init.matrix("encoder.wzt", d, h)?;
            init.matrix("encoder.wz", h, cfg.policy_width())?;
        }
        Ok(QBot { cfg, params })
    }

    /// Parameter prefixes belonging to each named module group.
    pub fn groups() -> [(&'static str, &'static str); 6] {
        [
            ("context_coder", CONTEXT),
            ("dialog_cell", RNN),
            ("question_policy", POLICY),
            ("speaker", SPEAKER),
            ("predictor", PREDICTOR),
            ("encoder", ENCODER),
        ]
    }

    pub fn group_hash(&self, prefix: &str) -> String {
        self.params.hash_prefixes(&[prefix])
    }
}
