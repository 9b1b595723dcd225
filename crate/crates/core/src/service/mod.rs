//! Live games with a human answerer: single-game stepping, the session
//! table behind the HTTP endpoints, SVG renderings and the transcript store.
//!
//! Wire indices (`target_index`, `guess`) are 1-based; everything else in
//! the crate is 0-based.

mod render;

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::agents::{
    abot_answer, final_guess, initial_state, qbot_round, BatchState, Fwd, Mode, PoolBatch, COPY_B,
};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::eval::{Transcript, TranscriptRound};
use crate::stochastic::{argmax, RngStream};
use crate::synthworld::{sample_random_pool, Answer, Pool, Question, WorldConfig, POOL_SIZES};
use crate::trainer::{Checkpoint, Variant};

pub use render::{render_svg, CANVAS};

/// Round counts a session may ask for.
pub const ROUND_CHOICES: [usize; 3] = [1, 5, 9];

/// Idle time after which a session is dropped.
pub const SESSION_IDLE: Duration = Duration::from_secs(30 * 60);

/// One game stepped answer by answer. Runs exactly the computation of an
/// evaluation rollout of a single pool, so oracle answers reproduce its
/// transcript.
pub struct LiveGame {
    ck: Arc<Checkpoint>,
    pool: Pool,
    batch: PoolBatch,
    graph: Graph,
    state: BatchState,
    bstate: BatchState,
    rounds: usize,
    seed: u64,
    history: Vec<TranscriptRound>,
    question: Option<Question>,
    latent: Vec<usize>,
    final_guess: Option<usize>,
}

impl LiveGame {
    /// Sets up the game and asks the first question.
    pub fn start(ck: Arc<Checkpoint>, pool: Pool, rounds: usize, seed: u64) -> Result<LiveGame> {
        if rounds == 0 {
            return Err(Error::Invalid("a game needs at least one round".into()));
        }
        if !pool.is_valid() {
            return Err(Error::Invalid("malformed pool".into()));
        }
        let batch = PoolBatch::new(std::slice::from_ref(&pool))?;
        let mut graph = Graph::with_frozen(&[""]);
        let state = initial_state(&mut graph, &ck.qbot.cfg, 1)?;
        let bstate = initial_state(&mut graph, &ck.qbot.cfg, 1)?;
        let mut game = LiveGame {
            ck,
            pool,
            batch,
            graph,
            state,
            bstate,
            rounds,
            seed,
            history: Vec::with_capacity(rounds),
            question: None,
            latent: Vec::new(),
            final_guess: None,
        };
        game.step(None)?;
        Ok(game)
    }

    fn step(&mut self, prev: Option<Answer>) -> Result<()> {
        let ck = Arc::clone(&self.ck);
        let mut fwd = Fwd::new(&ck.qbot.params, Mode::Eval, RngStream::new(self.seed, "rollout"));
        let mut supplier = (ck.meta.variant == Variant::ParallelSpeaker).then(|| {
            let mut b = Fwd::new(&ck.qbot.params, Mode::Eval, RngStream::new(self.seed, "rollout.b"));
            b.scope = COPY_B.to_string();
            b
        });
        let prev = prev.map(|a| [a]);
        let sup = supplier.as_mut().map(|f| (f, &mut self.bstate));
        let out = qbot_round(
            &mut fwd,
            &mut self.graph,
            &ck.qbot.cfg,
            &self.batch,
            &mut self.state,
            prev.as_ref().map(|a| a.as_slice()),
            sup,
            false,
        )?;
        if let Some(last) = self.history.last_mut() {
            last.guess = self.graph.value(out.guess.log_probs).iter().map(|l| l.exp()).collect();
        }
        self.question = out.questions.into_iter().next();
        self.latent = out.policy.codes.first().map(|c| c.indices.clone()).unwrap_or_default();
        Ok(())
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Question awaiting an answer, if the game is still running.
    pub fn question(&self) -> Option<&Question> {
        self.question.as_ref()
    }

    /// Completed question/answer exchanges so far.
    pub fn history(&self) -> &[TranscriptRound] {
        &self.history
    }

    /// Zero-based final guess once all rounds are answered.
    pub fn final_guess(&self) -> Option<usize> {
        self.final_guess
    }

    pub fn finished(&self) -> bool {
        self.final_guess.is_some()
    }

    /// Records the answer to the pending question and either asks the next
    /// one or makes the final guess, which is returned.
    pub fn answer(&mut self, answer: Answer) -> Result<Option<usize>> {
        let question = self
            .question
            .take()
            .ok_or_else(|| Error::Invalid("the game is over".into()))?;
        let relevant = abot_answer(&self.pool, self.pool.target, &question).1;
        self.history.push(TranscriptRound {
            text: question.text(),
            question,
            answer,
            guess: Vec::new(),
            latent: std::mem::take(&mut self.latent),
            relevant,
        });
        if self.history.len() < self.rounds {
            self.step(Some(answer))?;
            return Ok(None);
        }
        let ck = Arc::clone(&self.ck);
        let mut fwd = Fwd::new(&ck.qbot.params, Mode::Eval, RngStream::new(self.seed, "rollout"));
        let pred = final_guess(&mut fwd, &mut self.graph, &self.batch, &mut self.state, &[answer])?;
        let probs: Vec<f64> = self.graph.value(pred.log_probs).iter().map(|l| l.exp()).collect();
        let guess = argmax(&probs);
        self.history.last_mut().expect("just pushed").guess = probs;
        self.final_guess = Some(guess);
        Ok(Some(guess))
    }

    /// Full transcript of a finished game.
    pub fn transcript(&self) -> Option<Transcript> {
        self.final_guess.map(|g| Transcript {
            pool: self.pool.clone(),
            target_index: self.pool.target,
            rounds: self.history.clone(),
            final_guess: g,
        })
    }
}

/// Random-strategy pool for a live game with `seed`. Terminal play and the
/// HTTP service draw the same pool for the same seed.
pub fn live_pool(p: usize, world: &WorldConfig, seed: u64) -> Result<Pool> {
    let mut rng = RngStream::new(seed, "service.pool");
    sample_random_pool(p, world, &mut rng)
}

/// Failure of a service call, mapped onto an HTTP status by the server.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("no session {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("unknown answer {given:?}")]
    Validation { given: String, vocabulary: Vec<String> },
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict(_) => 409,
            ServiceError::Validation { .. } => 422,
            ServiceError::Internal(_) => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let kind = match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation { .. } => "validation",
            ServiceError::Internal(_) => "internal",
        };
        ErrorBody {
            error: kind.to_string(),
            message: self.to_string(),
            vocabulary: match self {
                ServiceError::Validation { vocabulary, .. } => Some(vocabulary.clone()),
                _ => None,
            },
        }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingAnswer,
    AwaitingQuestion,
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    pub pool_size: usize,
    pub rounds: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Model tag; the service default when absent.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub model: String,
    pub pool_size: usize,
    pub rounds: usize,
    /// One SVG document per pool image.
    pub images: Vec<String>,
    /// 1-based secret image, shown to the human only.
    pub target_index: usize,
    pub round: usize,
    pub phase: Phase,
    pub question: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: usize,
    pub question: String,
    pub answer: Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameResult {
    /// 1-based final guess.
    pub guess: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub model: String,
    pub pool_size: usize,
    pub rounds: usize,
    pub images: Vec<String>,
    /// 1-based round of the pending question, or `rounds` when finished.
    pub round: usize,
    pub phase: Phase,
    pub question: Option<String>,
    pub history: Vec<HistoryEntry>,
    pub result: Option<GameResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub session_id: String,
    /// Round that was just answered.
    pub round: usize,
    pub phase: Phase,
    pub next_question: Option<String>,
    pub result: Option<GameResult>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub games: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub games: usize,
    pub accuracy: Option<f64>,
    pub models: BTreeMap<String, ModelStats>,
}

/// A finished game as persisted in the store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredGame {
    pub session_id: String,
    pub model: String,
    /// Seconds since the Unix epoch.
    pub finished_at: u64,
    #[serde(flatten)]
    pub transcript: Transcript,
}

/// Aggregate over finished games; a pure fold.
pub fn fold_stats<'a>(games: impl IntoIterator<Item = &'a StoredGame>) -> Stats {
    let mut s = Stats::default();
    let mut correct = 0usize;
    for g in games {
        let ok = g.transcript.correct();
        s.games += 1;
        correct += ok as usize;
        let m = s.models.entry(g.model.clone()).or_default();
        m.games += 1;
        m.correct += ok as usize;
    }
    for m in s.models.values_mut() {
        m.accuracy = Some(m.correct as f64 / m.games as f64);
    }
    s.accuracy = (s.games > 0).then(|| correct as f64 / s.games as f64);
    s
}

/// Line-delimited store of finished games, optionally backed by a file.
pub struct TranscriptStore {
    path: Option<PathBuf>,
    games: Vec<StoredGame>,
    stats: Stats,
}

impl TranscriptStore {
    pub fn in_memory() -> TranscriptStore {
        TranscriptStore {
            path: None,
            games: Vec::new(),
            stats: Stats::default(),
        }
    }

    /// Opens `dir/transcripts.jsonl`, loading any games already there.
    pub fn open(dir: &Path) -> Result<TranscriptStore> {
        let file_err = |source| Error::File {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(file_err)?;
        let path = dir.join("transcripts.jsonl");
        let mut games = Vec::new();
        if path.exists() {
            let f = std::fs::File::open(&path).map_err(|source| Error::File {
                path: path.clone(),
                source,
            })?;
            for line in std::io::BufRead::lines(BufReader::new(f)) {
                let line = line?;
                if !line.trim().is_empty() {
                    games.push(serde_json::from_str(&line)?);
                }
            }
        }
        let stats = fold_stats(&games);
        Ok(TranscriptStore {
            path: Some(path),
            games,
            stats,
        })
    }

    pub fn append(&mut self, game: StoredGame) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| Error::File {
                    path: path.clone(),
                    source,
                })?;
            let mut line = serde_json::to_vec(&game)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        let ok = game.transcript.correct();
        let m = self.stats.models.entry(game.model.clone()).or_default();
        m.games += 1;
        m.correct += ok as usize;
        m.accuracy = Some(m.correct as f64 / m.games as f64);
        let total_correct: usize = self.stats.models.values().map(|m| m.correct).sum();
        self.stats.games += 1;
        self.stats.accuracy = Some(total_correct as f64 / self.stats.games as f64);
        self.games.push(game);
        Ok(())
    }

    pub fn games(&self) -> &[StoredGame] {
        &self.games
    }

    /// Incrementally maintained aggregate; equal to `fold_stats(games())`.
    pub fn stats(&self) -> &Stats {
        &self.stats
    }
}

struct Session {
    id: String,
    model: String,
    game: LiveGame,
    images: Vec<String>,
    last_active: Instant,
}

impl Session {
    fn view(&self) -> SessionView {
        let g = &self.game;
        SessionView {
            session_id: self.id.clone(),
            model: self.model.clone(),
            pool_size: g.pool().len(),
            rounds: g.rounds(),
            images: self.images.clone(),
            round: (g.history().len() + 1).min(g.rounds()),
            phase: if g.finished() {
                Phase::Finished
            } else {
                Phase::AwaitingAnswer
            },
            question: g.question().map(Question::text),
            history: history(g),
            result: result(g),
        }
    }
}

fn history(g: &LiveGame) -> Vec<HistoryEntry> {
    g.history()
        .iter()
        .enumerate()
        .map(|(i, r)| HistoryEntry {
            round: i + 1,
            question: r.text.clone(),
            answer: r.answer,
        })
        .collect()
}

fn result(g: &LiveGame) -> Option<GameResult> {
    g.final_guess().map(|guess| GameResult {
        guess: guess + 1,
        correct: guess == g.pool().target,
    })
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Session table shared by all requests. Each session sits behind its own
/// lock, so requests for one id run one at a time while different sessions
/// proceed independently.
pub struct GameService {
    models: BTreeMap<String, Arc<Checkpoint>>,
    default_model: String,
    world: WorldConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    store: Mutex<TranscriptStore>,
    idle: Duration,
}

impl GameService {
    /// `models` are `(tag, checkpoint)` pairs; the first is the default.
    pub fn new(models: Vec<(String, Checkpoint)>, store: TranscriptStore) -> Result<GameService> {
        let default_model = models
            .first()
            .map(|(n, _)| n.clone())
            .ok_or_else(|| Error::Missing("the service needs at least one checkpoint".into()))?;
        Ok(GameService {
            models: models.into_iter().map(|(n, c)| (n, Arc::new(c))).collect(),
            default_model,
            world: WorldConfig::default(),
            sessions: Mutex::new(HashMap::new()),
            store: Mutex::new(store),
            idle: SESSION_IDLE,
        })
    }

    pub fn with_idle_timeout(mut self, idle: Duration) -> Self {
        self.idle = idle;
        self
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    /// Drops sessions idle for longer than the timeout as of `now`.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut table = self.sessions.lock().expect("session table poisoned");
        let before = table.len();
        table.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_active) <= self.idle,
            // busy sessions are in use, hence not idle
            Err(_) => true,
        });
        before - table.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    fn session(&self, id: &str) -> std::result::Result<Arc<Mutex<Session>>, ServiceError> {
        self.sweep(Instant::now());
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn create(&self, req: &CreateRequest) -> std::result::Result<CreateResponse, ServiceError> {
        if !POOL_SIZES.contains(&req.pool_size) {
            return Err(ServiceError::BadRequest(format!(
                "pool_size must be one of {POOL_SIZES:?}, got {}",
                req.pool_size
            )));
        }
        if !ROUND_CHOICES.contains(&req.rounds) {
            return Err(ServiceError::BadRequest(format!(
                "rounds must be one of {ROUND_CHOICES:?}, got {}",
                req.rounds
            )));
        }
        let model = req.checkpoint.clone().unwrap_or_else(|| self.default_model.clone());
        let ck = self
            .models
            .get(&model)
            .cloned()
            .ok_or_else(|| ServiceError::BadRequest(format!("unknown checkpoint {model:?}")))?;
        let seed = req.seed.unwrap_or_else(rand::random);
        let pool = live_pool(req.pool_size, &self.world, seed)?;
        let images: Vec<String> = pool.images.iter().map(render_svg).collect();
        let target = pool.target;
        let game = LiveGame::start(ck, pool, req.rounds, seed)?;
        let question = game.question().map(Question::text).unwrap_or_default();
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session {
            id: id.clone(),
            model: model.clone(),
            game,
            images: images.clone(),
            last_active: Instant::now(),
        };
        self.sweep(Instant::now());
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(CreateResponse {
            session_id: id,
            model,
            pool_size: req.pool_size,
            rounds: req.rounds,
            images,
            target_index: target + 1,
            round: 1,
            phase: Phase::AwaitingAnswer,
            question,
        })
    }

    pub fn get(&self, id: &str) -> std::result::Result<SessionView, ServiceError> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session poisoned");
        s.last_active = Instant::now();
        Ok(s.view())
    }

    pub fn answer(&self, id: &str, req: &AnswerRequest) -> std::result::Result<AnswerResponse, ServiceError> {
        let answer = Answer::parse(req.answer.trim()).ok_or_else(|| ServiceError::Validation {
            given: req.answer.clone(),
            vocabulary: Answer::ALL.iter().map(|a| a.name().to_string()).collect(),
        })?;
        let s = self.session(id)?;
        let mut s = s.lock().expect("session poisoned");
        s.last_active = Instant::now();
        if s.game.finished() {
            return Err(ServiceError::Conflict(format!("session {id} is finished")));
        }
        let round = s.game.history().len() + 1;
        let fin = s.game.answer(answer)?;
        if fin.is_some() {
            let transcript = s.game.transcript().expect("finished game has a transcript");
            self.store.lock().expect("store poisoned").append(StoredGame {
                session_id: s.id.clone(),
                model: s.model.clone(),
                finished_at: now_secs(),
                transcript,
            })?;
        }
        Ok(AnswerResponse {
            session_id: s.id.clone(),
            round,
            phase: if fin.is_some() {
                Phase::Finished
            } else {
                Phase::AwaitingAnswer
            },
            next_question: s.game.question().map(Question::text),
            result: result(&s.game),
        })
    }

    /// The session's pool, target included. For operator tooling and audits;
    /// the HTTP layer never serves it.
    pub fn session_pool(&self, id: &str) -> std::result::Result<Pool, ServiceError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session poisoned");
        Ok(s.game.pool().clone())
    }

    pub fn stats(&self) -> Stats {
        self.store.lock().expect("store poisoned").stats().clone()
    }

    /// Recomputes the aggregate from the stored games.
    pub fn recomputed_stats(&self) -> Stats {
        fold_stats(self.store.lock().expect("store poisoned").games())
    }
}
