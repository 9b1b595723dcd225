//! Terminal game: the human answers Q-bot's questions about a secret image.

use std::io::{BufRead, Write};
use std::sync::Arc;

use anyhow::Result;
use dwd_core::eval::Transcript;
use dwd_core::service::{live_pool, LiveGame};
use dwd_core::synthworld::{Answer, WorldConfig};
use dwd_core::trainer::Checkpoint;

pub enum PlayOutcome {
    Finished(Transcript),
    /// The player typed `quit` or closed the input.
    Quit,
}

fn vocabulary() -> String {
    Answer::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(" ")
}

/// Plays one game over `input`/`output`. The pool is the one the HTTP
/// service draws for the same seed.
pub fn play<R: BufRead, W: Write>(
    ck: Arc<Checkpoint>,
    pool_size: usize,
    rounds: usize,
    seed: u64,
    mut input: R,
    out: &mut W,
) -> Result<PlayOutcome> {
    let pool = live_pool(pool_size, &WorldConfig::default(), seed)?;
    writeln!(out, "pool of {} images, {} rounds", pool.len(), rounds)?;
    for (i, img) in pool.images.iter().enumerate() {
        let mark = if i == pool.target { "  <- your secret image" } else { "" };
        writeln!(out, "  [{}] {}{}", i + 1, img.describe(), mark)?;
    }
    writeln!(out, "answers: {}  (quit to stop)", vocabulary())?;
    let mut game = LiveGame::start(ck, pool, rounds, seed)?;
    let mut line = String::new();
    while let Some(q) = game.question() {
        let round = game.history().len() + 1;
        writeln!(out, "round {round}/{rounds}  Q: {}", q.text())?;
        loop {
            write!(out, "answer> ")?;
            out.flush()?;
            line.clear();
            if input.read_line(&mut line)? == 0 {
                writeln!(out)?;
                return Ok(PlayOutcome::Quit);
            }
            let tok = line.trim();
            if tok == "quit" || tok == "q" {
                return Ok(PlayOutcome::Quit);
            }
            match Answer::parse(tok) {
                Some(a) => {
                    game.answer(a)?;
                    break;
                }
                None => writeln!(out, "unknown answer {tok:?}; one of: {}", vocabulary())?,
            }
        }
    }
    let t = game.transcript().expect("all rounds answered");
    writeln!(
        out,
        "Q-bot guesses image {}: {}",
        t.final_guess + 1,
        if t.correct() { "correct" } else { "wrong" }
    )?;
    Ok(PlayOutcome::Finished(t))
}
