use serde::{Deserialize, Serialize};

use super::grammar::{ask_oracle, Answer, Question, Template};
use super::image::{generate_image, WorldImage};
use super::WorldConfig;
use crate::error::{Error, Result};
use crate::stochastic::RngStream;

/// Pool sizes used by the task grid.
pub const POOL_SIZES: [usize; 3] = [2, 4, 9];

/// Upper bound on rejection-sampling attempts for a contrast pair.
pub const CONTRAST_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Contrast,
    Random,
}

/// A pool of images with the answerer's secret target (zero-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub images: Vec<WorldImage>,
    pub target: usize,
    pub sampling: Sampling,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn slots(&self) -> usize {
        self.images.first().map_or(0, |i| i.slots.len())
    }

    /// `[P * B, FEATURE_DIM]` row-major box features.
    ///
    /// Length is `P * B * FEATURE_DIM`.
    pub fn features(&self) -> Vec<f64> {
        self.images.iter().flat_map(|i| i.features()).collect()
    }

    pub fn is_valid(&self) -> bool {
        !self.images.is_empty()
            && self.target < self.images.len()
            && (self.sampling != Sampling::Contrast || self.images.len() == 2)
            && self.images.iter().all(|i| i.slots.len() == self.slots())
    }

    pub fn target_image(&self) -> &WorldImage {
        &self.images[self.target]
    }
}

/// A contrast pair with a question whose answers differ across the two images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Example {
    pub pool: Pool,
    pub question: Question,
    pub answers: [Answer; 2],
}

impl Stage1Example {
    pub fn gold_answer(&self) -> Answer {
        self.answers[self.pool.target]
    }

    pub fn is_valid(&self) -> bool {
        self.pool.is_valid()
            && self.pool.sampling == Sampling::Contrast
            && self.answers[0] != self.answers[1]
            && !self.answers.contains(&Answer::NotRelevant)
            && self
                .pool
                .images
                .iter()
                .zip(&self.answers)
                .all(|(img, a)| ask_oracle(img, &self.question) == *a)
    }
}

fn random_template(cfg: &WorldConfig, rng: &mut RngStream) -> Result<Template> {
    if cfg.templates.is_empty() {
        return Err(Error::Config("world.templates is empty".into()));
    }
    let kind = cfg.templates[rng.below(cfg.templates.len())];
    let all = Template::enumerate(kind);
    Ok(all[rng.below(all.len())])
}

/// Rejection-samples `(question, image, image)` until both answers are
/// relevant and differ.
pub fn sample_contrast_pair(cfg: &WorldConfig, rng: &mut RngStream) -> Result<Stage1Example> {
    for _ in 0..CONTRAST_ATTEMPTS {
        let t = random_template(cfg, rng)?;
        if let Some(ex) = try_pair(&t, cfg, rng)? {
            return Ok(ex);
        }
    }
    Err(Error::Exhausted(CONTRAST_ATTEMPTS))
}

/// Like [`sample_contrast_pair`] with the question fixed.
pub fn sample_contrast_pair_with(template: &Template, cfg: &WorldConfig, rng: &mut RngStream) -> Result<Stage1Example> {
    for _ in 0..CONTRAST_ATTEMPTS {
        if let Some(ex) = try_pair(template, cfg, rng)? {
            return Ok(ex);
        }
    }
    Err(Error::Exhausted(CONTRAST_ATTEMPTS))
}

fn try_pair(t: &Template, cfg: &WorldConfig, rng: &mut RngStream) -> Result<Option<Stage1Example>> {
    let question = t.question();
    let a = generate_image(&cfg.image, rng)?;
    let b = generate_image(&cfg.image, rng)?;
    let (x, y) = (ask_oracle(&a, &question), ask_oracle(&b, &question));
    if x == Answer::NotRelevant || y == Answer::NotRelevant || x == y {
        return Ok(None);
    }
    let target = rng.below(2);
    Ok(Some(Stage1Example {
        pool: Pool {
            images: vec![a, b],
            target,
            sampling: Sampling::Contrast,
        },
        question,
        answers: [x, y],
    }))
}

/// `p` i.i.d. images with a uniformly drawn target.
pub fn sample_random_pool(p: usize, cfg: &WorldConfig, rng: &mut RngStream) -> Result<Pool> {
    if !POOL_SIZES.contains(&p) {
        return Err(Error::Invalid(format!("pool size {p} not in {POOL_SIZES:?}")));
    }
    let images = (0..p)
        .map(|_| generate_image(&cfg.image, rng))
        .collect::<Result<Vec<_>>>()?;
    let target = rng.below(p);
    Ok(Pool {
        images,
        target,
        sampling: Sampling::Random,
    })
}
