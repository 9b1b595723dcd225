//! Stage-1 dataset files: length-prefixed binary records plus a plain-text
//! question corpus.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::grammar::{Answer, Question, MAX_QUESTION_LEN, VOCAB_SIZE};
use super::image::{Color, DomainTag, Shape, Size, Slot, WorldImage};
use super::pool::{sample_contrast_pair, Pool, Sampling, Stage1Example};
use super::WorldConfig;
use crate::autodiff::{read_u32, read_u64};
use crate::error::{Error, Result};
use crate::stochastic::RngStream;

const MAGIC: &[u8; 4] = b"DWDS";
const VERSION: u32 = 1;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

fn encode(ex: &Stage1Example) -> Vec<u8> {
    let mut b = Vec::new();
    b.push(ex.pool.images.len() as u8);
    for img in &ex.pool.images {
        b.push(img.domain.id());
        b.push(img.slots.len() as u8);
        for s in &img.slots {
            b.extend_from_slice(&[s.present as u8, s.shape as u8, s.color as u8, s.size as u8]);
        }
    }
    b.push(ex.pool.target as u8);
    b.push(ex.question.tokens.len() as u8);
    b.extend(ex.question.tokens.iter().map(|&t| t as u8));
    b.push(ex.question.template_id.unwrap_or(u8::MAX));
    b.push(ex.answers[0].id() as u8);
    b.push(ex.answers[1].id() as u8);
    b
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn byte(&mut self) -> Result<u8> {
        let (&x, rest) = self
            .0
            .split_first()
            .ok_or_else(|| Error::Format("truncated dataset record".into()))?;
        self.0 = rest;
        Ok(x)
    }

    fn pick<T: Copy>(&mut self, table: &[T], what: &str) -> Result<T> {
        let i = self.byte()? as usize;
        table
            .get(i)
            .copied()
            .ok_or_else(|| Error::Format(format!("bad {what} id {i}")))
    }
}

fn decode(bytes: &[u8]) -> Result<Stage1Example> {
    let mut c = Cursor(bytes);
    let n_images = c.byte()? as usize;
    let mut images = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let domain = c.pick(&DomainTag::ALL, "domain")?;
        let n_slots = c.byte()? as usize;
        let mut slots = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            let present = c.byte()? != 0;
            slots.push(Slot {
                present,
                shape: c.pick(&Shape::ALL, "shape")?,
                color: c.pick(&Color::ALL, "color")?,
                size: c.pick(&Size::ALL, "size")?,
            });
        }
        images.push(WorldImage { slots, domain });
    }
    let target = c.byte()? as usize;
    let len = c.byte()? as usize;
    if len == 0 || len > MAX_QUESTION_LEN {
        return Err(Error::Format(format!("question length {len}")));
    }
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let t = c.byte()? as usize;
        if t >= VOCAB_SIZE {
            return Err(Error::Format(format!("token id {t}")));
        }
        tokens.push(t);
    }
    let tid = c.byte()?;
    let answers = [c.pick(&Answer::ALL, "answer")?, c.pick(&Answer::ALL, "answer")?];
    Ok(Stage1Example {
        pool: Pool {
            images,
            target,
            sampling: Sampling::Contrast,
        },
        question: Question {
            tokens,
            template_id: (tid != u8::MAX).then_some(tid),
        },
        answers,
    })
}

pub fn write_dataset(path: &Path, examples: &[Stage1Example]) -> Result<()> {
    let f = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(examples.len() as u64).to_le_bytes())?;
    for ex in examples {
        let rec = encode(ex);
        w.write_all(&(rec.len() as u32).to_le_bytes())?;
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Stage1Example>> {
    let f = File::open(path).map_err(file_err(path))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a dataset file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("dataset version {version}")));
    }
    let n = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut rec = vec![0u8; len];
        r.read_exact(&mut rec)?;
        out.push(decode(&rec)?);
    }
    Ok(out)
}

/// One question per line, space-separated words, end token omitted.
pub fn write_corpus(path: &Path, questions: &[Question]) -> Result<()> {
    let f = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(f);
    for q in questions {
        writeln!(w, "{}", q.text())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Question>> {
    let f = File::open(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q = Question::parse_text(&line)
            .ok_or_else(|| Error::Format(format!("{}:{}: unknown word", path.display(), i + 1)))?;
        out.push(q);
    }
    Ok(out)
}

/// Paths produced by [`build_stage1_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub dataset: PathBuf,
    pub corpus: PathBuf,
}

/// Samples `n` contrast pairs from stream `<split>` and writes
/// `<split>.bin` and `<split>_corpus.txt` under `dir`.
pub fn build_stage1_dataset(
    n: usize,
    cfg: &WorldConfig,
    seed: u64,
    split: &str,
    dir: &Path,
) -> Result<(DatasetFiles, Vec<Stage1Example>)> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    let mut rng = RngStream::new(seed, &format!("data.{split}"));
    let examples = (0..n)
        .map(|_| sample_contrast_pair(cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(dir).map_err(file_err(dir))?;
    let files = DatasetFiles {
        dataset: dir.join(format!("{split}.bin")),
        corpus: dir.join(format!("{split}_corpus.txt")),
    };
    write_dataset(&files.dataset, &examples)?;
    let qs: Vec<Question> = examples.iter().map(|e| e.question.clone()).collect();
    write_corpus(&files.corpus, &qs)?;
    Ok((files, examples))
}

/// In-memory contrast pairs from stream `data.<split>` (same draws as the files).
pub fn sample_examples(n: usize, cfg: &WorldConfig, seed: u64, split: &str) -> Result<Vec<Stage1Example>> {
    let mut rng = RngStream::new(seed, &format!("data.{split}"));
    (0..n).map(|_| sample_contrast_pair(cfg, &mut rng)).collect()
}
