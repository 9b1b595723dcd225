use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{accuracy, accuracy_by_round, diversity, perplexity, relevance, rollout_batch, MetricLm, Transcript};
use crate::error::{Error, Result};
use crate::stochastic::RngStream;
use crate::synthworld::{sample_contrast_pair, sample_random_pool, DomainTag, Pool, Sampling, WorldConfig};
use crate::trainer::Checkpoint;

/// One task setting of the evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    pub name: &'static str,
    pub pool_size: usize,
    pub sampling: Sampling,
    pub rounds: usize,
    pub domain: DomainTag,
}

/// Settings A to F, each further from the pre-training data.
pub const SETTINGS: [Setting; 6] = [
    Setting::new("A", 2, Sampling::Contrast, 1, DomainTag::Base),
    Setting::new("B", 2, Sampling::Contrast, 5, DomainTag::Base),
    Setting::new("C", 2, Sampling::Random, 5, DomainTag::Base),
    Setting::new("D", 9, Sampling::Random, 9, DomainTag::Base),
    Setting::new("E", 9, Sampling::Random, 9, DomainTag::ShiftedA),
    Setting::new("F", 9, Sampling::Random, 9, DomainTag::ShiftedB),
];

impl Setting {
    pub const fn new(name: &'static str, pool_size: usize, sampling: Sampling, rounds: usize, domain: DomainTag) -> Self {
        Setting {
            name,
            pool_size,
            sampling,
            rounds,
            domain,
        }
    }

    pub fn describe(&self) -> String {
        let s = match self.sampling {
            Sampling::Contrast => "contrast",
            Sampling::Random => "random",
        };
        format!("{}-{}-{}R {}", self.pool_size, s, self.rounds, self.domain.name())
    }

    /// `n` seeded evaluation pools for this setting.
    pub fn pools(&self, n: usize, world: &WorldConfig, seed: u64) -> Result<Vec<Pool>> {
        let world = world.with_domain(self.domain);
        let mut rng = RngStream::new(seed, &format!("eval.{}", self.name));
        (0..n)
            .map(|_| match self.sampling {
                Sampling::Contrast => sample_contrast_pair(&world, &mut rng).map(|e| e.pool),
                Sampling::Random => sample_random_pool(self.pool_size, &world, &mut rng),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub perplexity: f64,
    pub relevance: f64,
    /// `100 * D_n / G_n` for n = 1..4; absent when no question is that long.
    pub diversity: [Option<f64>; 4],
    pub accuracy_by_round: Vec<f64>,
}

impl MetricReport {
    /// Mean of the defined diversity values.
    pub fn headline_diversity(&self) -> f64 {
        let vals: Vec<f64> = self.diversity.iter().flatten().copied().collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn from_transcripts(ts: &[Transcript], lm: &MetricLm) -> Result<MetricReport> {
        let qs: Vec<_> = ts.iter().flat_map(|t| t.questions().cloned()).collect();
        Ok(MetricReport {
            accuracy: accuracy(ts)?,
            perplexity: perplexity(lm, &qs)?,
            relevance: relevance(ts)?,
            diversity: [1, 2, 3, 4].map(|n| diversity(&qs, n)),
            accuracy_by_round: accuracy_by_round(ts)?,
        })
    }
}

/// Rolls out `ck` on `pools` and scores the transcripts.
pub fn evaluate(
    ck: &Checkpoint,
    pools: &[Pool],
    rounds: usize,
    lm: &MetricLm,
    seed: u64,
) -> Result<(MetricReport, Vec<Transcript>)> {
    let ts = rollout_batch(ck, pools, rounds, seed)?;
    Ok((MetricReport::from_transcripts(&ts, lm)?, ts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub description: String,
    pub model: String,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, setting: &str, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.setting == setting && r.model == model)
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("setting\tdescription\tmodel\taccuracy\tperplexity\trelevance\tdiversity\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                r.setting,
                r.description,
                r.model,
                m.accuracy,
                m.perplexity,
                m.relevance,
                m.headline_diversity()
            );
        }
        s
    }

    /// Aligned columns for reading in a terminal.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<3} {:<24} {:<20} {:>8} {:>10} {:>9} {:>9}\n",
            "", "setting", "model", "acc", "perplex", "relev", "divers"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<3} {:<24} {:<20} {:>8.3} {:>10.3} {:>9.3} {:>9.2}",
                r.setting,
                r.description,
                r.model,
                m.accuracy,
                m.perplexity,
                m.relevance,
                m.headline_diversity()
            );
        }
        s
    }
}

/// Evaluates every model on every setting with `n_pools` shared pools per
/// setting.
pub fn report(
    models: &[(&str, &Checkpoint)],
    settings: &[Setting],
    n_pools: usize,
    world: &WorldConfig,
    lm: &MetricLm,
    seed: u64,
) -> Result<Report> {
    if models.is_empty() {
        return Err(Error::Missing("report needs at least one checkpoint".into()));
    }
    let mut rows = Vec::with_capacity(models.len() * settings.len());
    for s in settings {
        let pools = s.pools(n_pools, world, seed)?;
        for (name, ck) in models {
            let (metrics, _) = evaluate(ck, &pools, s.rounds, lm, seed)?;
            rows.push(ReportRow {
                setting: s.name.to_string(),
                description: s.describe(),
                model: name.to_string(),
                metrics,
            });
        }
    }
    Ok(Report { rows })
}
