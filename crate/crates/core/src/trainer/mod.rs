//! Pre-training (ELBO or maximum likelihood), the two-phase adaptation
//! curriculum, baselines and the ablation variants.

mod checkpoint;
mod stage1;
mod stage2;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::{ModelConfig, ZKind, CONTEXT, COPY_B, ENCODER, POLICY, SPEAKER};
use crate::autodiff::{AdamConfig, FreezeMask};
use crate::error::{Error, Result};
use crate::stochastic::TauSchedule;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub(crate) use stage1::permutation;
pub use stage1::{elbo_loss, stage1_batch_loss, stage1_train, Stage1Loss};
pub use stage2::{
    build_baseline, prepare_parallel, run_curriculum, stage2_batch_loss, stage2_train, BaselineKind, GameSampler,
};

/// Global gradient-norm clip applied before every optimizer step.
pub const GRAD_CLIP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    /// Dialog tracking with the planner front-end and speaker frozen.
    Stage2a,
    /// Whole planner with the speaker frozen.
    Stage2b,
    /// Single-phase transfer used by variants that skip the curriculum.
    Stage2,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Stage1, Stage::Stage2a, Stage::Stage2b, Stage::Stage2];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2a => "stage2a",
            Stage::Stage2b => "stage2b",
            Stage::Stage2 => "stage2",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Self::ALL.iter().copied().find(|v| v.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    OursDiscreteElbo,
    ContinuousElbo,
    ContinuousMle,
    TypicalTransfer,
    ParallelSpeaker,
    FinetunedSpeaker,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::OursDiscreteElbo,
        Variant::ContinuousElbo,
        Variant::ContinuousMle,
        Variant::TypicalTransfer,
        Variant::ParallelSpeaker,
        Variant::FinetunedSpeaker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::OursDiscreteElbo => "ours_discrete_elbo",
            Variant::ContinuousElbo => "continuous_elbo",
            Variant::ContinuousMle => "continuous_mle",
            Variant::TypicalTransfer => "typical_transfer",
            Variant::ParallelSpeaker => "parallel_speaker",
            Variant::FinetunedSpeaker => "finetuned_speaker",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Self::ALL.iter().copied().find(|v| v.name() == s)
    }

    /// Intention form, which also fixes the pre-training objective: models
    /// with an encoder use the ELBO, the identity policy uses likelihood only.
    pub fn z_kind(self) -> ZKind {
        match self {
            Variant::OursDiscreteElbo | Variant::ParallelSpeaker | Variant::FinetunedSpeaker => ZKind::Discrete,
            Variant::ContinuousElbo => ZKind::Gaussian,
            Variant::ContinuousMle | Variant::TypicalTransfer => ZKind::Identity,
        }
    }

    /// Stage-2 phases in order.
    pub fn curriculum(self) -> &'static [Stage] {
        match self {
            Variant::OursDiscreteElbo | Variant::ContinuousElbo | Variant::ContinuousMle => {
                &[Stage::Stage2a, Stage::Stage2b]
            }
            Variant::TypicalTransfer | Variant::ParallelSpeaker | Variant::FinetunedSpeaker => &[Stage::Stage2],
        }
    }

    pub fn speaker_trained(self) -> bool {
        matches!(self, Variant::TypicalTransfer | Variant::FinetunedSpeaker)
    }

    /// Module prefixes frozen in `stage`.
    pub fn freeze_set(self, stage: Stage) -> Vec<&'static str> {
        let mut set = match stage {
            Stage::Stage1 => vec![],
            Stage::Stage2a => vec![CONTEXT, POLICY, SPEAKER],
            Stage::Stage2b | Stage::Stage2 => vec![SPEAKER],
        };
        if self.speaker_trained() && stage != Stage::Stage2a {
            set.retain(|p| *p != SPEAKER);
        }
        if self == Variant::ParallelSpeaker && stage != Stage::Stage1 {
            set.push(COPY_B);
        }
        set
    }

    /// Prefixes excluded from the optimizer: the freeze set plus modules that
    /// take no part in the stage's forward pass.
    pub fn optimizer_mask(self, stage: Stage) -> FreezeMask {
        let mut set = self.freeze_set(stage);
        if stage != Stage::Stage1 {
            set.push(ENCODER);
        }
        FreezeMask::new(&set)
    }
}

/// Everything a training stage needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub variant: Variant,
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: TauSchedule,
    pub dropout: f64,
    pub seed: u64,
    /// Stage-2 games per epoch.
    pub games_per_epoch: usize,
    /// Stage-2 dialog rounds per game.
    pub rounds: usize,
    /// Stage-2 pool sizes, cycled batch by batch.
    pub pool_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Stage1,
            variant: Variant::OursDiscreteElbo,
            model: ModelConfig::default(),
            epochs: 15,
            lr: 1e-3,
            batch_size: 32,
            tau: TauSchedule::default(),
            dropout: 0.1,
            seed: 7,
            games_per_epoch: 640,
            rounds: 5,
            pool_sizes: vec![2, 4, 9],
        }
    }
}

impl TrainConfig {
    /// Defaults for a stage/variant pair. Stage 2 is 20 epochs of 2a then 5 of 2b.
    pub fn for_stage(stage: Stage, variant: Variant) -> TrainConfig {
        let epochs = match stage {
            Stage::Stage1 => 15,
            Stage::Stage2a => 20,
            Stage::Stage2b => 5,
            Stage::Stage2 => 25,
        };
        TrainConfig {
            stage,
            variant,
            model: ModelConfig::default().with_z(variant.z_kind()),
            epochs,
            ..TrainConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.z_kind != self.variant.z_kind() {
            return Err(Error::Config(format!(
                "variant {} needs z kind {:?}, model has {:?}",
                self.variant.name(),
                self.variant.z_kind(),
                self.model.z_kind
            )));
        }
        if self.batch_size == 0 || self.rounds == 0 || self.pool_sizes.is_empty() {
            return Err(Error::Config("batch_size, rounds and pool_sizes must be non-empty".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("lr must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub split: String,
    /// Loss terms averaged over the epoch's batches, keyed by name.
    pub terms: BTreeMap<String, f64>,
    pub accuracy: Option<f64>,
}
