//! Benchmark fixtures shared by the criterion targets.

use dwd_core::agents::{ModelConfig, QBot};
use dwd_core::synthworld::{sample_examples, Pool, Stage1Example, WorldConfig};
use dwd_core::trainer::{Checkpoint, CheckpointMeta, Stage, TrainConfig, Variant};

/// Freshly initialised discrete-intention checkpoint.
pub fn fresh_checkpoint(seed: u64) -> Checkpoint {
    Checkpoint {
        qbot: QBot::new(ModelConfig::default(), seed).expect("default model config is valid"),
        meta: CheckpointMeta {
            stage: Stage::Stage1,
            variant: Variant::OursDiscreteElbo,
            epoch: 0,
            config: TrainConfig::default(),
            metrics: Default::default(),
            history: Vec::new(),
        },
    }
}

pub fn examples(n: usize) -> Vec<Stage1Example> {
    sample_examples(n, &WorldConfig::default(), 1, "bench").expect("sampling succeeds")
}

pub fn pools(n: usize, p: usize) -> Vec<Pool> {
    let mut rng = dwd_core::stochastic::RngStream::new(1, "bench.pools");
    (0..n)
        .map(|_| dwd_core::synthworld::sample_random_pool(p, &WorldConfig::default(), &mut rng).expect("valid pool size"))
        .collect()
}
