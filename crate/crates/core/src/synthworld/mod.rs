//! Synthetic attribute world: slot images, a small question grammar, a
//! deterministic answerer, pool samplers and the pre-training dataset.

mod dataset;
mod grammar;
mod image;
mod pool;

pub use dataset::{
    build_stage1_dataset, read_corpus, read_dataset, sample_examples, write_corpus, write_dataset, DatasetFiles,
};
pub use grammar::{
    ask_oracle, word_id, Answer, CountAttr, Question, Template, TemplateKind, END, MAX_QUESTION_LEN, PAD,
    START, VOCAB_SIZE, WORDS,
};
pub use image::{generate_image, Color, DomainTag, ImageConfig, Marginals, Shape, Size, Slot, WorldImage, FEATURE_DIM};
pub use pool::{
    sample_contrast_pair, sample_contrast_pair_with, sample_random_pool, Pool, Sampling, Stage1Example,
    CONTRAST_ATTEMPTS, POOL_SIZES,
};

/// World generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub image: ImageConfig,
    pub templates: Vec<TemplateKind>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image: ImageConfig::default(),
            templates: TemplateKind::ALL.to_vec(),
        }
    }
}

impl WorldConfig {
    pub fn with_domain(&self, domain: DomainTag) -> WorldConfig {
        let mut c = self.clone();
        c.image.domain = domain;
        c
    }
}
