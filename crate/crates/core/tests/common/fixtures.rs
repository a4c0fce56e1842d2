//! Small models and runs shared by the integration tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsmoe::config::ModelConfig;
use rsmoe::model::CaptionModel;
use rsmoe::pretrain::Foundation;
use rsmoe::scene::{generate, Sample};
use rsmoe::train::RunConfig;

/// Tiny widths with room for full-length captions.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        max_caption_len: ModelConfig::default().max_caption_len,
        ..ModelConfig::tiny()
    }
}

pub fn small_run(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        n_train: 6,
        n_test: 3,
        model: small_model(),
        ..RunConfig::default()
    };
    c.train.stage1_epochs = 1;
    c.train.stage2_epochs = 1;
    c.train.onestage_epochs = 2;
    c.train.warmup_epochs = 0;
    c.train.lr = 1e-2;
    c
}

pub fn random_foundation(cfg: &ModelConfig, seed: u64) -> Foundation {
    CaptionModel::random_base(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn split(cfg: &RunConfig) -> (Vec<Sample>, Vec<Sample>) {
    generate(cfg.data_seed, cfg.n_train + cfg.n_test).split(cfg.n_train)
}
