#![allow(dead_code)]

use muser::config::TrainConfig;
use muser::data::{synth_dataset, DatasetRecord, SynthConfig};
use muser::encoders::{init_params, ModelConfig, ModelParams};
use muser::signal::StftConfig;
use muser::training::{build_training_vocab, prepare_examples, PreparedExample};

/// Tiny dimensions for exhaustive finite differences.
pub fn gradcheck_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        model: ModelConfig {
            embed_dim: 4,
            text_dim: 4,
            spec_dim: 4,
            spec_hidden: 5,
            audio_dim: 4,
            audio_hidden: 5,
            grid: 2,
            frame_feat: 16,
            vocab_size: 32,
        },
        stft: StftConfig {
            frame_len: 64,
            hop: 32,
            ..StftConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Dimensions used for the learning runs.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        text_dim: 16,
        spec_dim: 16,
        spec_hidden: 32,
        audio_dim: 32,
        audio_hidden: 32,
        grid: 4,
        frame_feat: 256,
        vocab_size: 64,
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        model: toy_model(),
        ..TrainConfig::default()
    }
}

pub fn synth(classes: usize, per_class: usize, seconds: f64, rate_hz: u32, seed: u64) -> Vec<DatasetRecord> {
    synth_dataset(&SynthConfig {
        classes,
        per_class,
        clip_seconds: seconds,
        rate_hz,
        seed,
    })
    .unwrap()
}

/// Prepared inputs and randomly initialized params for a grad check.
pub fn gradcheck_setup(cfg: &TrainConfig, n: usize, seed: u64) -> (Vec<PreparedExample>, ModelParams) {
    let data = synth(2, n.div_ceil(2), 0.05, 4000, seed);
    let vocab = build_training_vocab(cfg, &data).unwrap();
    let mut model = cfg.model;
    model.vocab_size = vocab.len();
    let cfg = TrainConfig { model, ..cfg.clone() };
    let ex = prepare_examples(&cfg, &vocab, &data).unwrap();
    (ex, init_params(&model, seed).unwrap())
}
