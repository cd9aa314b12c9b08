//! Small shared fixtures for unit tests.

use std::sync::Arc;

use crate::gridnav::{
    generate_suites, AudioConfig, EnvConfig, RenderConfig, SuiteParams, SuiteSet, TemplateBank,
};
use crate::net::ModelConfig;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        num_targets: 2,
        patch: 4,
        gru_hidden: 6,
        ffn_mult: 2,
        image: [8, 8, 3],
        audio: [8, 8, 2],
        ..ModelConfig::default()
    }
}

pub fn tiny_env() -> EnvConfig {
    EnvConfig {
        render: RenderConfig {
            height: 8,
            width: 8,
            view_width: 5,
            view_depth: 4,
        },
        audio: AudioConfig {
            freq_bins: 8,
            time_frames: 8,
            noise: 0.01,
        },
        ..EnvConfig::default()
    }
}

pub fn tiny_suites(seed: u64, max_steps: u32) -> (SuiteSet, Arc<TemplateBank>) {
    let set = generate_suites(&SuiteParams {
        seed,
        templates: 5,
        bins: 8,
        unheard_fraction: 0.2,
        size: 6,
        density: 0.1,
        max_steps,
        success_radius: 1,
        train_episodes: 12,
        eval_episodes: 6,
    })
    .unwrap();
    let bank = Arc::new(set.manifest.bank());
    (set, bank)
}
