#![allow(dead_code)]

use vclip::corpus::{generate, CorpusConfig, GeneratedCorpus};
use vclip::encoder::EncoderConfig;
use vclip::numerics::AdamConfig;
use vclip::retrieval::RetrievalConfig;
use vclip::sampler::SamplerConfig;
use vclip::trainer::TrainConfig;

pub fn small_corpus(seed: u64, n_videos: usize) -> GeneratedCorpus {
    generate(&CorpusConfig {
        n_videos,
        n_eval_videos: 8,
        seed,
        ..CorpusConfig::default()
    })
    .unwrap()
}

/// A model small enough that a full epoch takes a fraction of a second.
pub fn tiny_config(g: &GeneratedCorpus) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        encoder: EncoderConfig {
            d_model: 16,
            n_layers_video: 1,
            n_layers_text: 1,
            n_heads: 2,
            d_ff: 32,
            ..EncoderConfig::default()
        },
        sampler: SamplerConfig {
            pairs_per_video: 2,
            ..SamplerConfig::default()
        },
        retrieval: RetrievalConfig {
            k: 4,
            clips_per_video: 1,
            ..RetrievalConfig::default()
        },
        optimizer: AdamConfig {
            lr: 2e-3,
            warmup_steps: 4,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
    .fit_to(&g.corpus)
}
