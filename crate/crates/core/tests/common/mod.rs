#![allow(dead_code)]

use rand::Rng;

use tse_lm::data::{synth_dataset, SynthConfig, SynthDataset};
use tse_lm::domain::{FeatureMatrix, LMConfig, SlotSpec, TokenSequence, VocabRegistry};
use tse_lm::lm::{ConditioningBundle, DecoderLM, Payload};
use tse_lm::seed;

pub const TGT: &str = "tgt";

/// A two-layer model small enough for exhaustive and finite-difference checks.
pub fn tiny_model(content_vocab: usize, eos: bool, seed: u64) -> DecoderLM {
    let config = LMConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ffn: 16,
        vocab_size: content_vocab + usize::from(eos),
        eos_id: eos.then_some(content_vocab as u32),
        max_positions: 64,
        target_vocab: TGT.into(),
        conditioning_slots: vec![SlotSpec::continuous("feat", 3), SlotSpec::discrete("ctx", "ctx", 5)],
    };
    let mut registry = VocabRegistry::new();
    registry.register(TGT, content_vocab).unwrap();
    registry.register("ctx", 5).unwrap();
    DecoderLM::new(config, registry, seed).unwrap()
}

pub fn tiny_bundle(seed: u64, frames: usize) -> ConditioningBundle {
    let mut rng = seed::rng(seed);
    let vals = (0..frames * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ids = (0..4).map(|_| rng.gen_range(0..5)).collect();
    ConditioningBundle::new()
        .with("feat", Payload::Continuous(FeatureMatrix::new(frames, 3, vals).unwrap()))
        .with("ctx", Payload::Discrete(TokenSequence::new("ctx", ids)))
}

pub fn tgt(ids: &[u32]) -> TokenSequence {
    TokenSequence::new(TGT, ids.to_vec())
}

/// `ln softmax(row)[y]`, computed independently of the library kernels.
pub fn log_prob_of(row: &[f64], y: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[y] - max - z.ln()
}

/// The pinned toy task: 16-frame targets, 8-frame references, 2000 examples.
pub fn toy_task() -> (SynthConfig, SynthDataset) {
    let sc = SynthConfig {
        frames: 16,
        ref_frames: 8,
        ..SynthConfig::default()
    };
    let data = synth_dataset(&sc, 2000, 7).unwrap();
    (sc, data)
}
