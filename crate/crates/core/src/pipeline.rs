//! Two-stage extraction: semantic tokens from SSL features, acoustic tokens
//! from those plus codec features, then codec decoding.

use crate::data::FeatureFile;
use crate::domain::{FeatureMatrix, TokenSequence, SEMANTIC_VOCAB};
use crate::error::{Error, Result};
use crate::lm::{generate, DecoderLM, Generation, Strategy};
use crate::seed;
use crate::stage::{build_bundle, Stage, StageInputs};
use crate::tokenize::{Codec, FeatureExtractor, Quantizer};

/// Conditioning features of one side (reference or mixture) from a waveform.
pub fn features_from_waveform(
    waveform: &[f64],
    extractor: &dyn FeatureExtractor,
    codec: &dyn Codec,
) -> Result<FeatureFile> {
    Ok(FeatureFile {
        semantic: extractor.extract(waveform)?,
        acoustic: codec.frame_features(waveform)?,
    })
}

/// Outputs and intermediates of one extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    /// Stage-1 output; `None` for an acoustic-only model.
    pub semantic: Option<Generation>,
    pub acoustic: Generation,
    pub waveform: Vec<f64>,
}

fn stage_strategy(strategy: &Strategy, label: &str) -> Strategy {
    match *strategy {
        Strategy::Greedy => Strategy::Greedy,
        Strategy::TopK { k, temperature, seed: s } => Strategy::TopK {
            k,
            temperature,
            seed: seed::split(s, label),
        },
    }
}

fn inputs<'a>(
    reference: &'a FeatureFile,
    mixture: &'a FeatureFile,
    semantic: Option<&'a TokenSequence>,
    quantizer: Option<&'a Quantizer>,
) -> StageInputs<'a> {
    StageInputs {
        ref_features: &reference.semantic,
        mix_features: &mixture.semantic,
        semantic,
        acoustic_ref_features: &reference.acoustic,
        acoustic_mix_features: &mixture.acoustic,
        quantizer,
    }
}

fn check_stage(model: &DecoderLM, stage: Stage, which: &str) -> Result<()> {
    if model.config().target_vocab != stage.vocab() {
        return Err(Error::Checkpoint(format!(
            "{which} checkpoint predicts `{}`, expected `{}`",
            model.config().target_vocab,
            stage.vocab()
        )));
    }
    Ok(())
}

fn length_ceiling(frames: &FeatureMatrix) -> usize {
    2 * frames.frames().max(1)
}

/// Stage 2 alone: acoustic tokens and waveform from given semantic tokens
/// (`None` for a model without a semantic slot).
pub fn extract_acoustic(
    acoustic: &DecoderLM,
    semantic: Option<&TokenSequence>,
    reference: &FeatureFile,
    mixture: &FeatureFile,
    codec: &dyn Codec,
    quantizer: Option<&Quantizer>,
    strategy: &Strategy,
) -> Result<(Generation, Vec<f64>)> {
    check_stage(acoustic, Stage::Acoustic, "acoustic")?;
    if codec.codebook_size() != acoustic.config().content_vocab() {
        return Err(Error::Checkpoint(format!(
            "codec has {} codes but the acoustic model predicts {}",
            codec.codebook_size(),
            acoustic.config().content_vocab()
        )));
    }
    let cond = build_bundle(acoustic.config(), &inputs(reference, mixture, semantic, quantizer))?;
    let out = generate(
        acoustic,
        &cond,
        &stage_strategy(strategy, "acoustic"),
        length_ceiling(&mixture.acoustic),
        acoustic.config().eos_id,
    )?;
    let waveform = codec.decode(&out.tokens)?;
    Ok((out, waveform))
}

/// Full two-stage extraction.
pub fn extract(
    semantic: &DecoderLM,
    acoustic: &DecoderLM,
    reference: &FeatureFile,
    mixture: &FeatureFile,
    codec: &dyn Codec,
    quantizer: Option<&Quantizer>,
    strategy: &Strategy,
) -> Result<Extraction> {
    check_stage(semantic, Stage::Semantic, "semantic")?;
    if !acoustic.config().conditioning_slots.iter().any(|s| s.name == "semantic") {
        return Err(Error::Checkpoint(
            "acoustic checkpoint has no semantic slot; use acoustic-only extraction".into(),
        ));
    }
    let (sem_size, aco_size) = (
        semantic.registry().size(SEMANTIC_VOCAB),
        acoustic.registry().size(SEMANTIC_VOCAB),
    );
    if sem_size != aco_size {
        return Err(Error::Checkpoint(format!(
            "semantic vocabulary sizes differ between checkpoints: {sem_size:?} vs {aco_size:?}"
        )));
    }
    let cond = build_bundle(semantic.config(), &inputs(reference, mixture, None, quantizer))?;
    let s_bar = generate(
        semantic,
        &cond,
        &stage_strategy(strategy, "semantic"),
        length_ceiling(&mixture.semantic),
        semantic.config().eos_id,
    )?;
    if s_bar.tokens.is_empty() {
        return Err(Error::invalid("semantic", "stage 1 produced no tokens"));
    }
    let (a_bar, waveform) =
        extract_acoustic(acoustic, Some(&s_bar.tokens), reference, mixture, codec, quantizer, strategy)?;
    Ok(Extraction {
        semantic: Some(s_bar),
        acoustic: a_bar,
        waveform,
    })
}

/// Extraction with an acoustic-only model (no semantic stage).
pub fn extract_acoustic_only(
    acoustic: &DecoderLM,
    reference: &FeatureFile,
    mixture: &FeatureFile,
    codec: &dyn Codec,
    strategy: &Strategy,
) -> Result<Extraction> {
    let (a_bar, waveform) = extract_acoustic(acoustic, None, reference, mixture, codec, None, strategy)?;
    Ok(Extraction {
        semantic: None,
        acoustic: a_bar,
        waveform,
    })
}
