//! Stage presets and conditioning assembly from examples.
//!
//! Slot names bind a model's conditioning slots to data sources:
//!
//! | slot               | source                                         |
//! |--------------------|------------------------------------------------|
//! | `wavlm_ref`        | reference SSL embeddings (continuous)          |
//! | `wavlm_mix`        | mixture SSL embeddings (continuous)            |
//! | `wavlm_ref_tokens` | reference embeddings quantized by k-means      |
//! | `wavlm_mix_tokens` | mixture embeddings quantized by k-means        |
//! | `semantic`         | target semantic tokens (ground truth or predicted) |
//! | `dac_ref`          | reference codec-encoder features (continuous)  |
//! | `dac_mix`          | mixture codec-encoder features (continuous)    |

use std::fmt;
use std::str::FromStr;

use crate::domain::{
    FeatureMatrix, LMConfig, MixtureExample, SlotSpec, TokenSequence, VocabRegistry, ACOUSTIC_VOCAB,
    SEMANTIC_VOCAB,
};
use crate::error::{Error, Result};
use crate::lm::{ConditioningBundle, Payload};
use crate::tokenize::Quantizer;

/// Which token stream a model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Semantic,
    Acoustic,
}

impl Stage {
    pub fn vocab(self) -> &'static str {
        match self {
            Stage::Semantic => SEMANTIC_VOCAB,
            Stage::Acoustic => ACOUSTIC_VOCAB,
        }
    }

    pub fn from_vocab(vocab: &str) -> Result<Self> {
        match vocab {
            SEMANTIC_VOCAB => Ok(Stage::Semantic),
            ACOUSTIC_VOCAB => Ok(Stage::Acoustic),
            other => Err(Error::Config(format!("no stage predicts vocabulary `{other}`"))),
        }
    }

    /// Ground-truth target of `ex` for this stage.
    pub fn target(self, ex: &MixtureExample) -> &TokenSequence {
        match self {
            Stage::Semantic => &ex.target_semantic,
            Stage::Acoustic => &ex.target_acoustic,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.vocab())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_vocab(s)
    }
}

/// Semantic stage: reference and mixture SSL embeddings.
pub fn semantic_slots(feature_dim: usize) -> Vec<SlotSpec> {
    vec![
        SlotSpec::continuous("wavlm_ref", feature_dim),
        SlotSpec::continuous("wavlm_mix", feature_dim),
    ]
}

/// Acoustic stage: target semantic tokens, then reference and mixture codec features.
pub fn acoustic_slots(semantic_vocab: usize, codec_feature_dim: usize) -> Vec<SlotSpec> {
    vec![
        SlotSpec::discrete("semantic", SEMANTIC_VOCAB, semantic_vocab),
        SlotSpec::continuous("dac_ref", codec_feature_dim),
        SlotSpec::continuous("dac_mix", codec_feature_dim),
    ]
}

/// Acoustic model without a semantic stage: codec features only.
pub fn acoustic_only_slots(codec_feature_dim: usize) -> Vec<SlotSpec> {
    vec![
        SlotSpec::continuous("dac_ref", codec_feature_dim),
        SlotSpec::continuous("dac_mix", codec_feature_dim),
    ]
}

/// Desk-scale model config for `stage` with the given slots.
pub fn desk_config(stage: Stage, registry: &VocabRegistry, slots: Vec<SlotSpec>) -> Result<LMConfig> {
    let vocab = registry
        .size(stage.vocab())
        .ok_or_else(|| Error::Config(format!("vocabulary `{}` not registered", stage.vocab())))?;
    LMConfig::desk(stage.vocab(), vocab, slots)
}

/// Everything a conditioning slot may draw from.
#[derive(Debug, Clone, Copy)]
pub struct StageInputs<'a> {
    pub ref_features: &'a FeatureMatrix,
    pub mix_features: &'a FeatureMatrix,
    pub semantic: Option<&'a TokenSequence>,
    pub acoustic_ref_features: &'a FeatureMatrix,
    pub acoustic_mix_features: &'a FeatureMatrix,
    pub quantizer: Option<&'a Quantizer>,
}

impl<'a> StageInputs<'a> {
    /// Inputs of a training example, with ground-truth semantic tokens.
    pub fn from_example(ex: &'a MixtureExample) -> Self {
        Self {
            ref_features: &ex.ref_features,
            mix_features: &ex.mix_features,
            semantic: Some(&ex.target_semantic),
            acoustic_ref_features: &ex.acoustic_ref_features,
            acoustic_mix_features: &ex.acoustic_mix_features,
            quantizer: None,
        }
    }
}

/// Build the bundle for `config`'s slots, in slot order.
pub fn build_bundle(config: &LMConfig, inputs: &StageInputs<'_>) -> Result<ConditioningBundle> {
    let quantized = |f: &FeatureMatrix| -> Result<Payload> {
        let q = inputs
            .quantizer
            .ok_or_else(|| Error::Config("token conditioning needs a quantizer".into()))?;
        Ok(Payload::Discrete(q.quantize(f)?))
    };
    let mut bundle = ConditioningBundle::new();
    for slot in &config.conditioning_slots {
        let payload = match slot.name.as_str() {
            "wavlm_ref" => Payload::Continuous(inputs.ref_features.clone()),
            "wavlm_mix" => Payload::Continuous(inputs.mix_features.clone()),
            "wavlm_ref_tokens" => quantized(inputs.ref_features)?,
            "wavlm_mix_tokens" => quantized(inputs.mix_features)?,
            "semantic" => Payload::Discrete(
                inputs
                    .semantic
                    .ok_or_else(|| Error::Config("slot `semantic` needs semantic tokens".into()))?
                    .clone(),
            ),
            "dac_ref" => Payload::Continuous(inputs.acoustic_ref_features.clone()),
            "dac_mix" => Payload::Continuous(inputs.acoustic_mix_features.clone()),
            other => return Err(Error::Config(format!("unknown conditioning slot `{other}`"))),
        };
        bundle.segments.push((slot.name.clone(), payload));
    }
    Ok(bundle)
}

/// Bundle for a training example (ground-truth semantic conditioning).
pub fn example_bundle(config: &LMConfig, ex: &MixtureExample) -> Result<ConditioningBundle> {
    build_bundle(config, &StageInputs::from_example(ex))
}

/// Target ids of `ex` for a model, with the end-of-sequence id appended
/// when the model has one.
pub fn target_ids(config: &LMConfig, ex: &MixtureExample) -> Result<Vec<u32>> {
    let stage = Stage::from_vocab(&config.target_vocab)?;
    let mut ids = stage.target(ex).ids.clone();
    if let Some(eos) = config.eos_id {
        ids.push(eos);
    }
    Ok(ids)
}
