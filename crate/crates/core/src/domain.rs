//! Domain types shared by every stage: token sequences, frame feature
//! matrices, training examples, vocabularies and model configuration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary name for k-means semantic tokens.
pub const SEMANTIC_VOCAB: &str = "semantic";
/// Vocabulary name for codec acoustic tokens.
pub const ACOUSTIC_VOCAB: &str = "acoustic";

/// A finite sequence of token ids drawn from a named vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub vocab_name: String,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(vocab_name: impl Into<String>, ids: Vec<u32>) -> Self {
        Self {
            vocab_name: vocab_name.into(),
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Check ids against `registry`, requiring the vocabulary `expected`.
    /// `field` names the value in diagnostics.
    pub fn validate(
        &self,
        registry: &VocabRegistry,
        expected: &str,
        field: &str,
        require_non_empty: bool,
    ) -> Result<()> {
        if self.vocab_name != expected {
            return Err(Error::invalid(
                format!("{field}.vocab_name"),
                format!("expected vocabulary `{expected}`, found `{}`", self.vocab_name),
            ));
        }
        let size = registry.size(&self.vocab_name).ok_or_else(|| {
            Error::invalid(
                format!("{field}.vocab_name"),
                format!("vocabulary `{}` is not registered", self.vocab_name),
            )
        })?;
        if require_non_empty && self.ids.is_empty() {
            return Err(Error::invalid(field, "empty sequence"));
        }
        if let Some((i, id)) = self.ids.iter().enumerate().find(|(_, &id)| id as usize >= size) {
            return Err(Error::invalid(
                format!("{field}.ids[{i}]"),
                format!("id out of range: {id} >= vocabulary size {size}"),
            ));
        }
        Ok(())
    }
}

/// Dense frame-level embeddings, row-major `frames x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    /// Build a matrix from row-major values. Only the shape is checked here;
    /// finiteness is checked by [`FeatureMatrix::validate`].
    pub fn new(frames: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature matrix must be non-empty, got {frames}x{dim}"
            )));
        }
        if values.len() != frames * dim {
            return Err(Error::Shape(format!(
                "feature matrix {frames}x{dim} needs {} values, got {}",
                frames * dim,
                values.len()
            )));
        }
        Ok(Self {
            frames,
            dim,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Mean over frames, one value per dimension.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = self.frames as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.frames == 0 || self.dim == 0 || self.values.len() != self.frames * self.dim {
            return Err(Error::invalid(field, "malformed shape"));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                field,
                format!(
                    "non-finite value at frame {}, dim {}",
                    i / self.dim,
                    i % self.dim
                ),
            ));
        }
        Ok(())
    }
}

/// One training or inference item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureExample {
    pub ref_features: FeatureMatrix,
    pub mix_features: FeatureMatrix,
    pub target_semantic: TokenSequence,
    pub target_acoustic: TokenSequence,
    pub acoustic_ref_features: FeatureMatrix,
    pub acoustic_mix_features: FeatureMatrix,
    pub metadata: BTreeMap<String, String>,
}

/// Return `ex` unchanged if every invariant holds, otherwise the first
/// violation found, with its field path.
pub fn validate_example(ex: MixtureExample, registry: &VocabRegistry) -> Result<MixtureExample> {
    ex.ref_features.validate("ref_features")?;
    ex.mix_features.validate("mix_features")?;
    ex.target_semantic
        .validate(registry, SEMANTIC_VOCAB, "target_semantic", true)?;
    ex.target_acoustic
        .validate(registry, ACOUSTIC_VOCAB, "target_acoustic", true)?;
    ex.acoustic_ref_features.validate("acoustic_ref_features")?;
    ex.acoustic_mix_features.validate("acoustic_mix_features")?;
    Ok(ex)
}

/// Vocabulary sizes by name. Models snapshot the registry at construction
/// and never mutate their copy.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRegistry {
    sizes: BTreeMap<String, usize>,
}

impl VocabRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the two standard streams.
    pub fn standard(semantic: usize, acoustic: usize) -> Result<Self> {
        let mut r = Self::new();
        r.register(SEMANTIC_VOCAB, semantic)?;
        r.register(ACOUSTIC_VOCAB, acoustic)?;
        Ok(r)
    }

    /// Register `name`. Re-registering with the same size is a no-op; a
    /// different size is an error.
    pub fn register(&mut self, name: &str, size: usize) -> Result<()> {
        if size == 0 {
            return Err(Error::Config(format!("vocabulary `{name}` must be non-empty")));
        }
        match self.sizes.get(name) {
            Some(&s) if s != size => Err(Error::Config(format!(
                "vocabulary `{name}` already registered with size {s}, not {size}"
            ))),
            _ => {
                self.sizes.insert(name.to_string(), size);
                Ok(())
            }
        }
    }

    pub fn size(&self, name: &str) -> Option<usize> {
        self.sizes.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.sizes.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// True if every vocabulary in `other` is registered here with the same size.
    pub fn covers(&self, other: &VocabRegistry) -> bool {
        other.iter().all(|(n, s)| self.size(n) == Some(s))
    }
}

/// How a conditioning slot is fed into the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    /// Frame embeddings of width `dim`, projected to the hidden size.
    Continuous { dim: usize },
    /// Token ids from vocabulary `vocab` of `size` entries, looked up in a table.
    Discrete { vocab: String, size: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub kind: SlotKind,
}

impl SlotSpec {
    pub fn continuous(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: SlotKind::Continuous { dim },
        }
    }

    pub fn discrete(name: impl Into<String>, vocab: impl Into<String>, size: usize) -> Self {
        Self {
            name: name.into(),
            kind: SlotKind::Discrete {
                vocab: vocab.into(),
                size,
            },
        }
    }
}

impl fmt::Display for SlotSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            SlotKind::Continuous { dim } => write!(f, "{}:continuous:{dim}", self.name),
            SlotKind::Discrete { vocab, size } => {
                write!(f, "{}:discrete:{vocab}:{size}", self.name)
            }
        }
    }
}

impl std::str::FromStr for SlotSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("malformed slot descriptor `{s}`"));
        match parts.as_slice() {
            [name, "continuous", dim] => Ok(SlotSpec::continuous(
                *name,
                dim.parse().map_err(|_| bad())?,
            )),
            [name, "discrete", vocab, size] => Ok(SlotSpec::discrete(
                *name,
                *vocab,
                size.parse().map_err(|_| bad())?,
            )),
            _ => Err(bad()),
        }
    }
}

/// Decoder LM hyperparameters.
///
/// `vocab_size` is the output-head width. When `eos_id` is set it is the
/// last id (`vocab_size - 1`) and is reserved for stopping; content tokens
/// are `0..vocab_size - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub eos_id: Option<u32>,
    pub max_positions: usize,
    pub target_vocab: String,
    pub conditioning_slots: Vec<SlotSpec>,
}

impl LMConfig {
    /// Desk-scale preset: 2 layers, 2 heads, hidden 64, 512 positions, with
    /// an end-of-sequence entry appended after `content_vocab` tokens.
    pub fn desk(target_vocab: &str, content_vocab: usize, slots: Vec<SlotSpec>) -> Result<Self> {
        Self::with_eos(2, 2, 64, 512, target_vocab, content_vocab, slots)
    }

    /// Full-scale preset: 12 layers, 8 heads, hidden 1024.
    pub fn full_scale(
        target_vocab: &str,
        content_vocab: usize,
        slots: Vec<SlotSpec>,
    ) -> Result<Self> {
        Self::with_eos(12, 8, 1024, 4096, target_vocab, content_vocab, slots)
    }

    pub fn with_eos(
        layers: usize,
        heads: usize,
        hidden: usize,
        max_positions: usize,
        target_vocab: &str,
        content_vocab: usize,
        slots: Vec<SlotSpec>,
    ) -> Result<Self> {
        let cfg = LMConfig {
            layers,
            heads,
            hidden,
            ffn: 4 * hidden,
            vocab_size: content_vocab + 1,
            eos_id: Some(content_vocab as u32),
            max_positions,
            target_vocab: target_vocab.to_string(),
            conditioning_slots: slots,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of content (non-EOS) tokens.
    pub fn content_vocab(&self) -> usize {
        self.vocab_size - usize::from(self.eos_id.is_some())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ffn == 0 {
            return Err(Error::Config("layers, heads, hidden and ffn must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if let Some(eos) = self.eos_id {
            if eos as usize + 1 != self.vocab_size {
                return Err(Error::Config(format!(
                    "eos id {eos} must be the last id of a {}-entry vocabulary",
                    self.vocab_size
                )));
            }
            if self.vocab_size < 2 {
                return Err(Error::Config("eos needs at least one content token".into()));
            }
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be at least 2".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for slot in &self.conditioning_slots {
            if !seen.insert(slot.name.as_str()) {
                return Err(Error::Config(format!("duplicate slot `{}`", slot.name)));
            }
            match &slot.kind {
                SlotKind::Continuous { dim } if *dim == 0 => {
                    return Err(Error::Config(format!("slot `{}` has zero dim", slot.name)))
                }
                SlotKind::Discrete { size, .. } if *size == 0 => {
                    return Err(Error::Config(format!("slot `{}` has empty vocab", slot.name)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(frames: usize, dim: usize) -> FeatureMatrix {
        FeatureMatrix::new(frames, dim, vec![0.5; frames * dim]).unwrap()
    }

    fn example() -> MixtureExample {
        MixtureExample {
            ref_features: fm(3, 2),
            mix_features: fm(4, 2),
            target_semantic: TokenSequence::new(SEMANTIC_VOCAB, vec![0, 1, 2, 3]),
            target_acoustic: TokenSequence::new(ACOUSTIC_VOCAB, vec![5, 6]),
            acoustic_ref_features: fm(3, 3),
            acoustic_mix_features: fm(4, 3),
            metadata: BTreeMap::new(),
        }
    }

    fn registry() -> VocabRegistry {
        VocabRegistry::standard(4, 8).unwrap()
    }

    #[test]
    fn nan_in_mixture_is_reported_by_field() {
        let mut ex = example();
        ex.mix_features.values_mut()[3] = f64::NAN;
        let err = validate_example(ex, &registry()).unwrap_err();
        assert!(err.to_string().contains("`mix_features`"), "{err}");
    }

    #[test]
    fn semantic_id_at_vocab_size_is_out_of_range() {
        let mut ex = example();
        ex.target_semantic.ids[2] = 4;
        let err = validate_example(ex, &registry()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("id out of range"), "{msg}");
        assert!(msg.contains("target_semantic.ids[2]"), "{msg}");
    }

    #[test]
    fn empty_target_and_cross_vocab_are_rejected() {
        let mut ex = example();
        ex.target_acoustic.ids.clear();
        assert!(validate_example(ex, &registry())
            .unwrap_err()
            .to_string()
            .contains("empty sequence"));

        let mut ex = example();
        ex.target_acoustic.vocab_name = SEMANTIC_VOCAB.into();
        assert!(validate_example(ex, &registry())
            .unwrap_err()
            .to_string()
            .contains("target_acoustic.vocab_name"));
    }

    #[test]
    fn valid_example_round_trips_unchanged() {
        let ex = example();
        assert_eq!(validate_example(ex.clone(), &registry()).unwrap(), ex);
    }

    #[test]
    fn hidden_must_divide_by_heads() {
        let err = LMConfig::with_eos(2, 3, 64, 128, SEMANTIC_VOCAB, 8, vec![]).unwrap_err();
        assert!(err.to_string().contains("divisible"));
        assert!(LMConfig::desk(SEMANTIC_VOCAB, 8, vec![]).is_ok());
        let full = LMConfig::full_scale(SEMANTIC_VOCAB, 1024, vec![]).unwrap();
        assert_eq!((full.layers, full.heads, full.hidden), (12, 8, 1024));
    }

    #[test]
    fn registry_rejects_conflicting_sizes() {
        let mut r = registry();
        assert!(r.register(SEMANTIC_VOCAB, 4).is_ok());
        assert!(r.register(SEMANTIC_VOCAB, 5).is_err());
    }

    #[test]
    fn slot_descriptors_parse_back() {
        for s in [
            SlotSpec::continuous("wavlm_ref", 16),
            SlotSpec::discrete("semantic", SEMANTIC_VOCAB, 16),
        ] {
            assert_eq!(s.to_string().parse::<SlotSpec>().unwrap(), s);
        }
    }
}
