//! Synthetic two-speaker mixtures and manifest files.
//!
//! Each synthetic speaker is a Markov chain over the semantic vocabulary
//! plus a private token-to-frame embedding table and a voice offset. A
//! mixture overlays the target's walk and an interferer's walk frame by
//! frame; the reference is an independent walk of the target speaker.
//! Waveforms render each token as a constant-amplitude frame, so acoustic
//! tokens are a deterministic function of semantic tokens.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureMatrix, MixtureExample, TokenSequence, VocabRegistry, SEMANTIC_VOCAB};
use crate::error::{Error, Result};
use crate::seed;
use crate::tokenize::{Codec, ToyCodec};
use crate::wav;

/// Successor states per transition row.
const BRANCHING: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub speaker_id: String,
    pub vocab_size: usize,
    pub hidden: usize,
    /// Row-stochastic `vocab_size x vocab_size`, row-major.
    pub transition: Vec<f64>,
    /// `vocab_size x hidden`, row-major.
    pub embedding_table: Vec<f64>,
    pub voice_offset: Vec<f64>,
}

impl SyntheticSpeaker {
    pub fn transition_row(&self, from: u32) -> &[f64] {
        let v = self.vocab_size;
        &self.transition[from as usize * v..(from as usize + 1) * v]
    }

    /// Frame embedding of `token` in this speaker's voice.
    pub fn embed(&self, token: u32) -> Vec<f64> {
        let h = self.hidden;
        self.embedding_table[token as usize * h..(token as usize + 1) * h]
            .iter()
            .zip(&self.voice_offset)
            .map(|(e, o)| e + o)
            .collect()
    }

    /// Markov walk of `len` tokens starting from a uniform state.
    pub fn walk(&self, len: usize, seed: u64) -> Vec<u32> {
        let mut rng = seed::rng(seed);
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.gen_range(0..self.vocab_size) as u32;
        for i in 0..len {
            if i > 0 {
                let u: f64 = rng.gen();
                let row = self.transition_row(cur);
                let mut acc = 0.0;
                // Rounding can leave `u` above the final cumulative sum.
                let mut next = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
                for (j, &p) in row.iter().enumerate() {
                    acc += p;
                    if p > 0.0 && u < acc {
                        next = j;
                        break;
                    }
                }
                cur = next as u32;
            }
            out.push(cur);
        }
        out
    }

    pub fn embed_walk(&self, walk: &[u32]) -> Result<FeatureMatrix> {
        let values = walk.iter().flat_map(|&t| self.embed(t)).collect();
        FeatureMatrix::new(walk.len(), self.hidden, values)
    }
}

pub fn synth_speakers(
    num_speakers: usize,
    vocab_size: usize,
    hidden: usize,
    seed: u64,
) -> Result<Vec<SyntheticSpeaker>> {
    if num_speakers < 2 {
        return Err(Error::invalid(
            "num_speakers",
            "need at least 2 speakers to form a mixture",
        ));
    }
    if vocab_size < 2 {
        return Err(Error::invalid("vocab_size", "need at least 2 tokens"));
    }
    if hidden == 0 {
        return Err(Error::invalid("hidden", "must be positive"));
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    (0..num_speakers)
        .map(|s| {
            let mut rng = seed::rng(seed::split_index(seed, "speaker", s as u64));
            let branching = BRANCHING.min(vocab_size);
            let mut transition = vec![0.0; vocab_size * vocab_size];
            let states: Vec<usize> = (0..vocab_size).collect();
            for row in transition.chunks_exact_mut(vocab_size) {
                let succ: Vec<usize> = states.choose_multiple(&mut rng, branching).copied().collect();
                let weights: Vec<f64> = succ.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                for (&j, w) in succ.iter().zip(&weights) {
                    row[j] = w / total;
                }
            }
            let embedding_table = (0..vocab_size * hidden).map(|_| unit.sample(&mut rng)).collect();
            let voice_offset = (0..hidden).map(|_| 0.5 * unit.sample(&mut rng)).collect();
            Ok(SyntheticSpeaker {
                speaker_id: format!("spk{s:03}"),
                vocab_size,
                hidden,
                transition,
                embedding_table,
                voice_offset,
            })
        })
        .collect()
}

/// Render a semantic walk as constant-amplitude frames of `frame_len`
/// samples at `(id + 1) / (vocab_size + 1)`.
pub fn render_walk(walk: &[u32], vocab_size: usize, frame_len: usize) -> Vec<f64> {
    let scale = 1.0 / (vocab_size as f64 + 1.0);
    walk.iter()
        .flat_map(|&t| std::iter::repeat((f64::from(t) + 1.0) * scale).take(frame_len))
        .collect()
}

/// Seeds for each random stream of one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleSeeds {
    pub target_walk: u64,
    pub interferer_walk: u64,
    pub reference_walk: u64,
    pub noise: u64,
}

impl ExampleSeeds {
    pub fn from_root(seed: u64) -> Self {
        Self {
            target_walk: seed::split(seed, "target_walk"),
            interferer_walk: seed::split(seed, "interferer_walk"),
            reference_walk: seed::split(seed, "reference_walk"),
            noise: seed::split(seed, "noise"),
        }
    }
}

/// Waveforms behind one synthetic example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleAudio {
    pub target: Vec<f64>,
    pub reference: Vec<f64>,
    pub mixture: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn synth_example(
    target: &SyntheticSpeaker,
    interferer: &SyntheticSpeaker,
    frames: usize,
    ref_frames: usize,
    noise_std: f64,
    seed: u64,
    codec: &dyn Codec,
) -> Result<MixtureExample> {
    synth_example_with_audio(
        target,
        interferer,
        frames,
        ref_frames,
        noise_std,
        ExampleSeeds::from_root(seed),
        codec,
    )
    .map(|(ex, _)| ex)
}

pub fn synth_example_with_audio(
    target: &SyntheticSpeaker,
    interferer: &SyntheticSpeaker,
    frames: usize,
    ref_frames: usize,
    noise_std: f64,
    seeds: ExampleSeeds,
    codec: &dyn Codec,
) -> Result<(MixtureExample, ExampleAudio)> {
    if frames < 2 || ref_frames < 2 {
        return Err(Error::invalid("frames", "need at least 2 frames"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise_std", "must be finite and non-negative"));
    }
    if target.vocab_size != interferer.vocab_size || target.hidden != interferer.hidden {
        return Err(Error::Shape("speakers disagree on vocab or hidden size".into()));
    }
    let v = target.vocab_size;
    let tw = target.walk(frames, seeds.target_walk);
    let iw = interferer.walk(frames, seeds.interferer_walk);
    let rw = target.walk(ref_frames, seeds.reference_walk);

    let mut rng = seed::rng(seeds.noise);
    let noise = Normal::new(0.0, noise_std).expect("valid normal");
    let mut mix_features = target.embed_walk(&tw)?;
    let interf = interferer.embed_walk(&iw)?;
    for (m, i) in mix_features.values_mut().iter_mut().zip(interf.values()) {
        *m += i;
        if noise_std > 0.0 {
            *m += noise.sample(&mut rng);
        }
    }
    let ref_features = target.embed_walk(&rw)?;

    let frame_len = codec.samples_per_token();
    let target_wave = render_walk(&tw, v, frame_len);
    let reference_wave = render_walk(&rw, v, frame_len);
    let mut mixture_wave = render_walk(&iw, v, frame_len);
    for (m, t) in mixture_wave.iter_mut().zip(&target_wave) {
        *m += t;
        if noise_std > 0.0 {
            *m += noise.sample(&mut rng);
        }
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("target_speaker".into(), target.speaker_id.clone());
    metadata.insert("interferer_speaker".into(), interferer.speaker_id.clone());
    metadata.insert("target_walk_seed".into(), seeds.target_walk.to_string());

    let ex = MixtureExample {
        ref_features,
        mix_features,
        target_semantic: TokenSequence::new(SEMANTIC_VOCAB, tw),
        target_acoustic: codec.encode(&target_wave)?,
        acoustic_ref_features: codec.frame_features(&reference_wave)?,
        acoustic_mix_features: codec.frame_features(&mixture_wave)?,
        metadata,
    };
    Ok((
        ex,
        ExampleAudio {
            target: target_wave,
            reference: reference_wave,
            mixture: mixture_wave,
        },
    ))
}

// ---------------------------------------------------------------------------
// Synthetic datasets

/// Parameters of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub semantic_vocab: usize,
    pub feature_dim: usize,
    pub frames: usize,
    pub ref_frames: usize,
    pub noise_std: f64,
    pub codec_frame_len: usize,
    pub codec_levels: usize,
    pub codec_feature_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let codec = ToyCodec::default();
        Self {
            num_speakers: 2,
            semantic_vocab: 16,
            feature_dim: 32,
            frames: 32,
            ref_frames: 32,
            noise_std: 0.05,
            codec_frame_len: codec.frame_len,
            codec_levels: codec.levels,
            codec_feature_dim: codec.feature_dim,
        }
    }
}

impl SynthConfig {
    pub fn codec(&self) -> ToyCodec {
        ToyCodec {
            frame_len: self.codec_frame_len,
            levels: self.codec_levels,
            feature_dim: self.codec_feature_dim,
        }
    }

    pub fn registry(&self) -> Result<VocabRegistry> {
        VocabRegistry::standard(self.semantic_vocab, self.codec_levels)
    }
}

/// A generated task: its speakers plus examples split into train and validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub speakers: Vec<SyntheticSpeaker>,
    pub train: Vec<MixtureExample>,
    pub validation: Vec<MixtureExample>,
}

/// True for the 5% of example indices held out for validation.
pub fn is_validation_index(i: usize) -> bool {
    i % 20 == 19
}

pub fn synth_dataset(config: &SynthConfig, num_examples: usize, seed: u64) -> Result<SynthDataset> {
    let (speakers, all) = synth_examples(config, num_examples, seed)?;
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (i, ex) in all.into_iter().enumerate() {
        if is_validation_index(i) {
            validation.push(ex.0);
        } else {
            train.push(ex.0);
        }
    }
    Ok(SynthDataset {
        config: config.clone(),
        speakers,
        train,
        validation,
    })
}

#[allow(clippy::type_complexity)]
fn synth_examples(
    config: &SynthConfig,
    num_examples: usize,
    seed: u64,
) -> Result<(Vec<SyntheticSpeaker>, Vec<(MixtureExample, ExampleAudio)>)> {
    let speakers = synth_speakers(
        config.num_speakers,
        config.semantic_vocab,
        config.feature_dim,
        seed::split(seed, "speakers"),
    )?;
    let codec = config.codec();
    let examples = (0..num_examples)
        .map(|i| {
            let ex_seed = seed::split_index(seed, "example", i as u64);
            let mut rng = seed::rng(seed::split(ex_seed, "roles"));
            let t = rng.gen_range(0..speakers.len());
            let mut j = rng.gen_range(0..speakers.len() - 1);
            if j >= t {
                j += 1;
            }
            synth_example_with_audio(
                &speakers[t],
                &speakers[j],
                config.frames,
                config.ref_frames,
                config.noise_std,
                ExampleSeeds::from_root(ex_seed),
                &codec,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((speakers, examples))
}

/// Continuous inputs of one utterance side (reference or mixture) as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub semantic: FeatureMatrix,
    pub acoustic: FeatureMatrix,
}

impl FeatureFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const SPEAKERS_FILE: &str = "speakers.json";
pub const SYNTH_CONFIG_FILE: &str = "synth.json";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Generate a task and write it to `dir`: examples, speakers, config, a
/// manifest and, per example, reference/mixture feature files plus the
/// target waveform.
pub fn write_synth_dataset(
    dir: &Path,
    config: &SynthConfig,
    num_examples: usize,
    seed: u64,
) -> Result<SynthDataset> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (speakers, all) = synth_examples(config, num_examples, seed)?;
    let items = dir.join("items");
    fs::create_dir_all(&items).map_err(|e| Error::io(&items, e))?;
    let mut lines = String::new();
    let mut manifest = Manifest::default();
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (i, (ex, audio)) in all.into_iter().enumerate() {
        let split = if is_validation_index(i) { "val" } else { "train" };
        let mut ex = ex;
        ex.metadata.insert("split".into(), split.into());
        ex.metadata.insert("index".into(), i.to_string());
        let stem = items.join(format!("{i:05}"));
        let entry = ManifestEntry {
            mixture_path: stem.with_extension("mix.json"),
            reference_path: stem.with_extension("ref.json"),
            target_path: stem.with_extension("target.wav"),
        };
        FeatureFile {
            semantic: ex.mix_features.clone(),
            acoustic: ex.acoustic_mix_features.clone(),
        }
        .save(&entry.mixture_path)?;
        FeatureFile {
            semantic: ex.ref_features.clone(),
            acoustic: ex.acoustic_ref_features.clone(),
        }
        .save(&entry.reference_path)?;
        wav::write_wav(&entry.target_path, &audio.target)?;
        manifest.entries.push(entry);
        lines.push_str(&serde_json::to_string(&ex)?);
        lines.push('\n');
        if split == "val" {
            validation.push(ex);
        } else {
            train.push(ex);
        }
    }
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(EXAMPLES_FILE, lines)?;
    write(SPEAKERS_FILE, serde_json::to_string(&speakers)?)?;
    write(SYNTH_CONFIG_FILE, serde_json::to_string_pretty(config)?)?;
    save_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(SynthDataset {
        config: config.clone(),
        speakers,
        train,
        validation,
    })
}

/// Load a dataset directory written by [`write_synth_dataset`].
pub fn load_synth_dataset(dir: &Path) -> Result<SynthDataset> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let config: SynthConfig = serde_json::from_str(&read(SYNTH_CONFIG_FILE)?)?;
    let speakers = serde_json::from_str(&read(SPEAKERS_FILE)?)?;
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for line in read(EXAMPLES_FILE)?.lines().filter(|l| !l.trim().is_empty()) {
        let ex: MixtureExample = serde_json::from_str(line)?;
        if ex.metadata.get("split").map(String::as_str) == Some("val") {
            validation.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok(SynthDataset {
        config,
        speakers,
        train,
        validation,
    })
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub mixture_path: PathBuf,
    pub reference_path: PathBuf,
    pub target_path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_FIELDS: [&str; 3] = ["mixture_path", "reference_path", "target_path"];

/// Parse `mixture<TAB>reference<TAB>target` lines, skipping blank lines.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() > 3 {
            return Err(err(format!(
                "malformed record: expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        for (k, name) in MANIFEST_FIELDS.iter().enumerate() {
            if fields.get(k).map_or(true, |f| f.trim().is_empty()) {
                return Err(err(format!("missing field `{name}`")));
            }
        }
        entries.push(ManifestEntry {
            mixture_path: fields[0].into(),
            reference_path: fields[1].into(),
            target_path: fields[2].into(),
        });
    }
    Ok(Manifest { entries })
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut s = String::new();
    for e in &manifest.entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            e.mixture_path.display(),
            e.reference_path.display(),
            e.target_path.display()
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_example;

    fn speakers(seed: u64) -> Vec<SyntheticSpeaker> {
        synth_speakers(2, 8, 16, seed).unwrap()
    }

    #[test]
    fn speakers_are_seed_deterministic() {
        assert_eq!(speakers(7), speakers(7));
        assert_ne!(speakers(7)[0].transition, speakers(8)[0].transition);
        let s = speakers(7);
        assert_ne!(s[0].transition, s[1].transition);
        assert_ne!(s[0].voice_offset, s[1].voice_offset);
        assert!(synth_speakers(1, 8, 16, 0).is_err());
        assert!(synth_speakers(2, 1, 16, 0).is_err());
    }

    #[test]
    fn transition_rows_are_stochastic() {
        for spk in synth_speakers(5, 13, 4, 99).unwrap() {
            for r in 0..13 {
                let sum: f64 = spk.transition_row(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9, "row {r} sums to {sum}");
            }
        }
    }

    #[test]
    fn degenerate_overlap_doubles_target() {
        let s = speakers(3);
        let codec = ToyCodec::default();
        let seeds = ExampleSeeds {
            target_walk: 11,
            interferer_walk: 11,
            reference_walk: 12,
            noise: 13,
        };
        let (ex, _) = synth_example_with_audio(&s[0], &s[0], 10, 6, 0.0, seeds, &codec).unwrap();
        let single = s[0].embed_walk(&ex.target_semantic.ids).unwrap();
        for (m, t) in ex.mix_features.values().iter().zip(single.values()) {
            assert_eq!(*m, 2.0 * t);
        }
    }

    #[test]
    fn example_is_deterministic_and_follows_transitions() {
        let s = speakers(4);
        let codec = ToyCodec::default();
        let a = synth_example(&s[0], &s[1], 40, 20, 0.1, 5, &codec).unwrap();
        let b = synth_example(&s[0], &s[1], 40, 20, 0.1, 5, &codec).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for w in a.target_semantic.ids.windows(2) {
            assert!(s[0].transition_row(w[0])[w[1] as usize] > 0.0);
        }
        assert_eq!(a.ref_features.frames(), 20);
        assert_eq!(a.target_acoustic.len(), 40);
        let reg = VocabRegistry::standard(8, codec.levels).unwrap();
        assert_eq!(validate_example(a.clone(), &reg).unwrap(), a);
    }

    #[test]
    fn noiseless_mixture_is_separable_by_brute_force() {
        let s = speakers(21);
        let codec = ToyCodec::default();
        let seeds = ExampleSeeds::from_root(8);
        let (ex, _) = synth_example_with_audio(&s[0], &s[1], 12, 4, 0.0, seeds, &codec).unwrap();
        let iw = s[1].walk(12, seeds.interferer_walk);
        for t in 0..12 {
            let frame = ex.mix_features.row(t);
            let mut best = (0, 0, f64::INFINITY);
            for a in 0..8 {
                for b in 0..8 {
                    let ea = s[0].embed(a);
                    let eb = s[1].embed(b);
                    let d: f64 = frame
                        .iter()
                        .zip(ea.iter().zip(&eb))
                        .map(|(m, (x, y))| (m - x - y).powi(2))
                        .sum();
                    if d < best.2 {
                        best = (a, b, d);
                    }
                }
            }
            assert_eq!((best.0, best.1), (ex.target_semantic.ids[t], iw[t]));
        }
    }

    #[test]
    fn manifest_parsing() {
        let p = Path::new("m.tsv");
        assert!(parse_manifest("", p).unwrap().entries.is_empty());
        let m = parse_manifest("/a\t/b\t/c\n\n/d\t/e\t/f\n/g\t/h\t/i\n", p).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[1].reference_path, PathBuf::from("/e"));
        let err = parse_manifest("/a\t/b\t/c\n/d\n", p).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("reference_path"), "{err}");
        let err = parse_manifest("/a\t/b\n", p).unwrap_err().to_string();
        assert!(err.contains("target_path"), "{err}");
        assert!(parse_manifest("/a\t/b\t/c\t/d\n", p).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            entries: (0..3)
                .map(|i| ManifestEntry {
                    mixture_path: format!("/x/{i}.mix").into(),
                    reference_path: format!("/x/{i}.ref").into(),
                    target_path: format!("/x/{i}.wav").into(),
                })
                .collect(),
        };
        let p = dir.path().join("m.tsv");
        save_manifest(&p, &m).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            frames: 6,
            ref_frames: 4,
            ..SynthConfig::default()
        };
        let written = write_synth_dataset(dir.path(), &cfg, 21, 1).unwrap();
        assert_eq!(written.validation.len(), 1);
        let loaded = load_synth_dataset(dir.path()).unwrap();
        assert_eq!(loaded, written);
        let m = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.entries.len(), 21);
        let f = FeatureFile::load(&m.entries[0].reference_path).unwrap();
        assert_eq!(f.semantic, written.train[0].ref_features);
    }
}
