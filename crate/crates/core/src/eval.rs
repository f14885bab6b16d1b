//! Evaluation: exposure-bias accuracies, token error rate, speaker-proxy
//! similarity, metric reports and external metric plugins.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use crate::domain::{FeatureMatrix, MixtureExample, TokenSequence};
use crate::error::{Error, Result};
use crate::lm::{generate, kernels, DecoderLM, Strategy};
use crate::stage::{self, Stage};

/// Fraction of target positions where the teacher-forced argmax equals the
/// ground-truth token. The end-of-sequence position is not counted.
pub fn teacher_forced_accuracy(model: &DecoderLM, examples: &[MixtureExample]) -> Result<f64> {
    let stage = Stage::from_vocab(&model.config().target_vocab)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for ex in examples {
        let cond = stage::example_bundle(model.config(), ex)?;
        let target = stage.target(ex);
        let logits = model.forward_teacher_forced(&cond, target)?;
        for (t, &y) in target.ids.iter().enumerate() {
            hits += usize::from(kernels::argmax(logits.row(t)) == y as usize);
            total += 1;
        }
    }
    Ok(ratio(hits, total))
}

/// Greedy generation scored position by position against the ground truth
/// over the shorter of the two lengths.
pub fn autoregressive_accuracy(model: &DecoderLM, examples: &[MixtureExample]) -> Result<f64> {
    let stage = Stage::from_vocab(&model.config().target_vocab)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for ex in examples {
        let cond = stage::example_bundle(model.config(), ex)?;
        let target = stage.target(ex);
        let out = generate(model, &cond, &Strategy::Greedy, target.len().max(1), model.config().eos_id)?;
        for (a, b) in out.tokens.ids.iter().zip(&target.ids) {
            hits += usize::from(a == b);
            total += 1;
        }
    }
    Ok(ratio(hits, total))
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Unit-cost edit distance between `pred` and `truth`, over the truth length.
pub fn token_error_rate(pred: &TokenSequence, truth: &TokenSequence) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("truth", "empty reference sequence"));
    }
    Ok(edit_distance(&pred.ids, &truth.ids) as f64 / truth.len() as f64)
}

pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let (a, b) = (&a.to_vec(), &b.to_vec());
    strsim::generic_levenshtein(a, b)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("vector", "zero vector has no direction"));
    }
    Ok((kernels::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Speaker-proxy embedding: the mean frame feature.
pub fn speaker_embedding(features: &FeatureMatrix) -> Vec<f64> {
    features.mean_row()
}

// ---------------------------------------------------------------------------
// Reports

/// Ordered `name<TAB>value` metric records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, f64)>,
}

impl Report {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|(n, v)| format!("{n}\t{v:?}\n")).collect()
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected `name<TAB>value`".into(),
            };
            let (name, value) = line.split_once('\t').ok_or_else(bad)?;
            entries.push((name.to_string(), value.parse().map_err(|_| bad())?));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    /// Aligned two-column table for terminals.
    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (n, v) in &self.entries {
            let _ = writeln!(out, "{n:<width$}  {v:.4}");
        }
        out
    }
}

/// Teacher-forced and autoregressive accuracy of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyPair {
    pub tf: f64,
    pub ar: f64,
}

impl AccuracyPair {
    pub fn measure(model: &DecoderLM, examples: &[MixtureExample]) -> Result<Self> {
        Ok(Self {
            tf: teacher_forced_accuracy(model, examples)?,
            ar: autoregressive_accuracy(model, examples)?,
        })
    }

    pub fn gap(&self) -> f64 {
        self.tf - self.ar
    }
}

/// Exposure-bias comparison of a frozen model and its FLC fine-tune.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub frozen: AccuracyPair,
    pub flc: AccuracyPair,
}

impl GapReport {
    pub fn report(&self) -> Report {
        let mut r = Report::default();
        for (tag, acc) in [("frozen", self.frozen), ("flc", self.flc)] {
            r.push(format!("{tag}.tf_accuracy"), acc.tf);
            r.push(format!("{tag}.ar_accuracy"), acc.ar);
            r.push(format!("{tag}.gap"), acc.gap());
        }
        r.push("delta.tf_accuracy", self.flc.tf - self.frozen.tf);
        r.push("delta.ar_accuracy", self.flc.ar - self.frozen.ar);
        r.push("delta.gap", self.flc.gap() - self.frozen.gap());
        r
    }

    pub fn from_report(r: &Report) -> Result<Self> {
        let get = |k: &str| {
            r.get(k)
                .ok_or_else(|| Error::Config(format!("gap report lacks `{k}`")))
        };
        Ok(Self {
            frozen: AccuracyPair {
                tf: get("frozen.tf_accuracy")?,
                ar: get("frozen.ar_accuracy")?,
            },
            flc: AccuracyPair {
                tf: get("flc.tf_accuracy")?,
                ar: get("flc.ar_accuracy")?,
            },
        })
    }
}

pub fn gap_report(frozen: &DecoderLM, flc: &DecoderLM, examples: &[MixtureExample]) -> Result<GapReport> {
    if !frozen.compatible_with(flc) {
        return Err(Error::Checkpoint("frozen and FLC checkpoints are incompatible".into()));
    }
    if examples.is_empty() {
        return Err(Error::invalid("examples", "empty"));
    }
    Ok(GapReport {
        frozen: AccuracyPair::measure(frozen, examples)?,
        flc: AccuracyPair::measure(flc, examples)?,
    })
}

// ---------------------------------------------------------------------------
// Plugins

/// Run an external metric over files: paths go to stdin one per line, and
/// the program prints `path<TAB>score` per file.
pub fn run_metric_plugin(program: &Path, files: &[PathBuf]) -> Result<Vec<(PathBuf, f64)>> {
    let mut child = Command::new(program)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Plugin(format!("cannot start {}: {e}", program.display())))?;
    {
        let mut stdin = child.stdin.take().expect("piped stdin");
        let list: String = files.iter().map(|p| format!("{}\n", p.display())).collect();
        stdin
            .write_all(list.as_bytes())
            .map_err(|e| Error::Plugin(format!("writing to {}: {e}", program.display())))?;
    }
    let out = child
        .wait_with_output()
        .map_err(|e| Error::Plugin(format!("waiting for {}: {e}", program.display())))?;
    if !out.status.success() {
        return Err(Error::Plugin(format!(
            "{} exited with {}: {}",
            program.display(),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let mut scores = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed = line
            .rsplit_once('\t')
            .and_then(|(p, s)| Some((PathBuf::from(p), s.trim().parse::<f64>().ok()?)));
        match parsed {
            Some((p, s)) if s.is_finite() => scores.push((p, s)),
            _ => return Err(Error::Plugin(format!("bad plugin output line `{line}`"))),
        }
    }
    Ok(scores)
}
