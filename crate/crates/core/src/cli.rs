//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE` (flat `key = value`, keys are
//! the long flag names with `_` for `-`) and `--seed`. Explicit flags win
//! over the file, which wins over built-in defaults. `GENTSE_DATA_DIR`
//! supplies `--data` (or `data synth --out`) when it is not given.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{self, FeatureFile, SynthConfig, SynthDataset};
use crate::domain::MixtureExample;
use crate::dpo::{self, DpoConfig, DpoMode, PluginScorer, ProxyScorer, Scorer};
use crate::error::{Error, Result};
use crate::eval::{self, AccuracyPair, Report};
use crate::kv::KvFile;
use crate::lm::{Checkpoint, DecoderLM, Strategy};
use crate::pipeline;
use crate::seed;
use crate::stage::{self, Stage};
use crate::tokenize::{self, Codec, Quantizer, ToyCodec};
use crate::train::{self, Reduction, Schedule, TrainConfig};
use crate::wav;

pub const DATA_DIR_ENV: &str = "GENTSE_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "tse-lm",
    about = "Two-stage token-LM target speaker extraction",
    version,
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// Flat `key = value` file supplying defaults for this subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic data.
    #[command(subcommand)]
    Data(DataCmd),
    /// Semantic tokenizer.
    #[command(subcommand)]
    Tokenize(TokenizeCmd),
    /// Teacher-forced training of one stage.
    Train(TrainCmd),
    /// Frozen-LM Conditioning fine-tuning.
    Flc(FlcCmd),
    /// Preference fine-tuning of an acoustic checkpoint.
    Dpo(DpoCmd),
    /// Two-stage extraction from reference and mixture feature files.
    Extract(ExtractCmd),
    /// Metrics of a checkpoint (or a two-stage pair) on a dataset.
    Evaluate(EvaluateCmd),
    /// Exposure-bias comparison of a frozen checkpoint and its FLC fine-tune.
    GapReport(GapCmd),
}

#[derive(Debug, Subcommand)]
enum DataCmd {
    /// Generate a synthetic two-speaker dataset.
    Synth(SynthCmd),
}

#[derive(Debug, Subcommand)]
enum TokenizeCmd {
    /// Fit the k-means quantizer on manifest feature files.
    FitKmeans(KmeansCmd),
}

#[derive(Debug, Args)]
struct SynthCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of examples (every 20th is held out).
    #[arg(long, alias = "n")]
    num_examples: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    ref_frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    codec_levels: Option<usize>,
    #[arg(long)]
    codec_frame_len: Option<usize>,
}

#[derive(Debug, Args)]
struct KmeansCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    k: Option<usize>,
    /// Manifest listing reference/mixture feature files.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long, alias = "steps")]
    total_steps: Option<usize>,
    /// warmup-then-constant | warmup-then-linear-decay
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// mean | sum
    #[arg(long)]
    reduction: Option<String>,
    /// Gradient-norm clip, or `none`.
    #[arg(long)]
    grad_clip: Option<String>,
}

const TRAIN_ARG_KEYS: &[&str] = &[
    "batch_size",
    "peak_lr",
    "warmup_steps",
    "total_steps",
    "schedule",
    "weight_decay",
    "reduction",
    "grad_clip",
    "seed",
];

#[derive(Debug, Args)]
struct TrainCmd {
    /// semantic | acoustic
    stage: String,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Acoustic model without semantic conditioning.
    #[arg(long)]
    acoustic_only: bool,
    /// Model size preset: desk | full
    #[arg(long)]
    model: Option<String>,
}

#[derive(Debug, Args)]
struct FlcCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    frozen: Option<PathBuf>,
    /// semantic | acoustic
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DpoCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    init: Option<PathBuf>,
    /// proxy | plugin:PATH
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// dpo_only | dpo_plus_ce | ce_only
    #[arg(long)]
    mode: Option<String>,
    /// Candidates per context.
    #[arg(long)]
    m: Option<usize>,
    /// Top-k cutoff for candidate sampling.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    sem: Option<PathBuf>,
    #[arg(long)]
    aco: Option<PathBuf>,
    /// Reference feature file.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Mixture feature file.
    #[arg(long)]
    mix: Option<PathBuf>,
    /// Output WAV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for the intermediate token sequences.
    #[arg(long)]
    dump_tokens: Option<PathBuf>,
    /// Quantizer for token-conditioned slots.
    #[arg(long)]
    quantizer: Option<PathBuf>,
    /// greedy | top-k
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct EvaluateCmd {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to score; with `--aco`, the semantic stage.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Acoustic checkpoint for two-stage extraction metrics.
    #[arg(long)]
    aco: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// val | train | all
    #[arg(long)]
    split: Option<String>,
    /// External metric over extracted waveforms (`path<TAB>score` protocol).
    #[arg(long)]
    metric_plugin: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GapCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    frozen: Option<PathBuf>,
    #[arg(long)]
    flc: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// val | train | all
    #[arg(long)]
    split: Option<String>,
}

// ---------------------------------------------------------------------------
// Settings resolution

struct Settings {
    kv: KvFile,
    seed: Option<u64>,
}

impl Settings {
    fn new(common: &Common, known: &[&str]) -> Result<Self> {
        let kv = match &common.config {
            Some(p) => KvFile::load(p)?,
            None => KvFile::default(),
        };
        kv.reject_unknown(known)?;
        Ok(Self { kv, seed: common.seed })
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.kv.optional(key),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn need<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.opt(flag, key)?
            .ok_or_else(|| Error::Config(format!("--{} is required", key.replace('_', "-"))))
    }

    fn seed(&self) -> Result<u64> {
        self.or(self.seed, "seed", 0)
    }

    fn data_dir(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        if let Some(p) = self.opt(flag, key)? {
            return Ok(p);
        }
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
            Error::Config(format!("--{key} is required (or set {DATA_DIR_ENV})"))
        })
    }

    fn train_config(&self, a: &TrainArgs, base: TrainConfig) -> Result<TrainConfig> {
        let grad_clip = match self.opt(a.grad_clip.clone(), "grad_clip")? {
            None => base.grad_clip,
            Some(s) if s == "none" => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::Config(format!("bad value for `grad_clip`: `{s}`")))?,
            ),
        };
        let cfg = TrainConfig {
            batch_size: self.or(a.batch_size, "batch_size", base.batch_size)?,
            peak_lr: self.or(a.peak_lr, "peak_lr", base.peak_lr)?,
            warmup_steps: self.or(a.warmup_steps, "warmup_steps", base.warmup_steps)?,
            total_steps: self.or(a.total_steps, "total_steps", base.total_steps)?,
            seed: self.seed()?,
            schedule: match self.opt(a.schedule.clone(), "schedule")? {
                Some(s) => Schedule::from_str(&s)?,
                None => base.schedule,
            },
            weight_decay: self.or(a.weight_decay, "weight_decay", base.weight_decay)?,
            reduction: match self.opt(a.reduction.clone(), "reduction")? {
                Some(s) => Reduction::from_str(&s)?,
                None => base.reduction,
            },
            grad_clip,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn keys<'a>(own: &[&'a str], train: bool) -> Vec<&'a str> {
    let mut k = own.to_vec();
    k.push("seed");
    if train {
        k.extend_from_slice(TRAIN_ARG_KEYS);
    }
    k
}

fn split_examples(ds: SynthDataset, split: &str) -> Result<Vec<MixtureExample>> {
    match split {
        "val" => Ok(ds.validation),
        "train" => Ok(ds.train),
        "all" => Ok(ds.train.into_iter().chain(ds.validation).collect()),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

fn codec_for(ckpt: &Checkpoint, frame_len_fallback: usize) -> Result<ToyCodec> {
    let get = |k: &str| ckpt.meta.extra.get(k).and_then(|v| v.parse::<usize>().ok());
    let feature_dim = ckpt
        .model
        .config()
        .conditioning_slots
        .iter()
        .find(|s| s.name == "dac_mix")
        .and_then(|s| match s.kind {
            crate::domain::SlotKind::Continuous { dim } => Some(dim),
            _ => None,
        })
        .or_else(|| get("codec.feature_dim"))
        .ok_or_else(|| Error::Checkpoint("cannot infer codec feature size".into()))?;
    Ok(ToyCodec {
        frame_len: get("codec.frame_len").unwrap_or(frame_len_fallback),
        levels: ckpt.model.config().content_vocab(),
        feature_dim,
    })
}

fn save_checkpoint(ckpt: &Checkpoint, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    ckpt.save(out)?;
    let _ = writeln!(
        stdout,
        "wrote {} (id {}, parent {}, val_ce {})",
        out.display(),
        ckpt.meta.id,
        ckpt.meta.parent.as_deref().unwrap_or("none"),
        ckpt.meta.val_ce.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands

fn data_synth(c: SynthCmd, out: &mut dyn Write) -> Result<()> {
    let s = Settings::new(
        &c.common,
        &keys(
            &[
                "out",
                "num_examples",
                "speakers",
                "vocab",
                "feature_dim",
                "frames",
                "ref_frames",
                "noise",
                "codec_levels",
                "codec_frame_len",
            ],
            false,
        ),
    )?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        num_speakers: s.or(c.speakers, "speakers", d.num_speakers)?,
        semantic_vocab: s.or(c.vocab, "vocab", d.semantic_vocab)?,
        feature_dim: s.or(c.feature_dim, "feature_dim", d.feature_dim)?,
        frames: s.or(c.frames, "frames", d.frames)?,
        ref_frames: s.or(c.ref_frames, "ref_frames", d.ref_frames)?,
        noise_std: s.or(c.noise, "noise", d.noise_std)?,
        codec_frame_len: s.or(c.codec_frame_len, "codec_frame_len", d.codec_frame_len)?,
        codec_levels: s.or(c.codec_levels, "codec_levels", d.codec_levels)?,
        codec_feature_dim: d.codec_feature_dim,
    };
    let dir = s.data_dir(c.out, "out")?;
    let n = s.or(c.num_examples, "num_examples", 200)?;
    let ds = data::write_synth_dataset(&dir, &cfg, n, s.seed()?)?;
    let _ = writeln!(
        out,
        "wrote {} train + {} validation examples to {}",
        ds.train.len(),
        ds.validation.len(),
        dir.display()
    );
    Ok(())
}

fn fit_kmeans(c: KmeansCmd, out: &mut dyn Write) -> Result<()> {
    let s = Settings::new(&c.common, &keys(&["k", "in", "out", "max_iters", "tol"], false))?;
    let k = s.need(c.k, "k")?;
    let manifest = data::load_manifest(&s.need(c.input, "in")?)?;
    let mut feats = Vec::new();
    for e in &manifest.entries {
        for p in [&e.reference_path, &e.mixture_path] {
            feats.push(FeatureFile::load(p)?.semantic);
        }
    }
    let frames: usize = feats.iter().map(|f| f.frames()).sum();
    let fit = tokenize::fit_kmeans_traced(
        &feats,
        k,
        s.seed()?,
        s.or(c.max_iters, "max_iters", 100)?,
        s.or(c.tol, "tol", 1e-6)?,
    )?;
    let path = s.need(c.out, "out")?;
    fit.quantizer.save(&path)?;
    let _ = writeln!(
        out,
        "fit k={k} on {frames} frames in {} iterations, inertia {:.4}; wrote {}",
        fit.iterations,
        fit.inertia_history.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn train_cmd(c: TrainCmd, out: &mut dyn Write) -> Result<()> {
    let s = Settings::new(&c.common, &keys(&["data", "out", "model"], true))?;
    let stage: Stage = c.stage.parse()?;
    let ds = data::load_synth_dataset(&s.data_dir(c.data, "data")?)?;
    let sc = &ds.config;
    let registry = sc.registry()?;
    let slots = match (stage, c.acoustic_only) {
        (Stage::Semantic, false) => stage::semantic_slots(sc.feature_dim),
        (Stage::Acoustic, false) => stage::acoustic_slots(sc.semantic_vocab, sc.codec_feature_dim),
        (Stage::Acoustic, true) => stage::acoustic_only_slots(sc.codec_feature_dim),
        (Stage::Semantic, true) => {
            return Err(Error::Config("--acoustic-only applies to the acoustic stage".into()))
        }
    };
    let vocab = registry.size(stage.vocab()).expect("standard registry");
    let config = match s.or(c.model, "model", "desk".to_string())?.as_str() {
        "desk" => crate::domain::LMConfig::desk(stage.vocab(), vocab, slots)?,
        "full" => crate::domain::LMConfig::full_scale(stage.vocab(), vocab, slots)?,
        other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
    };
    let cfg = s.train_config(&c.train, TrainConfig::desk())?;
    let model = DecoderLM::new(config, registry, seed::split(cfg.seed, "init"))?;
    let name = if c.acoustic_only { "acoustic-only" } else { stage.vocab() };
    let mut result = train::train_stage(model, &ds.train, &ds.validation, &cfg, name)?;
    let extra = &mut result.checkpoint.meta.extra;
    extra.insert("codec.frame_len".into(), sc.codec_frame_len.to_string());
    extra.insert("codec.feature_dim".into(), sc.codec_feature_dim.to_string());
    save_checkpoint(&result.checkpoint, &s.need(c.out, "out")?, out)
}

/// FLC defaults at desk scale: constant rate, no warmup.
pub fn desk_flc_config() -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 0,
        total_steps: 300,
        schedule: Schedule::WarmupConstant,
        ..TrainConfig::desk()
    }
}

/// DPO defaults at desk scale: β, M, k and step count as in the full-scale
/// recipe, with a rate and batch sized for the toy task.
pub fn desk_dpo_config() -> DpoConfig {
    DpoConfig {
        train: TrainConfig {
            batch_size: 2,
            peak_lr: 5e-6,
            warmup_steps: 0,
            total_steps: 400,
            schedule: Schedule::WarmupConstant,
            ..TrainConfig::desk()
        },
        ..DpoConfig::full()
    }
}

fn flc_cmd(c: FlcCmd, out: &mut dyn Write) -> Result<()> {
    let s = Settings::new(&c.common, &keys(&["frozen", "stage", "data", "out"], true))?;
    let frozen = Checkpoint::load(&s.need(c.frozen, "frozen")?)?;
    let stage: Stage = s.need::<String>(c.stage, "stage")?.parse()?;
    if frozen.model.config().target_vocab != stage.vocab() {
        return Err(Error::Checkpoint(format!(
            "frozen checkpoint predicts `{}`, not `{}`",
            frozen.model.config().target_vocab,
            stage.vocab()
        )));
    }
    let ds = data::load_synth_dataset(&s.data_dir(c.data, "data")?)?;
    let cfg = s.train_config(&c.train, desk_flc_config())?;
    let mut result = train::flc_finetune(&frozen.model, &ds.train, &ds.validation, &cfg)?;
    inherit_extra(&frozen, &mut result.checkpoint);
    save_checkpoint(&result.checkpoint, &s.need(c.out, "out")?, out)
}

fn inherit_extra(parent: &Checkpoint, child: &mut Checkpoint) {
    for (k, v) in &parent.meta.extra {
        if k.starts_with("codec.") {
            child.meta.extra.insert(k.clone(), v.clone());
        }
    }
}

fn dpo_cmd(c: DpoCmd, out: &mut dyn Write) -> Result<()> {
    let s = Settings::new(
        &c.common,
        &keys(&["init", "scorer", "beta", "mode", "m", "k", "data", "out"], true),
    )?;
    let init = Checkpoint::load(&s.need(c.init, "init")?)?;
    let ds = data::load_synth_dataset(&s.data_dir(c.data, "data")?)?;
    let base = desk_dpo_config();
    let cfg = DpoConfig {
        train: s.train_config(&c.train, base.train.clone())?,
        beta: s.or(c.beta, "beta", base.beta)?,
        m: s.or(c.m, "m", base.m)?,
        k: s.or(c.k, "k", base.k)?,
        mode: match s.opt(c.mode, "mode")? {
            Some(m) => DpoMode::from_str(&m)?,
            None => base.mode,
        },
    };
    let codec = codec_for(&init, ds.config.codec_frame_len)?;
    let out_dir = s.need(c.out, "out")?;
    let scorer_spec = s.or(c.scorer, "scorer", "proxy".to_string())?;
    let scorer: Box<dyn Scorer> = match scorer_spec.as_str() {
        "proxy" => Box::new(ProxyScorer { codec }),
        other => match other.strip_prefix("plugin:") {
            Some(path) => Box::new(PluginScorer {
                program: PathBuf::from(path),
                workdir: out_dir.with_extension("candidates"),
                codec,
            }),
            None => return Err(Error::Config(format!("unknown scorer `{other}`"))),
        },
    };
    let result = dpo::dpo_finetune(&init.model, &ds.train, scorer.as_ref(), &cfg)?;
    let mut ckpt = result.checkpoint;
    inherit_extra(&init, &mut ckpt);
    ckpt.meta.extra.insert("pairs_used".into(), result.pairs_used.to_string());
    ckpt.meta.extra.insert("pairs_skipped".into(), result.pairs_skipped.to_string());
    save_checkpoint(&ckpt, &out_dir, out)
}

fn parse_strategy(s: &Settings, name: Option<String>, k: Option<usize>, t: Option<f64>) -> Result<Strategy> {
    match s.or(name, "strategy", "greedy".to_string())?.as_str() {
        "greedy" => Ok(Strategy::Greedy),
        "top-k" => Ok(Strategy::TopK {
            k: s.need(k, "k")?,
            temperature: s.or(t, "temperature", 1.0)?,
            seed: s.seed()?,
        }),
        other => Err(Error::Config(format!("unknown strategy `{other}`"))),
    }
}

fn write_tokens(dir: &Path, name: &str, ids: &[u32]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let text: Vec<String> = ids.iter().map(u32::to_string).collect();
    std::fs::write(&path, format!("{}\n", text.join(" "))).map_err(|e| Error::io(&path, e))
}

fn extract_cmd(c: ExtractCmd, out: &mut dyn Write) -> Result<()> {
    let s = Settings::new(
        &c.common,
        &keys(
            &[
                "sem",
                "aco",
                "ref",
                "mix",
                "out",
                "dump_tokens",
                "quantizer",
                "strategy",
                "k",
                "temperature",
            ],
            false,
        ),
    )?;
    let sem = Checkpoint::load(&s.need(c.sem, "sem")?)?;
    let aco = Checkpoint::load(&s.need(c.aco, "aco")?)?;
    let reference = FeatureFile::load(&s.need(c.reference, "ref")?)?;
    let mixture = FeatureFile::load(&s.need(c.mix, "mix")?)?;
    let quantizer = s.opt(c.quantizer, "quantizer")?.map(|p| Quantizer::load(&p)).transpose()?;
    let strategy = parse_strategy(&s, c.strategy, c.k, c.temperature)?;
    let codec = codec_for(&aco, ToyCodec::default().frame_len)?;
    let result = pipeline::extract(
        &sem.model,
        &aco.model,
        &reference,
        &mixture,
        &codec,
        quantizer.as_ref(),
        &strategy,
    )?;
    let wav_path = s.need(c.out, "out")?;
    wav::write_wav(&wav_path, &result.waveform)?;
    if let Some(dir) = s.opt(c.dump_tokens, "dump_tokens")? {
        if let Some(sb) = &result.semantic {
            write_tokens(&dir, "semantic.txt", &sb.tokens.ids)?;
        }
        write_tokens(&dir, "acoustic.txt", &result.acoustic.tokens.ids)?;
    }
    let _ = writeln!(
        out,
        "extracted {} semantic / {} acoustic tokens; wrote {}",
        result.semantic.as_ref().map_or(0, |g| g.tokens.len()),
        result.acoustic.tokens.len(),
        wav_path.display()
    );
    Ok(())
}

fn evaluate_cmd(c: EvaluateCmd, out: &mut dyn Write) -> Result<()> {
    let s = Settings::new(
        &c.common,
        &keys(&["ckpt", "aco", "data", "out", "split", "metric_plugin"], false),
    )?;
    let ckpt = Checkpoint::load(&s.need(c.ckpt, "ckpt")?)?;
    let ds = data::load_synth_dataset(&s.data_dir(c.data, "data")?)?;
    let frame_len = ds.config.codec_frame_len;
    let examples = split_examples(ds, &s.or(c.split, "split", "val".to_string())?)?;
    if examples.is_empty() {
        return Err(Error::invalid("split", "no examples in the selected split"));
    }
    let mut report = Report::default();
    let acc = AccuracyPair::measure(&ckpt.model, &examples)?;
    report.push("tf_accuracy", acc.tf);
    report.push("ar_accuracy", acc.ar);
    report.push("gap", acc.gap());
    report.push("ce", train::mean_ce(&ckpt.model, &examples)?);

    let out_path = s.need(c.out, "out")?;
    let aco = s.opt(c.aco, "aco")?.map(|p| Checkpoint::load(&p)).transpose()?;
    let plugin = s.opt(c.metric_plugin, "metric_plugin")?;
    let acoustic_only = ckpt.model.config().target_vocab == Stage::Acoustic.vocab()
        && !ckpt.model.config().conditioning_slots.iter().any(|s| s.name == "semantic");
    let pipeline_models = match (&aco, acoustic_only) {
        (Some(a), _) => Some((Some(&ckpt), a)),
        (None, true) => Some((None, &ckpt)),
        (None, false) => None,
    };
    if let Some((sem, aco)) = pipeline_models {
        let codec = codec_for(aco, frame_len)?;
        let wav_dir = out_path.with_extension("wavs");
        let (mut ter_s, mut ter_a, mut secs) = (0.0, 0.0, 0.0);
        let mut wavs = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            let reference = FeatureFile {
                semantic: ex.ref_features.clone(),
                acoustic: ex.acoustic_ref_features.clone(),
            };
            let mixture = FeatureFile {
                semantic: ex.mix_features.clone(),
                acoustic: ex.acoustic_mix_features.clone(),
            };
            let r = match sem {
                Some(sem) => pipeline::extract(
                    &sem.model,
                    &aco.model,
                    &reference,
                    &mixture,
                    &codec,
                    None,
                    &Strategy::Greedy,
                )?,
                None => pipeline::extract_acoustic_only(&aco.model, &reference, &mixture, &codec, &Strategy::Greedy)?,
            };
            if let Some(sb) = &r.semantic {
                ter_s += eval::token_error_rate(&sb.tokens, &ex.target_semantic)?;
            }
            ter_a += eval::token_error_rate(&r.acoustic.tokens, &ex.target_acoustic)?;
            secs += secs_proxy(&codec, &r.waveform, &ex.target_acoustic)?;
            if plugin.is_some() {
                std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
                let p = wav_dir.join(format!("{i:05}.wav"));
                wav::write_wav(&p, &r.waveform)?;
                wavs.push(p);
            }
        }
        let n = examples.len() as f64;
        if sem.is_some() {
            report.push("extract.ter_semantic", ter_s / n);
        }
        report.push("extract.ter_acoustic", ter_a / n);
        report.push("extract.secs_proxy", secs / n);
        if let Some(program) = plugin {
            let scores = eval::run_metric_plugin(&program, &wavs)?;
            let mean = scores.iter().map(|(_, v)| v).sum::<f64>() / scores.len().max(1) as f64;
            report.push("plugin.mean", mean);
        }
    }
    report.save(&out_path)?;
    let _ = write!(out, "{}", report.table());
    Ok(())
}

/// Cosine of mean codec frame features of an extracted waveform and of the
/// decoded ground-truth acoustic tokens. Silent outputs score 0.
fn secs_proxy(codec: &ToyCodec, waveform: &[f64], truth: &crate::domain::TokenSequence) -> Result<f64> {
    if waveform.is_empty() {
        return Ok(0.0);
    }
    let target = codec.decode(truth)?;
    let a = eval::speaker_embedding(&codec.frame_features(waveform)?);
    let b = eval::speaker_embedding(&codec.frame_features(&target)?);
    Ok(eval::cosine_similarity(&a, &b).unwrap_or(0.0))
}

fn gap_cmd(c: GapCmd, out: &mut dyn Write) -> Result<()> {
    let s = Settings::new(&c.common, &keys(&["frozen", "flc", "data", "out", "split"], false))?;
    let frozen = Checkpoint::load(&s.need(c.frozen, "frozen")?)?;
    let flc = Checkpoint::load(&s.need(c.flc, "flc")?)?;
    let ds = data::load_synth_dataset(&s.data_dir(c.data, "data")?)?;
    let examples = split_examples(ds, &s.or(c.split, "split", "val".to_string())?)?;
    let report = eval::gap_report(&frozen.model, &flc.model, &examples)?.report();
    report.save(&s.need(c.out, "out")?)?;
    let _ = write!(out, "{}", report.table());
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry points

/// Run with process stdout/stderr. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Exit codes: 0 success, 1 usage error, 2 runtime failure.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut args: Vec<OsString> = vec!["tse-lm".into()];
    args.extend(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(stderr, "{text}");
                    1
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Data(DataCmd::Synth(c)) => data_synth(c, stdout),
        Command::Tokenize(TokenizeCmd::FitKmeans(c)) => fit_kmeans(c, stdout),
        Command::Train(c) => train_cmd(c, stdout),
        Command::Flc(c) => flc_cmd(c, stdout),
        Command::Dpo(c) => dpo_cmd(c, stdout),
        Command::Extract(c) => extract_cmd(c, stdout),
        Command::Evaluate(c) => evaluate_cmd(c, stdout),
        Command::GapReport(c) => gap_cmd(c, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run_with(args.iter().copied(), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn help_lists_subcommands() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        for sub in ["data", "tokenize", "train", "flc", "dpo", "extract", "evaluate", "gap-report"] {
            assert!(out.contains(sub), "{sub} missing from help:\n{out}");
        }
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (code, _, err) = run_capture(&["train", "semantic", "--bogus-flag", "1"]);
        assert_eq!(code, 1);
        assert!(err.contains("--bogus-flag"), "{err}");
        let (code, _, _) = run_capture(&["frobnicate"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn runtime_failure_exits_2() {
        let (code, _, err) = run_capture(&["flc", "--frozen", "/nonexistent/ckpt", "--stage", "semantic"]);
        assert_eq!(code, 2);
        assert!(err.contains("error"), "{err}");
    }

    #[test]
    fn explicit_flags_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.kv");
        std::fs::write(&cfg, "total_steps = 70\npeak_lr = 0.5\nseed = 9\n").unwrap();
        let common = Common {
            config: Some(cfg),
            seed: Some(3),
        };
        let s = Settings::new(&common, &keys(&[], true)).unwrap();
        let args = TrainArgs {
            total_steps: Some(40),
            ..TrainArgs::default()
        };
        let t = s.train_config(&args, TrainConfig::desk()).unwrap();
        assert_eq!(t.total_steps, 40);
        assert_eq!(t.peak_lr, 0.5);
        assert_eq!(t.seed, 3);
        assert_eq!(t.batch_size, TrainConfig::desk().batch_size);

        let bad = dir.path().join("bad.kv");
        std::fs::write(&bad, "nonsense = 1\n").unwrap();
        let common = Common {
            config: Some(bad),
            seed: None,
        };
        assert!(Settings::new(&common, &keys(&[], true)).is_err());
    }
}
