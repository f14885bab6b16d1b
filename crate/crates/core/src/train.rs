//! Teacher-forced training, Frozen-LM Conditioning and the shared optimizer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::domain::{validate_example, MixtureExample};
use crate::error::{Error, Result};
use crate::kv::{self, KvFile};
use crate::lm::kernels::{self, Matrix};
use crate::lm::{Checkpoint, CheckpointMeta, ConditioningBundle, DecoderLM, Grads};
use crate::seed;
use crate::stage;

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    WarmupConstant,
    WarmupLinearDecay,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::WarmupConstant => "warmup-then-constant",
            Schedule::WarmupLinearDecay => "warmup-then-linear-decay",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup-then-constant" => Ok(Schedule::WarmupConstant),
            "warmup-then-linear-decay" => Ok(Schedule::WarmupLinearDecay),
            _ => Err(Error::Config(format!("unknown schedule `{s}`"))),
        }
    }
}

/// How per-position cross-entropy terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(Error::Config(format!("unknown reduction `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub reduction: Reduction,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "peak_lr",
    "warmup_steps",
    "total_steps",
    "seed",
    "schedule",
    "weight_decay",
    "reduction",
    "grad_clip",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-task preset that trains the desk model in a few hundred steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_steps: 20,
            total_steps: 300,
            seed: 0,
            schedule: Schedule::WarmupLinearDecay,
            weight_decay: 0.01,
            reduction: Reduction::Mean,
            grad_clip: Some(1.0),
        }
    }

    /// Full-scale pretraining recipe.
    pub fn full_base() -> Self {
        Self {
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_steps: 1000,
            total_steps: 200_000,
            seed: 0,
            schedule: Schedule::WarmupConstant,
            weight_decay: 0.01,
            reduction: Reduction::Mean,
            grad_clip: Some(1.0),
        }
    }

    /// Full-scale fine-tuning recipe (FLC and DPO): fixed small rate, no warmup.
    pub fn full_finetune() -> Self {
        Self {
            peak_lr: 5e-6,
            warmup_steps: 0,
            total_steps: 400,
            ..Self::full_base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`. Warmup rises linearly from 0 and
    /// reaches `peak_lr` exactly at `warmup_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.peak_lr;
            }
            return self.peak_lr * (step as f64 / self.warmup_steps as f64);
        }
        match self.schedule {
            Schedule::WarmupConstant => self.peak_lr,
            Schedule::WarmupLinearDecay => {
                let span = (self.total_steps - self.warmup_steps) as f64;
                let left = self.total_steps.saturating_sub(step) as f64;
                self.peak_lr * (left / span)
            }
        }
    }

    /// Parse a flat `key = value` file. Every key is required except
    /// `weight_decay`, `reduction` and `grad_clip` (`none` disables it).
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let d = Self::desk();
        let grad_clip = match kv.get("grad_clip") {
            None => d.grad_clip,
            Some("none") => None,
            Some(_) => Some(kv.require("grad_clip")?),
        };
        let cfg = Self {
            batch_size: kv.require("batch_size")?,
            peak_lr: kv.require("peak_lr")?,
            warmup_steps: kv.require("warmup_steps")?,
            total_steps: kv.require("total_steps")?,
            seed: kv.require("seed")?,
            schedule: kv.require::<String>("schedule")?.parse()?,
            weight_decay: kv.optional("weight_decay")?.unwrap_or(d.weight_decay),
            reduction: match kv.get("reduction") {
                Some(r) => r.parse()?,
                None => d.reduction,
            },
            grad_clip,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn to_kv_text(&self) -> String {
        kv::render(&[
            ("batch_size", self.batch_size.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("schedule", self.schedule.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("reduction", self.reduction.to_string()),
            (
                "grad_clip",
                self.grad_clip.map_or_else(|| "none".into(), |c| c.to_string()),
            ),
        ])
    }
}

// ---------------------------------------------------------------------------
// Loss

/// Cross-entropy of `targets` under `logits`, skipping positions where
/// `mask` is false. Errors if every position is masked.
pub fn ce_loss(logits: &Matrix, targets: &[u32], mask: &[bool]) -> Result<f64> {
    ce_loss_with(logits, targets, mask, Reduction::Mean)
}

pub fn ce_loss_with(logits: &Matrix, targets: &[u32], mask: &[bool], reduction: Reduction) -> Result<f64> {
    check_ce_shapes(logits, targets, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total -= kernels::log_softmax(logits.row(t))[y as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("mask", "every position is masked"));
    }
    Ok(match reduction {
        Reduction::Mean => total / count as f64,
        Reduction::Sum => total,
    })
}

fn check_ce_shapes(logits: &Matrix, targets: &[u32], mask: &[bool]) -> Result<()> {
    if logits.rows != targets.len() || mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows,
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&y) = targets.iter().find(|&&y| y as usize >= logits.cols) {
        return Err(Error::invalid("targets", format!("id {y} outside {} logits", logits.cols)));
    }
    Ok(())
}

/// Loss and its gradient with respect to `logits`, scaled by `weight`.
pub fn ce_loss_and_grad(
    logits: &Matrix,
    targets: &[u32],
    reduction: Reduction,
    weight: f64,
) -> Result<(f64, Matrix)> {
    let mask = vec![true; targets.len()];
    check_ce_shapes(logits, targets, &mask)?;
    if targets.is_empty() {
        return Err(Error::invalid("targets", "empty"));
    }
    let norm = match reduction {
        Reduction::Mean => 1.0 / targets.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let lp = kernels::log_softmax(logits.row(t));
        total -= lp[y as usize];
        let g = grad.row_mut(t);
        for (gi, l) in g.iter_mut().zip(&lp) {
            *gi = l.exp() * norm * weight;
        }
        g[y as usize] -= norm * weight;
    }
    Ok((total * norm, grad))
}

// ---------------------------------------------------------------------------
// Optimizer

/// AdamW with decoupled weight decay applied to matrix parameters only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &DecoderLM, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut DecoderLM, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let decay = if p.is_matrix() { self.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.tensors[i]);
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p.data[j] -= lr * (update + decay * p.data[j]);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Deterministic batch order: shuffled epochs drawn without replacement.
#[derive(Debug)]
pub struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            order: Vec::new(),
            cursor: 0,
            rng: seed::rng(seed),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && self.n > 0 {
            if self.cursor == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Training loops

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

struct Prepared {
    bundle: ConditioningBundle,
    targets: Vec<u32>,
}

fn prepare(model: &DecoderLM, examples: &[MixtureExample]) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|ex| {
            let ex = validate_example(ex.clone(), model.registry())?;
            Ok(Prepared {
                bundle: stage::example_bundle(model.config(), &ex)?,
                targets: stage::target_ids(model.config(), &ex)?,
            })
        })
        .collect()
}

/// Mean teacher-forced cross-entropy over `examples`.
pub fn mean_ce(model: &DecoderLM, examples: &[MixtureExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("examples", "empty"));
    }
    let mut total = 0.0;
    for p in prepare(model, examples)? {
        let logits = model.logits_for(&p.bundle, &p.targets[..p.targets.len() - 1])?;
        total += ce_loss(&logits, &p.targets, &vec![true; p.targets.len()])?;
    }
    Ok(total / examples.len() as f64)
}

/// Shared step loop. `history_for(i)` gives the input history of example
/// `i`; labels are always the ground-truth targets.
fn run_loop(
    model: &mut DecoderLM,
    data: &[Prepared],
    cfg: &TrainConfig,
    histories: Option<&[Vec<u32>]>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "no training examples"));
    }
    let mut opt = AdamW::new(model, cfg.weight_decay);
    let mut sampler = BatchSampler::new(data.len(), seed::split(cfg.seed, "batches"));
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let weight = 1.0 / batch.len() as f64;
        let mut grads = Grads::zeros_like(model);
        let mut loss = 0.0;
        for &i in &batch {
            let p = &data[i];
            let history = match histories {
                Some(h) => &h[i][..],
                None => &p.targets[..p.targets.len() - 1],
            };
            let (logits, tape) = model.forward_train(&p.bundle, history)?;
            let (l, dlogits) = ce_loss_and_grad(&logits, &p.targets, cfg.reduction, weight)?;
            model.backward(&tape, &dlogits, &mut grads);
            loss += l * weight;
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        opt.step(model, &grads, cfg.lr_at(step));
        if step % 50 == 0 || step == cfg.total_steps {
            log::info!("step {step} loss {loss:.4} lr {:.2e}", cfg.lr_at(step));
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Teacher-forced training of `model` on `train`; validation CE is recorded
/// in the checkpoint when `validation` is non-empty.
pub fn train_stage(
    mut model: DecoderLM,
    train: &[MixtureExample],
    validation: &[MixtureExample],
    cfg: &TrainConfig,
    stage_name: &str,
) -> Result<TrainOutcome> {
    let data = prepare(&model, train)?;
    let parent = model.param_version();
    let losses = run_loop(&mut model, &data, cfg, None)?;
    let mut meta = CheckpointMeta::new(stage_name);
    meta.parent = Some(parent);
    meta.step = cfg.total_steps;
    if !validation.is_empty() {
        meta.val_ce = Some(mean_ce(&model, validation)?);
    }
    meta.extra.insert("seed".into(), cfg.seed.to_string());
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, meta),
        losses,
    })
}

// ---------------------------------------------------------------------------
// Frozen-LM Conditioning

/// Frozen-model predictions used as FLC input history: at every position
/// the argmax of the frozen model's teacher-forced distribution, so the
/// output has the same length as `targets`.
pub fn flc_generate(frozen: &DecoderLM, cond: &ConditioningBundle, targets: &[u32]) -> Result<Vec<u32>> {
    if targets.is_empty() {
        return Err(Error::invalid("targets", "empty"));
    }
    let logits = frozen.logits_for(cond, &targets[..targets.len() - 1])?;
    Ok(logits.iter_rows().map(|r| kernels::argmax(r) as u32).collect())
}

/// FLC fine-tuning: a byte-identical clone of `frozen` is trained with its
/// input history replaced by the frozen model's predictions while labels
/// stay ground truth. `frozen` is never modified.
pub fn flc_finetune(
    frozen: &DecoderLM,
    train: &[MixtureExample],
    validation: &[MixtureExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let frozen_hash = frozen.param_hash();
    let mut model = frozen.clone();
    let data = prepare(&model, train)?;
    let histories = data
        .iter()
        .map(|p| {
            let pred = flc_generate(frozen, &p.bundle, &p.targets)?;
            Ok(pred[..pred.len() - 1].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let losses = run_loop(&mut model, &data, cfg, Some(&histories))?;
    if frozen.param_hash() != frozen_hash {
        return Err(Error::Checkpoint("frozen model changed during FLC".into()));
    }
    let mut meta = CheckpointMeta::new("flc");
    meta.parent = Some(frozen.param_version());
    meta.step = cfg.total_steps;
    if !validation.is_empty() {
        meta.val_ce = Some(mean_ce(&model, validation)?);
    }
    meta.extra.insert("seed".into(), cfg.seed.to_string());
    meta.extra.insert("target".into(), model.config().target_vocab.clone());
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, meta),
        losses,
    })
}
