//! Preference pairs from sampled candidates, and DPO fine-tuning.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use crate::domain::{validate_example, MixtureExample, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::{run_metric_plugin, token_error_rate};
use crate::lm::kernels::{self, Matrix};
use crate::lm::{sample_many, Checkpoint, CheckpointMeta, ConditioningBundle, DecoderLM, Generation, Grads};
use crate::seed;
use crate::stage;
use crate::tokenize::Codec;
use crate::train::{ce_loss_and_grad, clip_grad_norm, AdamW, BatchSampler, TrainConfig};
use crate::wav;

/// Candidate quality judge; higher is better. Must be deterministic.
pub trait Scorer {
    fn score(&self, tokens: &TokenSequence, context: &MixtureExample) -> Result<f64>;

    /// Score several candidates for one context. Failed candidates yield `Err`
    /// entries without failing the batch.
    fn score_all(&self, candidates: &[&TokenSequence], context: &MixtureExample) -> Vec<Result<f64>> {
        candidates.iter().map(|c| self.score(c, context)).collect()
    }
}

/// Desk-scale stand-in for a perceptual quality model: decode the
/// candidate, re-encode it and compare with the ground-truth acoustic
/// tokens. Score is `1 / (1 + TER)`, in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct ProxyScorer<C> {
    pub codec: C,
}

impl<C: Codec> Scorer for ProxyScorer<C> {
    fn score(&self, tokens: &TokenSequence, context: &MixtureExample) -> Result<f64> {
        let wave = self.codec.decode(tokens)?;
        let again = self.codec.encode(&wave)?;
        Ok(1.0 / (1.0 + token_error_rate(&again, &context.target_acoustic)?))
    }
}

/// External scorer: candidates are decoded to WAV files in `workdir` and
/// passed to `program` (see [`run_metric_plugin`]).
#[derive(Debug, Clone)]
pub struct PluginScorer<C> {
    pub program: PathBuf,
    pub workdir: PathBuf,
    pub codec: C,
}

impl<C: Codec> PluginScorer<C> {
    fn write_candidates(&self, candidates: &[&TokenSequence]) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.workdir).map_err(|e| Error::io(&self.workdir, e))?;
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let path = self.workdir.join(format!("cand{i:03}.wav"));
                wav::write_wav(&path, &self.codec.decode(c)?)?;
                Ok(path)
            })
            .collect()
    }
}

impl<C: Codec> Scorer for PluginScorer<C> {
    fn score(&self, tokens: &TokenSequence, context: &MixtureExample) -> Result<f64> {
        self.score_all(&[tokens], context).remove(0)
    }

    fn score_all(&self, candidates: &[&TokenSequence], _context: &MixtureExample) -> Vec<Result<f64>> {
        let scored = self
            .write_candidates(candidates)
            .and_then(|paths| Ok((run_metric_plugin(&self.program, &paths)?, paths)));
        match scored {
            Err(e) => {
                let msg = e.to_string();
                candidates.iter().map(|_| Err(Error::Plugin(msg.clone()))).collect()
            }
            Ok((scores, paths)) => paths
                .iter()
                .map(|p| {
                    scores
                        .iter()
                        .find(|(q, _)| q == p)
                        .map(|(_, s)| *s)
                        .ok_or_else(|| Error::Plugin(format!("no score for {}", p.display())))
                })
                .collect(),
        }
    }
}

/// Best and worst scored candidates for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub cond: ConditioningBundle,
    pub preferred: Generation,
    pub dispreferred: Generation,
    pub score_plus: f64,
    pub score_minus: f64,
}

/// `m` top-k samples from `reference`; candidate `i` uses seed `seed + i`.
pub fn sample_candidates(
    reference: &DecoderLM,
    cond: &ConditioningBundle,
    m: usize,
    k: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Generation>> {
    if m < 2 {
        return Err(Error::invalid("m", "need at least 2 candidates to form a pair"));
    }
    sample_many(reference, cond, m, k, 1.0, max_len, seed)
}

/// Pair the highest- and lowest-scoring candidates, ties to the lowest
/// index. Candidates the scorer rejects are skipped. `None` when fewer
/// than two survive, all scores are equal, or the two sequences coincide.
pub fn build_pair(
    candidates: &[Generation],
    scorer: &dyn Scorer,
    context: &MixtureExample,
    cond: &ConditioningBundle,
) -> Result<Option<PreferencePair>> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidates", "empty"));
    }
    let seqs: Vec<&TokenSequence> = candidates.iter().map(|c| &c.tokens).collect();
    let scored: Vec<(usize, f64)> = scorer
        .score_all(&seqs, context)
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Ok(v) if v.is_finite() => Some((i, v)),
            Ok(_) => None,
            Err(e) => {
                log::debug!("candidate {i} skipped: {e}");
                None
            }
        })
        .collect();
    if scored.len() < 2 {
        return Ok(None);
    }
    let mut best = scored[0];
    let mut worst = scored[0];
    for &(i, s) in &scored[1..] {
        if s > best.1 {
            best = (i, s);
        }
        if s < worst.1 {
            worst = (i, s);
        }
    }
    if best.1 == worst.1 || candidates[best.0] == candidates[worst.0] {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        cond: cond.clone(),
        preferred: candidates[best.0].clone(),
        dispreferred: candidates[worst.0].clone(),
        score_plus: best.1,
        score_minus: worst.1,
    }))
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_pairable(policy: &DecoderLM, reference: &DecoderLM, beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", "must be positive"));
    }
    if !policy.compatible_with(reference) {
        return Err(Error::Checkpoint("policy and reference configs differ".into()));
    }
    Ok(())
}

/// Scored ids of the preferred and dispreferred sequences, including the
/// stop token when decoding ended on it.
fn pair_ids(model: &DecoderLM, pair: &PreferencePair) -> (Vec<u32>, Vec<u32>) {
    let eos = model.config().eos_id;
    (pair.preferred.scored_ids(eos), pair.dispreferred.scored_ids(eos))
}

/// β-scaled implicit reward margin of `pair`.
pub fn dpo_margin(policy: &DecoderLM, reference: &DecoderLM, pair: &PreferencePair, beta: f64) -> Result<f64> {
    check_pairable(policy, reference, beta)?;
    let (plus, minus) = pair_ids(policy, pair);
    let lp = |m: &DecoderLM, ids: &[u32]| m.ids_log_prob(&pair.cond, ids);
    Ok(beta
        * ((lp(policy, &plus)? - lp(reference, &plus)?) - (lp(policy, &minus)? - lp(reference, &minus)?)))
}

/// `-log σ(margin)`.
pub fn dpo_loss(policy: &DecoderLM, reference: &DecoderLM, pair: &PreferencePair, beta: f64) -> Result<f64> {
    Ok(-log_sigmoid(dpo_margin(policy, reference, pair, beta)?))
}

/// Loss and margin of one pair, accumulating `weight` times the policy
/// gradient into `grads`.
pub fn dpo_loss_and_grad(
    policy: &DecoderLM,
    reference: &DecoderLM,
    pair: &PreferencePair,
    beta: f64,
    weight: f64,
    grads: &mut Grads,
) -> Result<(f64, f64)> {
    check_pairable(policy, reference, beta)?;
    let (plus, minus) = pair_ids(policy, pair);
    let ref_plus = reference.ids_log_prob(&pair.cond, &plus)?;
    let ref_minus = reference.ids_log_prob(&pair.cond, &minus)?;
    let (logits_p, tape_p) = policy.forward_train(&pair.cond, &plus[..plus.len() - 1])?;
    let (logits_m, tape_m) = policy.forward_train(&pair.cond, &minus[..minus.len() - 1])?;
    let lp_plus = seq_lp(&logits_p, &plus);
    let lp_minus = seq_lp(&logits_m, &minus);
    let margin = beta * ((lp_plus - ref_plus) - (lp_minus - ref_minus));
    let coef = beta * (sigmoid(margin) - 1.0) * weight;
    policy.backward(&tape_p, &lp_grad(&logits_p, &plus, coef), grads);
    policy.backward(&tape_m, &lp_grad(&logits_m, &minus, -coef), grads);
    Ok((-log_sigmoid(margin), margin))
}

fn seq_lp(logits: &Matrix, ids: &[u32]) -> f64 {
    logits
        .iter_rows()
        .zip(ids)
        .map(|(row, &y)| kernels::log_softmax(row)[y as usize])
        .sum()
}

/// `coef * d(log p(ids)) / d(logits)`.
fn lp_grad(logits: &Matrix, ids: &[u32], coef: f64) -> Matrix {
    let mut g = Matrix::zeros(logits.rows, logits.cols);
    for (t, &y) in ids.iter().enumerate() {
        let p = kernels::softmax(logits.row(t));
        let row = g.row_mut(t);
        for (gi, pi) in row.iter_mut().zip(&p) {
            *gi = -coef * pi;
        }
        row[y as usize] += coef;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpoMode {
    DpoOnly,
    DpoPlusCe,
    CeOnly,
}

impl fmt::Display for DpoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DpoMode::DpoOnly => "dpo_only",
            DpoMode::DpoPlusCe => "dpo_plus_ce",
            DpoMode::CeOnly => "ce_only",
        })
    }
}

impl FromStr for DpoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo_only" => Ok(DpoMode::DpoOnly),
            "dpo_plus_ce" => Ok(DpoMode::DpoPlusCe),
            "ce_only" => Ok(DpoMode::CeOnly),
            _ => Err(Error::Config(format!("unknown DPO mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    /// Steps, learning rate, contexts per step and seed.
    pub train: TrainConfig,
    pub beta: f64,
    /// Candidates sampled per context.
    pub m: usize,
    /// Top-k cutoff for candidate sampling.
    pub k: usize,
    pub mode: DpoMode,
}

impl DpoConfig {
    /// β = 0.1, M = 32, k = 16, 400 steps at a fixed 5e-6.
    pub fn full() -> Self {
        Self {
            train: TrainConfig::full_finetune(),
            beta: 0.1,
            m: 32,
            k: 16,
            mode: DpoMode::DpoOnly,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub checkpoint: Checkpoint,
    /// Mean loss per step; `NaN` for steps where no pair was formed.
    pub losses: Vec<f64>,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Candidate length ceiling for a context: twice its target length.
fn candidate_max_len(targets: &[u32]) -> usize {
    2 * targets.len().max(1)
}

/// Fine-tune a copy of `init` against a frozen reference copy. Candidates
/// are sampled from the reference each step with teacher-forced
/// (ground-truth semantic) conditioning.
pub fn dpo_finetune(
    init: &DecoderLM,
    examples: &[MixtureExample],
    scorer: &dyn Scorer,
    cfg: &DpoConfig,
) -> Result<DpoOutcome> {
    cfg.train.validate()?;
    if !(cfg.beta > 0.0 && cfg.beta.is_finite()) {
        return Err(Error::invalid("beta", "must be positive"));
    }
    if examples.is_empty() {
        return Err(Error::invalid("examples", "no training examples"));
    }
    let reference = init.clone();
    let ref_hash = reference.param_hash();
    let mut policy = init.clone();
    let contexts = examples
        .iter()
        .map(|ex| {
            let ex = validate_example(ex.clone(), init.registry())?;
            let cond = stage::example_bundle(init.config(), &ex)?;
            let targets = stage::target_ids(init.config(), &ex)?;
            Ok((ex, cond, targets))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut opt = AdamW::new(&policy, cfg.train.weight_decay);
    let mut sampler = BatchSampler::new(contexts.len(), seed::split(cfg.train.seed, "batches"));
    let (mut used, mut skipped, mut barren_run) = (0usize, 0usize, 0usize);
    let mut losses = Vec::with_capacity(cfg.train.total_steps);
    let mut draw = 0u64;
    for step in 1..=cfg.train.total_steps {
        let batch = sampler.next_batch(cfg.train.batch_size);
        let mut pairs = Vec::new();
        if cfg.mode != DpoMode::CeOnly {
            for &i in &batch {
                let (ex, cond, targets) = &contexts[i];
                let cand_seed = seed::split_index(cfg.train.seed, "candidates", draw);
                draw += 1;
                let cands = sample_candidates(&reference, cond, cfg.m, cfg.k, candidate_max_len(targets), cand_seed)?;
                match build_pair(&cands, scorer, ex, cond)? {
                    Some(p) => {
                        pairs.push(p);
                        barren_run = 0;
                    }
                    None => {
                        skipped += 1;
                        barren_run += 1;
                    }
                }
            }
            if barren_run >= contexts.len() {
                return Err(Error::NoPairs(format!(
                    "{barren_run} consecutive contexts gave no pair by step {step}; candidates are identical or tie in score"
                )));
            }
        }
        let mut grads = Grads::zeros_like(&policy);
        let mut loss = 0.0;
        let mut terms = 0usize;
        if !pairs.is_empty() {
            let w = 1.0 / pairs.len() as f64;
            for p in &pairs {
                let (l, _) = dpo_loss_and_grad(&policy, &reference, p, cfg.beta, w, &mut grads)?;
                loss += l * w;
            }
            used += pairs.len();
            terms += 1;
        }
        if cfg.mode != DpoMode::DpoOnly {
            let w = 1.0 / batch.len() as f64;
            for &i in &batch {
                let (_, cond, targets) = &contexts[i];
                let (logits, tape) = policy.forward_train(cond, &targets[..targets.len() - 1])?;
                let (l, d) = ce_loss_and_grad(&logits, targets, cfg.train.reduction, w)?;
                policy.backward(&tape, &d, &mut grads);
                loss += l * w;
            }
            terms += 1;
        }
        if terms == 0 {
            losses.push(f64::NAN);
            continue;
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(c) = cfg.train.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        opt.step(&mut policy, &grads, cfg.train.lr_at(step));
        if step % 25 == 0 || step == cfg.train.total_steps {
            log::info!("dpo step {step} loss {loss:.4} pairs {used} skipped {skipped}");
        }
        losses.push(loss);
    }
    if reference.param_hash() != ref_hash {
        return Err(Error::Checkpoint("reference model changed during DPO".into()));
    }
    let mut meta = CheckpointMeta::new("dpo");
    meta.parent = Some(init.param_version());
    meta.step = cfg.train.total_steps;
    meta.extra.insert("mode".into(), cfg.mode.to_string());
    meta.extra.insert("beta".into(), cfg.beta.to_string());
    meta.extra.insert("m".into(), cfg.m.to_string());
    meta.extra.insert("k".into(), cfg.k.to_string());
    meta.extra.insert("seed".into(), cfg.train.seed.to_string());
    Ok(DpoOutcome {
        checkpoint: Checkpoint::new(policy, meta),
        losses,
        pairs_used: used,
        pairs_skipped: skipped,
    })
}

/// Mean scorer value of greedy generations over `examples`, with
/// ground-truth semantic conditioning.
pub fn mean_greedy_score(model: &DecoderLM, examples: &[MixtureExample], scorer: &dyn Scorer) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("examples", "empty"));
    }
    let mut total = 0.0;
    for ex in examples {
        let cond = stage::example_bundle(model.config(), ex)?;
        let targets = stage::target_ids(model.config(), ex)?;
        let out = crate::lm::generate(
            model,
            &cond,
            &crate::lm::Strategy::Greedy,
            candidate_max_len(&targets),
            model.config().eos_id,
        )?;
        total += scorer.score(&out.tokens, ex)?;
    }
    Ok(total / examples.len() as f64)
}
