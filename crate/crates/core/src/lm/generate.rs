use rand::Rng;

use super::kernels;
use super::model::{ConditioningBundle, Decoder, DecoderLM};
use crate::domain::TokenSequence;
use crate::error::{Error, Result};
use crate::seed;

/// Decoding rule applied at every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    TopK { k: usize, temperature: f64, seed: u64 },
}

impl Strategy {
    pub fn top_k(k: usize, seed: u64) -> Self {
        Strategy::TopK {
            k,
            temperature: 1.0,
            seed,
        }
    }
}

/// A decoded sequence. `stopped` is true when decoding ended on the stop
/// token, which is not included in `tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: TokenSequence,
    pub stopped: bool,
}

impl Generation {
    /// Token ids as scored by the model, with the stop token re-appended.
    pub fn scored_ids(&self, stop_token: Option<u32>) -> Vec<u32> {
        let mut ids = self.tokens.ids.clone();
        if let (true, Some(s)) = (self.stopped, stop_token) {
            ids.push(s);
        }
        ids
    }
}

/// Indices of the `k` highest logits, highest first, ties to the lowest index.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// True if `token` scores at least as high as the k-th best logit.
pub fn in_top_k(logits: &[f64], k: usize, token: usize) -> bool {
    let kth = top_k_indices(logits, k)[k - 1];
    logits[token] >= logits[kth]
}

fn check_strategy(strategy: &Strategy, vocab: usize) -> Result<()> {
    if let Strategy::TopK { k, temperature, .. } = *strategy {
        if k < 1 {
            return Err(Error::invalid("k", "top-k needs k >= 1"));
        }
        if k > vocab {
            return Err(Error::invalid("k", format!("k = {k} exceeds vocabulary size {vocab}")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature", "must be positive"));
        }
    }
    Ok(())
}

fn pick(logits: &[f64], strategy: &Strategy, rng: &mut impl Rng) -> u32 {
    match *strategy {
        Strategy::Greedy => kernels::argmax(logits) as u32,
        Strategy::TopK { k, temperature, .. } => {
            let top = top_k_indices(logits, k);
            let scaled: Vec<f64> = top.iter().map(|&i| logits[i] / temperature).collect();
            let probs = kernels::softmax(&scaled);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (&i, p) in top.iter().zip(&probs) {
                acc += p;
                if u < acc {
                    return i as u32;
                }
            }
            top[top.len() - 1] as u32
        }
    }
}

/// Autoregressive decoding from a prepared decoder state.
pub fn generate_from(
    mut dec: Decoder<'_>,
    vocab_name: &str,
    strategy: &Strategy,
    max_len: usize,
    stop_token: Option<u32>,
) -> Result<Generation> {
    if max_len < 1 {
        return Err(Error::invalid("max_len", "must be at least 1"));
    }
    let mut rng = seed::rng(match *strategy {
        Strategy::TopK { seed, .. } => seed,
        Strategy::Greedy => 0,
    });
    let mut ids = Vec::with_capacity(max_len);
    let mut stopped = false;
    for step in 0..max_len {
        let tok = pick(dec.logits(), strategy, &mut rng);
        if Some(tok) == stop_token {
            stopped = true;
            break;
        }
        ids.push(tok);
        if step + 1 < max_len {
            dec.push(tok)?;
        }
    }
    Ok(Generation {
        tokens: TokenSequence::new(vocab_name, ids),
        stopped,
    })
}

/// Decode up to `max_len` tokens, stopping early on `stop_token`.
pub fn generate(
    model: &DecoderLM,
    cond: &ConditioningBundle,
    strategy: &Strategy,
    max_len: usize,
    stop_token: Option<u32>,
) -> Result<Generation> {
    check_strategy(strategy, model.config().vocab_size)?;
    let dec = model.start_decoding(cond)?;
    generate_from(dec, &model.config().target_vocab, strategy, max_len, stop_token)
}

/// `count` top-k samples sharing one prefilled prefix; sample `i` uses
/// seed `seed + i`.
pub fn sample_many(
    model: &DecoderLM,
    cond: &ConditioningBundle,
    count: usize,
    k: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Generation>> {
    let probe = Strategy::TopK { k, temperature, seed };
    check_strategy(&probe, model.config().vocab_size)?;
    let dec = model.start_decoding(cond)?;
    let stop = model.config().eos_id;
    (0..count as u64)
        .map(|i| {
            let s = Strategy::TopK {
                k,
                temperature,
                seed: seed.wrapping_add(i),
            };
            generate_from(dec.clone(), &model.config().target_vocab, &s, max_len, stop)
        })
        .collect()
}
