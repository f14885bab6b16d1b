//! Fit the semantic quantizer on noisy synthetic speaker frames and check how
//! well the learned clusters line up with the underlying token ids.
//!
//! `cargo run --release --example kmeans -- [k] [num_walks] [noise_std]`

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use tse_lm::data::{synth_speakers, SynthConfig};
use tse_lm::domain::FeatureMatrix;
use tse_lm::seed;
use tse_lm::tokenize::fit_kmeans_traced;

fn main() -> tse_lm::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let noise_std: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let config = SynthConfig::default();
    let speakers = synth_speakers(2, config.semantic_vocab, config.feature_dim, 3)?;

    // One speaker's walks with additive frame noise.
    let speaker = &speakers[0];
    let noise = Normal::new(0.0, noise_std).expect("valid noise level");
    let mut rng = seed::rng(4);
    let walks: Vec<Vec<u32>> = (0..n as u64).map(|s| speaker.walk(config.frames, s)).collect();
    let frames = walks
        .iter()
        .map(|w| {
            let clean = speaker.embed_walk(w)?;
            let values = clean.values().iter().map(|v| v + noise.sample(&mut rng)).collect();
            FeatureMatrix::new(clean.frames(), clean.dim(), values)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let fit = fit_kmeans_traced(&frames, k, 11, 100, 1e-9)?;
    println!("{} iterations", fit.iterations);
    for (i, inertia) in fit.inertia_history.iter().enumerate() {
        println!("  pass {i:>3}: inertia {inertia:.4}");
    }

    // Majority token per cluster; purity is the share of frames matching it.
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (w, f) in walks.iter().zip(&frames) {
        for (&tok, &c) in w.iter().zip(&fit.quantizer.quantize(f)?.ids) {
            *counts.entry((c, tok)).or_default() += 1;
        }
    }
    let mut best: BTreeMap<u32, usize> = BTreeMap::new();
    for (&(c, _), &count) in &counts {
        let b = best.entry(c).or_default();
        *b = (*b).max(count);
    }
    let total: usize = counts.values().sum();
    println!("cluster purity: {:.3}", best.values().sum::<usize>() as f64 / total as f64);
    Ok(())
}
