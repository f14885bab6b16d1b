//! Train a semantic LM on a synthetic two-speaker task and report
//! teacher-forced and autoregressive accuracy on the held-out split.

use std::time::Instant;

use tse_lm::data::{synth_dataset, SynthConfig};
use tse_lm::eval::AccuracyPair;
use tse_lm::lm::DecoderLM;
use tse_lm::stage::{desk_config, semantic_slots, Stage};
use tse_lm::train::{train_stage, TrainConfig};

fn main() -> tse_lm::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let sc = SynthConfig {
        frames: 16,
        ref_frames: 8,
        ..SynthConfig::default()
    };
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let data = synth_dataset(&sc, n, 7)?;
    let registry = sc.registry()?;
    let config = desk_config(Stage::Semantic, &registry, semantic_slots(sc.feature_dim))?;
    let model = DecoderLM::new(config, registry, 1)?;
    println!("parameters: {}", model.num_params());

    let cfg = TrainConfig {
        total_steps: steps,
        ..TrainConfig::desk()
    };
    let start = Instant::now();
    let out = train_stage(model, &data.train, &data.validation, &cfg, "semantic")?;
    println!("trained {steps} steps in {:.1?}", start.elapsed());
    let acc = AccuracyPair::measure(&out.checkpoint.model, &data.validation)?;
    println!(
        "val ce {:.4}  tf {:.3}  ar {:.3}  gap {:.3}",
        out.checkpoint.meta.val_ce.unwrap_or(f64::NAN),
        acc.tf,
        acc.ar,
        acc.gap()
    );
    Ok(())
}
