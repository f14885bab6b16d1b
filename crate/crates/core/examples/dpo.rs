//! Preference fine-tuning of an acoustic LM with the proxy scorer, compared
//! against plain cross-entropy continuation over the same budget.
//! The default model has no semantic slot, so its greedy outputs still carry
//! errors for preference tuning to act on.
//!
//! `cargo run --release --example dpo -- [base_steps] [dpo_steps] [lr] [contexts_per_step] [acoustic_only] [seed]`

use std::time::Instant;

use tse_lm::data::{synth_dataset, SynthConfig};
use tse_lm::dpo::{dpo_finetune, mean_greedy_score, DpoConfig, DpoMode, ProxyScorer};
use tse_lm::lm::DecoderLM;
use tse_lm::stage::{acoustic_only_slots, acoustic_slots, desk_config, Stage};
use tse_lm::train::{train_stage, Schedule, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tse_lm::Result<()> {
    let base_steps = arg(1, 300);
    let dpo_steps = arg(2, 400);
    let lr = arg(3, 5e-6);
    let contexts = arg(4, 2);
    let acoustic_only = arg(5, true);
    let seed = arg(6, 3u64);
    let sc = SynthConfig {
        frames: 16,
        ref_frames: 8,
        ..SynthConfig::default()
    };
    let data = synth_dataset(&sc, 2000, 7)?;
    let registry = sc.registry()?;
    let slots = if acoustic_only {
        acoustic_only_slots(sc.codec_feature_dim)
    } else {
        acoustic_slots(sc.semantic_vocab, sc.codec_feature_dim)
    };
    let config = desk_config(Stage::Acoustic, &registry, slots)?;
    let model = DecoderLM::new(config, registry, 2)?;

    let t = Instant::now();
    let base_cfg = TrainConfig {
        total_steps: base_steps,
        ..TrainConfig::desk()
    };
    let base = train_stage(model, &data.train, &data.validation, &base_cfg, "acoustic")?.checkpoint;
    println!("base: {base_steps} steps in {:.1?}", t.elapsed());

    let scorer = ProxyScorer { codec: sc.codec() };
    let before = mean_greedy_score(&base.model, &data.validation, &scorer)?;
    println!("greedy proxy score before: {before:.4}");

    for mode in [DpoMode::DpoOnly, DpoMode::CeOnly] {
        let cfg = DpoConfig {
            train: TrainConfig {
                batch_size: contexts,
                peak_lr: lr,
                warmup_steps: 0,
                total_steps: dpo_steps,
                schedule: Schedule::WarmupConstant,
                seed,
                ..TrainConfig::desk()
            },
            mode,
            ..DpoConfig::full()
        };
        let t = Instant::now();
        let out = dpo_finetune(&base.model, &data.train, &scorer, &cfg)?;
        let after = mean_greedy_score(&out.checkpoint.model, &data.validation, &scorer)?;
        println!(
            "{mode}: {dpo_steps} steps in {:.1?}, pairs {} skipped {}, score {after:.4} (delta {:+.4})",
            t.elapsed(),
            out.pairs_used,
            out.pairs_skipped,
            after - before
        );
    }
    Ok(())
}
