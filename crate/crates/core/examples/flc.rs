//! Frozen-LM Conditioning on top of a teacher-forced semantic LM, with a
//! before/after exposure-bias report.
//!
//! `cargo run --release --example flc -- [base_steps] [flc_steps] [flc_lr]`

use std::time::Instant;

use tse_lm::data::{synth_dataset, SynthConfig};
use tse_lm::eval::gap_report;
use tse_lm::lm::DecoderLM;
use tse_lm::stage::{desk_config, semantic_slots, Stage};
use tse_lm::train::{flc_finetune, train_stage, Schedule, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tse_lm::Result<()> {
    let base_steps = arg(1, 1200);
    let flc_steps = arg(2, 300);
    let flc_lr = arg(3, 1e-3);
    let sc = SynthConfig {
        frames: 16,
        ref_frames: 8,
        ..SynthConfig::default()
    };
    let data = synth_dataset(&sc, 2000, 7)?;
    let registry = sc.registry()?;
    let config = desk_config(Stage::Semantic, &registry, semantic_slots(sc.feature_dim))?;
    let model = DecoderLM::new(config, registry, 1)?;

    let base_cfg = TrainConfig {
        total_steps: base_steps,
        ..TrainConfig::desk()
    };
    let t = Instant::now();
    let base = train_stage(model, &data.train, &data.validation, &base_cfg, "semantic")?;
    println!("base: {base_steps} steps in {:.1?}", t.elapsed());

    let flc_cfg = TrainConfig {
        total_steps: flc_steps,
        peak_lr: flc_lr,
        warmup_steps: 0,
        schedule: Schedule::WarmupConstant,
        seed: 1,
        ..TrainConfig::desk()
    };
    let t = Instant::now();
    let flc = flc_finetune(&base.checkpoint.model, &data.train, &data.validation, &flc_cfg)?;
    println!("flc: {flc_steps} steps in {:.1?}", t.elapsed());

    let report = gap_report(&base.checkpoint.model, &flc.checkpoint.model, &data.validation)?;
    print!("{}", report.report().table());
    Ok(())
}
