//! Train both stages plus an acoustic-only baseline, then extract the
//! held-out targets and compare token error rates.
//!
//! `cargo run --release --example extract -- [semantic_steps] [acoustic_steps] [flc_steps]`

use std::time::Instant;

use tse_lm::data::{synth_dataset, FeatureFile, SynthConfig};
use tse_lm::domain::MixtureExample;
use tse_lm::eval::token_error_rate;
use tse_lm::lm::{DecoderLM, Strategy};
use tse_lm::pipeline::{extract, extract_acoustic, extract_acoustic_only};
use tse_lm::stage::{acoustic_only_slots, acoustic_slots, desk_config, semantic_slots, Stage};
use tse_lm::train::{flc_finetune, train_stage, Schedule, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn sides(ex: &MixtureExample) -> (FeatureFile, FeatureFile) {
    (
        FeatureFile {
            semantic: ex.ref_features.clone(),
            acoustic: ex.acoustic_ref_features.clone(),
        },
        FeatureFile {
            semantic: ex.mix_features.clone(),
            acoustic: ex.acoustic_mix_features.clone(),
        },
    )
}

fn main() -> tse_lm::Result<()> {
    let sem_steps = arg(1, 1200);
    let aco_steps = arg(2, 300);
    let flc_steps = arg(3, 300);
    let sc = SynthConfig {
        frames: 16,
        ref_frames: 8,
        ..SynthConfig::default()
    };
    let data = synth_dataset(&sc, 2000, 7)?;
    let registry = sc.registry()?;
    let codec = sc.codec();
    let steps = |n| TrainConfig {
        total_steps: n,
        ..TrainConfig::desk()
    };

    let t = Instant::now();
    let sem_cfg = desk_config(Stage::Semantic, &registry, semantic_slots(sc.feature_dim))?;
    let sem = DecoderLM::new(sem_cfg, registry.clone(), 1)?;
    let mut sem = train_stage(sem, &data.train, &[], &steps(sem_steps), "semantic")?.checkpoint.model;
    if flc_steps > 0 {
        let flc_cfg = TrainConfig {
            total_steps: flc_steps,
            peak_lr: 1e-3,
            warmup_steps: 0,
            schedule: Schedule::WarmupConstant,
            ..TrainConfig::desk()
        };
        sem = flc_finetune(&sem, &data.train, &[], &flc_cfg)?.checkpoint.model;
    }
    println!("semantic stage ready in {:.1?}", t.elapsed());

    let t = Instant::now();
    let aco_cfg = desk_config(
        Stage::Acoustic,
        &registry,
        acoustic_slots(sc.semantic_vocab, sc.codec_feature_dim),
    )?;
    let aco = DecoderLM::new(aco_cfg, registry.clone(), 2)?;
    let aco = train_stage(aco, &data.train, &[], &steps(aco_steps), "acoustic")?.checkpoint.model;
    let only_cfg = desk_config(Stage::Acoustic, &registry, acoustic_only_slots(sc.codec_feature_dim))?;
    let only = DecoderLM::new(only_cfg, registry, 2)?;
    let only = train_stage(only, &data.train, &[], &steps(aco_steps), "acoustic-only")?.checkpoint.model;
    println!("acoustic models ready in {:.1?}", t.elapsed());

    let (mut two, mut oracle, mut base, mut sem_ter) = (0.0, 0.0, 0.0, 0.0);
    for ex in &data.validation {
        let (r, m) = sides(ex);
        let out = extract(&sem, &aco, &r, &m, &codec, None, &Strategy::Greedy)?;
        let s_bar = out.semantic.as_ref().expect("two-stage output");
        sem_ter += token_error_rate(&s_bar.tokens, &ex.target_semantic)?;
        two += token_error_rate(&out.acoustic.tokens, &ex.target_acoustic)?;
        let (gt, _) = extract_acoustic(&aco, Some(&ex.target_semantic), &r, &m, &codec, None, &Strategy::Greedy)?;
        oracle += token_error_rate(&gt.tokens, &ex.target_acoustic)?;
        let solo = extract_acoustic_only(&only, &r, &m, &codec, &Strategy::Greedy)?;
        base += token_error_rate(&solo.acoustic.tokens, &ex.target_acoustic)?;
    }
    let n = data.validation.len() as f64;
    println!("semantic TER            {:.4}", sem_ter / n);
    println!("two-stage acoustic TER  {:.4}", two / n);
    println!("oracle-semantics TER    {:.4}", oracle / n);
    println!("acoustic-only TER       {:.4}", base / n);
    Ok(())
}
