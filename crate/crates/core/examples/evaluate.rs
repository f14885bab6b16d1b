//! Train small models for both stages, extract the held-out targets and
//! write a metric report. An optional external metric receives the
//! extracted waveforms as a path list on stdin.
//!
//! `cargo run --release --example evaluate -- [steps] [metric_program]`

use std::path::PathBuf;

use tse_lm::data::{synth_dataset, FeatureFile, SynthConfig};
use tse_lm::eval::{cosine_similarity, run_metric_plugin, speaker_embedding, token_error_rate, AccuracyPair, Report};
use tse_lm::lm::{DecoderLM, Strategy};
use tse_lm::pipeline::extract;
use tse_lm::stage::{acoustic_slots, desk_config, semantic_slots, Stage};
use tse_lm::tokenize::Codec;
use tse_lm::train::{train_stage, TrainConfig};
use tse_lm::wav::write_wav;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let plugin = std::env::args().nth(2).map(PathBuf::from);
    let sc = SynthConfig {
        frames: 12,
        ref_frames: 8,
        ..SynthConfig::default()
    };
    let data = synth_dataset(&sc, 600, 5)?;
    let registry = sc.registry()?;
    let codec = sc.codec();
    let cfg = TrainConfig {
        total_steps: steps,
        ..TrainConfig::desk()
    };
    let sem_cfg = desk_config(Stage::Semantic, &registry, semantic_slots(sc.feature_dim))?;
    let sem = train_stage(DecoderLM::new(sem_cfg, registry.clone(), 1)?, &data.train, &[], &cfg, "semantic")?;
    let aco_cfg = desk_config(
        Stage::Acoustic,
        &registry,
        acoustic_slots(sc.semantic_vocab, sc.codec_feature_dim),
    )?;
    let aco = train_stage(DecoderLM::new(aco_cfg, registry, 2)?, &data.train, &[], &cfg, "acoustic")?;
    let (sem, aco) = (&sem.checkpoint.model, &aco.checkpoint.model);

    let mut report = Report::default();
    let acc = AccuracyPair::measure(sem, &data.validation)?;
    report.push("semantic.tf_accuracy", acc.tf);
    report.push("semantic.ar_accuracy", acc.ar);

    let out_dir = std::env::temp_dir().join("tse-lm-evaluate");
    std::fs::create_dir_all(&out_dir)?;
    let (mut ter, mut secs) = (0.0, 0.0);
    let mut wavs = Vec::new();
    for (i, ex) in data.validation.iter().enumerate() {
        let reference = FeatureFile {
            semantic: ex.ref_features.clone(),
            acoustic: ex.acoustic_ref_features.clone(),
        };
        let mixture = FeatureFile {
            semantic: ex.mix_features.clone(),
            acoustic: ex.acoustic_mix_features.clone(),
        };
        let out = extract(sem, aco, &reference, &mixture, &codec, None, &Strategy::Greedy)?;
        ter += token_error_rate(&out.acoustic.tokens, &ex.target_acoustic)?;
        let truth = codec.decode(&ex.target_acoustic)?;
        let a = speaker_embedding(&codec.frame_features(&out.waveform)?);
        let b = speaker_embedding(&codec.frame_features(&truth)?);
        secs += cosine_similarity(&a, &b).unwrap_or(0.0);
        let path = out_dir.join(format!("{i:04}.wav"));
        write_wav(&path, &out.waveform)?;
        wavs.push(path);
    }
    let n = data.validation.len() as f64;
    report.push("extract.ter_acoustic", ter / n);
    report.push("extract.secs_proxy", secs / n);
    if let Some(program) = plugin {
        let scores = run_metric_plugin(&program, &wavs)?;
        report.push("plugin.mean", scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64);
    }

    let path = out_dir.join("report.tsv");
    report.save(&path)?;
    print!("{}", report.table());
    println!("wrote {} and {} waveforms", path.display(), wavs.len());
    Ok(())
}
