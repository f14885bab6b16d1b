//! Generate a synthetic two-speaker task on disk and sanity-check it: the
//! speaker proxy embedding should tell the target's reference apart from
//! the interferer.
//!
//! `cargo run --release --example synth_data -- [out_dir] [num_examples]`

use std::path::PathBuf;

use tse_lm::data::{write_synth_dataset, SynthConfig};
use tse_lm::eval::{cosine_similarity, speaker_embedding};

fn main() -> tse_lm::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tse-lm-synth"));
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let config = SynthConfig::default();
    let ds = write_synth_dataset(&out, &config, n, 7)?;
    println!(
        "{} speakers, {} train / {} validation examples in {}",
        ds.speakers.len(),
        ds.train.len(),
        ds.validation.len(),
        out.display()
    );

    let ex = &ds.train[0];
    println!("target semantic tokens: {:?}", ex.target_semantic.ids);
    println!("target acoustic tokens: {:?}", ex.target_acoustic.ids);

    // Reference frames carry the target's voice offset, so their mean sits
    // closer to the target than to the interferer.
    let reference = speaker_embedding(&ex.ref_features);
    for spk in &ds.speakers {
        let walk = spk.walk(config.frames, 1);
        let own = speaker_embedding(&spk.embed_walk(&walk)?);
        println!(
            "{}: cosine(reference, speaker) = {:.3}",
            spk.speaker_id,
            cosine_similarity(&reference, &own)?
        );
    }
    println!(
        "target {}, interferer {}",
        ex.metadata["target_speaker"], ex.metadata["interferer_speaker"]
    );
    Ok(())
}
