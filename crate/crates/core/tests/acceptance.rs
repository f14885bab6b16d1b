//! Exit criteria. Each test prints one `criterion NN PASS|FAIL` line to
//! stderr (uncaptured) and then asserts it. Trained models are shared
//! between criteria; a criterion's reported cost includes the training
//! time of every shared model it uses, whichever test happened to build it.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;

use common::{tgt, tiny_bundle, tiny_model, toy_task};
use tse_lm::cli;
use tse_lm::data::{FeatureFile, SynthConfig, SynthDataset};
use tse_lm::domain::{FeatureMatrix, MixtureExample};
use tse_lm::dpo::{
    build_pair, dpo_finetune, dpo_loss, dpo_loss_and_grad, mean_greedy_score, sample_candidates, DpoMode,
    PreferencePair, ProxyScorer,
};
use tse_lm::eval::{token_error_rate, AccuracyPair};
use tse_lm::lm::{generate, ConditioningBundle, DecoderLM, Generation, Grads, Strategy};
use tse_lm::pipeline::{extract, extract_acoustic_only};
use tse_lm::seed;
use tse_lm::stage::{self, acoustic_only_slots, acoustic_slots, desk_config, semantic_slots, Stage};
use tse_lm::tokenize::{fit_kmeans_traced, Quantizer};
use tse_lm::train::{ce_loss, flc_finetune, flc_generate, train_stage, TrainConfig};

const SEMANTIC_STEPS: usize = 1200;
const ACOUSTIC_STEPS: usize = 300;
const FLC_SEED: u64 = 1;
const DPO_SEED: u64 = 3;

fn report(id: u32, name: &str, pass: bool, detail: &str, cost: Duration, limit: Duration) {
    let ok = pass && cost <= limit;
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!("criterion {id:02} {verdict}: {name} [{detail}; {cost:.1?} of {limit:?}]\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

/// A shared artifact plus the time it took to build.
struct Built<T> {
    value: T,
    cost: Duration,
}

fn build<T>(cell: &'static OnceLock<Built<T>>, f: impl FnOnce() -> T) -> &'static Built<T> {
    cell.get_or_init(|| {
        let t = Instant::now();
        let value = f();
        Built { value, cost: t.elapsed() }
    })
}

fn task() -> &'static Built<(SynthConfig, SynthDataset)> {
    static CELL: OnceLock<Built<(SynthConfig, SynthDataset)>> = OnceLock::new();
    build(&CELL, toy_task)
}

fn steps(n: usize) -> TrainConfig {
    TrainConfig {
        total_steps: n,
        ..TrainConfig::desk()
    }
}

/// Base semantic model and its FLC fine-tune.
fn semantic_models() -> &'static Built<(DecoderLM, DecoderLM)> {
    static CELL: OnceLock<Built<(DecoderLM, DecoderLM)>> = OnceLock::new();
    build(&CELL, || {
        let (sc, data) = &task().value;
        let registry = sc.registry().unwrap();
        let config = desk_config(Stage::Semantic, &registry, semantic_slots(sc.feature_dim)).unwrap();
        let model = DecoderLM::new(config, registry, 1).unwrap();
        let base = train_stage(model, &data.train, &[], &steps(SEMANTIC_STEPS), "semantic")
            .unwrap()
            .checkpoint
            .model;
        let flc_cfg = TrainConfig {
            seed: FLC_SEED,
            ..cli::desk_flc_config()
        };
        let flc = flc_finetune(&base, &data.train, &[], &flc_cfg).unwrap().checkpoint.model;
        (base, flc)
    })
}

fn acoustic_model(acoustic_only: bool) -> DecoderLM {
    let (sc, data) = &task().value;
    let registry = sc.registry().unwrap();
    let slots = if acoustic_only {
        acoustic_only_slots(sc.codec_feature_dim)
    } else {
        acoustic_slots(sc.semantic_vocab, sc.codec_feature_dim)
    };
    let config = desk_config(Stage::Acoustic, &registry, slots).unwrap();
    let model = DecoderLM::new(config, registry, 2).unwrap();
    train_stage(model, &data.train, &[], &steps(ACOUSTIC_STEPS), "acoustic")
        .unwrap()
        .checkpoint
        .model
}

fn acoustic() -> &'static Built<DecoderLM> {
    static CELL: OnceLock<Built<DecoderLM>> = OnceLock::new();
    build(&CELL, || acoustic_model(false))
}

fn acoustic_only() -> &'static Built<DecoderLM> {
    static CELL: OnceLock<Built<DecoderLM>> = OnceLock::new();
    build(&CELL, || acoustic_model(true))
}

fn random_pair(rng: &mut impl Rng, cond: &ConditioningBundle, vocab: u32) -> PreferencePair {
    let mut draw = || {
        let len = rng.gen_range(1..6);
        Generation {
            tokens: tgt(&(0..len).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>()),
            stopped: rng.gen_bool(0.5),
        }
    };
    PreferencePair {
        cond: cond.clone(),
        preferred: draw(),
        dispreferred: draw(),
        score_plus: 1.0,
        score_minus: 0.0,
    }
}

#[test]
fn c01_dpo_anchor_is_ln2() {
    let t = Instant::now();
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let model = tiny_model(4, true, 1000 + i);
        let cond = tiny_bundle(2000 + i, rng.gen_range(1..5));
        let pair = random_pair(&mut rng, &cond, 4);
        let policy = model.clone();
        let beta = rng.gen_range(0.01..2.0);
        let l = dpo_loss(&policy, &model, &pair, beta).unwrap();
        worst = worst.max((l - std::f64::consts::LN_2).abs());
    }
    report(
        1,
        "policy == reference gives ln 2",
        worst <= 1e-6,
        &format!("max |loss - ln2| = {worst:.2e} over 100 pairs"),
        t.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn c02_sequence_probabilities_normalize() {
    let t = Instant::now();
    let model = tiny_model(2, false, 21);
    let cond = tiny_bundle(22, 3);
    let mut total = 0.0;
    let mut worst: f64 = 0.0;
    for a in 0..2u32 {
        for b in 0..2u32 {
            let seq = tgt(&[a, b]);
            let lp = model.sequence_log_prob(&cond, &seq).unwrap();
            total += lp.exp();
            let logits = model.forward_teacher_forced(&cond, &seq).unwrap();
            let ce = ce_loss(&logits, &seq.ids, &[true; 2]).unwrap();
            worst = worst.max((lp + 2.0 * ce).abs());
        }
    }
    let pass = (total - 1.0).abs() <= 1e-5 && worst <= 1e-12;
    report(
        2,
        "sequence probabilities sum to one and match -len * CE",
        pass,
        &format!("sum = {total:.12}, max |lp + len*ce| = {worst:.1e}"),
        t.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn c03_causality_under_suffix_perturbation() {
    let t = Instant::now();
    let model = tiny_model(6, true, 31);
    let mut rng = seed::rng(32);
    let mut violations = 0;
    for trial in 0..100 {
        let cond = tiny_bundle(100 + trial, rng.gen_range(1..5));
        let len = rng.gen_range(2..12);
        let history: Vec<u32> = (0..len).map(|_| rng.gen_range(0..7)).collect();
        let p = rng.gen_range(0..len);
        let mut perturbed = history.clone();
        for tok in &mut perturbed[p..] {
            *tok = (*tok + rng.gen_range(1..7)) % 7;
        }
        let a = model.logits_for(&cond, &history).unwrap();
        let b = model.logits_for(&cond, &perturbed).unwrap();
        // Row r scores the token after history[..r]; rows 0..=p never see
        // the perturbed positions.
        if (0..=p).any(|r| a.row(r) != b.row(r)) {
            violations += 1;
        }
    }
    report(
        3,
        "logits rows up to a perturbed position are unchanged",
        violations == 0,
        &format!("{violations} of 100 perturbations leaked"),
        t.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn c04_dpo_gradient_matches_finite_differences() {
    let t = Instant::now();
    let policy = tiny_model(4, true, 41);
    let reference = tiny_model(4, true, 42);
    let cond = tiny_bundle(43, 3);
    let pair = PreferencePair {
        cond: cond.clone(),
        preferred: Generation {
            tokens: tgt(&[1, 3, 0]),
            stopped: true,
        },
        dispreferred: Generation {
            tokens: tgt(&[2, 2, 1, 0]),
            stopped: false,
        },
        score_plus: 1.0,
        score_minus: 0.0,
    };
    let beta = 0.1;
    let mut grads = Grads::zeros_like(&policy);
    dpo_loss_and_grad(&policy, &reference, &pair, beta, 1.0, &mut grads).unwrap();

    let mut rng = seed::rng(44);
    let (mut probed, mut worst): (usize, f64) = (0, 0.0);
    let mut attempts = 0;
    while probed < 24 && attempts < 10_000 {
        attempts += 1;
        let pi = rng.gen_range(0..policy.params().len());
        let i = rng.gen_range(0..policy.params()[pi].data.len());
        let an = grads.tensors[pi][i];
        // Entries the loss does not touch (unused embedding rows, positions
        // past the sequence) have exactly zero gradient.
        if an.abs() < 1e-8 {
            continue;
        }
        let h = 1e-5;
        let mut plus = policy.clone();
        plus.params_mut()[pi].data[i] += h;
        let mut minus = policy.clone();
        minus.params_mut()[pi].data[i] -= h;
        let fd = (dpo_loss(&plus, &reference, &pair, beta).unwrap()
            - dpo_loss(&minus, &reference, &pair, beta).unwrap())
            / (2.0 * h);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
        probed += 1;
    }
    report(
        4,
        "DPO analytic gradient matches central differences",
        probed >= 20 && worst <= 1e-3,
        &format!("{probed} parameters, max relative error {worst:.2e}"),
        t.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn c05_flc_narrows_the_exposure_gap() {
    let t = Instant::now();
    let (_, data) = &task().value;
    let shared = semantic_models();
    let (base, flc) = &shared.value;
    let before = AccuracyPair::measure(base, &data.validation).unwrap();
    let after = AccuracyPair::measure(flc, &data.validation).unwrap();
    let pass = before.gap() >= 0.02 && after.gap() < before.gap() && after.ar > before.ar;
    report(
        5,
        "exposure-bias gap after base training, narrowed by FLC",
        pass,
        &format!(
            "base TF {:.4} AR {:.4} gap {:.4}; FLC TF {:.4} AR {:.4} gap {:.4}",
            before.tf,
            before.ar,
            before.gap(),
            after.tf,
            after.ar,
            after.gap()
        ),
        t.elapsed() + shared.cost + task().cost,
        Duration::from_secs(600),
    );
}

#[test]
fn c06_flc_contracts() {
    let t = Instant::now();
    let (sc, data) = &task().value;
    let registry = sc.registry().unwrap();
    let config = desk_config(Stage::Semantic, &registry, semantic_slots(sc.feature_dim)).unwrap();
    let frozen = DecoderLM::new(config, registry, 61).unwrap();
    let train = &data.train[..40];
    let hash = frozen.param_hash();

    let idle = flc_finetune(&frozen, train, &[], &TrainConfig { total_steps: 0, ..cli::desk_flc_config() }).unwrap();
    let clone_equal = idle.checkpoint.model.params() == frozen.params()
        && idle.checkpoint.model.param_hash() == hash;

    let tuned = flc_finetune(&frozen, train, &[], &TrainConfig { total_steps: 5, ..cli::desk_flc_config() }).unwrap();
    let frozen_kept = frozen.param_hash() == hash && tuned.checkpoint.model.param_hash() != hash;

    // Targets equal to the frozen model's own greedy decode are predicted
    // perfectly, so the FLC history is the ground truth and both losses agree.
    let mut perfect = true;
    let mut worst: f64 = 0.0;
    for ex in &data.validation[..8] {
        let cond = stage::example_bundle(frozen.config(), ex).unwrap();
        let g = generate(&frozen, &cond, &Strategy::Greedy, 12, None).unwrap();
        let targets = g.tokens.ids;
        let pred = flc_generate(&frozen, &cond, &targets).unwrap();
        perfect &= pred == targets;
        let mask = vec![true; targets.len()];
        let tf = ce_loss(&frozen.logits_for(&cond, &targets[..targets.len() - 1]).unwrap(), &targets, &mask).unwrap();
        let flc = ce_loss(&frozen.logits_for(&cond, &pred[..pred.len() - 1]).unwrap(), &targets, &mask).unwrap();
        worst = worst.max((tf - flc).abs());
    }
    report(
        6,
        "FLC clone, frozen hash and perfect-predictor reduction",
        clone_equal && frozen_kept && perfect && worst == 0.0,
        &format!("clone equal {clone_equal}, frozen kept {frozen_kept}, perfect {perfect}, |tf - flc| {worst:e}"),
        t.elapsed() + task().cost,
        Duration::from_secs(60),
    );
}

#[test]
fn c07_dpo_lifts_the_proxy_score() {
    let t = Instant::now();
    let (sc, data) = &task().value;
    let shared = acoustic_only();
    let model = &shared.value;
    let scorer = ProxyScorer { codec: sc.codec() };
    let before = mean_greedy_score(model, &data.validation, &scorer).unwrap();
    let mut delta = BTreeMap::new();
    for mode in [DpoMode::DpoOnly, DpoMode::CeOnly] {
        let mut cfg = cli::desk_dpo_config();
        cfg.mode = mode;
        cfg.train.seed = DPO_SEED;
        let out = dpo_finetune(model, &data.train, &scorer, &cfg).unwrap();
        let after = mean_greedy_score(&out.checkpoint.model, &data.validation, &scorer).unwrap();
        delta.insert(mode.to_string(), after - before);
    }
    let (dpo, ce) = (delta["dpo_only"], delta["ce_only"]);
    report(
        7,
        "400-step DPO raises the greedy proxy score more than CE",
        dpo > 0.0 && ce.abs() < dpo,
        &format!("before {before:.4}, dpo_only {dpo:+.4}, ce_only {ce:+.4}"),
        t.elapsed() + shared.cost + task().cost,
        Duration::from_secs(600),
    );
}

#[test]
fn c08_candidates_respect_top_k() {
    let t = Instant::now();
    let (sc, data) = &task().value;
    let registry = sc.registry().unwrap();
    let config = desk_config(
        Stage::Acoustic,
        &registry,
        acoustic_slots(sc.semantic_vocab, sc.codec_feature_dim),
    )
    .unwrap();
    let model = DecoderLM::new(config, registry, 81).unwrap();
    let scorer = ProxyScorer { codec: sc.codec() };
    let (m, k) = (32, 16);
    let mut outside = 0;
    let mut checked = 0;
    for (i, ex) in data.validation[..3].iter().enumerate() {
        let cond = stage::example_bundle(model.config(), ex).unwrap();
        let cands = sample_candidates(&model, &cond, m, k, 24, 500 + i as u64).unwrap();
        for c in &cands {
            let ids = c.scored_ids(model.config().eos_id);
            let logits = model.logits_for(&cond, &ids[..ids.len() - 1]).unwrap();
            for (row, &y) in logits.iter_rows().zip(&ids) {
                // In the top k iff fewer than k logits beat it.
                let better = row.iter().filter(|&&v| v > row[y as usize]).count();
                outside += usize::from(better >= k);
                checked += 1;
            }
        }
    }
    let ex = &data.validation[0];
    let cond = stage::example_bundle(model.config(), ex).unwrap();
    let ones = sample_candidates(&model, &cond, m, 1, 24, 9).unwrap();
    let identical = ones.iter().all(|c| c == &ones[0]);
    let no_pair = build_pair(&ones, &scorer, ex, &cond).unwrap().is_none();
    report(
        8,
        "sampled tokens lie in the top k; k = 1 gives no pair",
        outside == 0 && identical && no_pair,
        &format!("{outside} of {checked} tokens outside top-{k}; k=1 identical {identical}, pair none {no_pair}"),
        t.elapsed() + task().cost,
        Duration::from_secs(60),
    );
}

#[test]
fn c09_kmeans_oracles() {
    let t = Instant::now();
    let mut rng = seed::rng(91);
    let dim = 4;
    let rows: Vec<Vec<f64>> = (0..2000).map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let fit = fit_kmeans_traced(&[FeatureMatrix::from_rows(&rows).unwrap()], 8, 92, 100, 0.0).unwrap();
    let monotone = fit.inertia_history.windows(2).all(|w| w[1] <= w[0]);

    let frames: Vec<Vec<f64>> = (0..10_000).map(|_| (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
    let got = fit.quantizer.quantize(&FeatureMatrix::from_rows(&frames).unwrap()).unwrap();
    let mismatches = frames
        .iter()
        .zip(&got.ids)
        .filter(|(x, &id)| {
            let d = |j: usize| -> f64 { x.iter().zip(fit.quantizer.centroid(j)).map(|(a, b)| (a - b).powi(2)).sum() };
            let best = (0..fit.quantizer.k()).min_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b))).unwrap();
            best != id as usize
        })
        .count();

    // Brute force over the three contiguous partitions of the sorted 1-D
    // points: {0 | 0.1 10 10.1}, {0 0.1 | 10 10.1}, {0 0.1 10 | 10.1}.
    let pts = [0.0, 0.1, 10.0, 10.1];
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let cut = (1..4).min_by(|&a, &b| (sse(&pts[..a]) + sse(&pts[a..])).total_cmp(&(sse(&pts[..b]) + sse(&pts[b..])))).unwrap();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let want = [mean(&pts[..cut]), mean(&pts[cut..])];
    let one_d = FeatureMatrix::new(4, 1, pts.to_vec()).unwrap();
    let q: Quantizer = fit_kmeans_traced(&[one_d], 2, 93, 100, 0.0).unwrap().quantizer;
    let mut c = [q.centroid(0)[0], q.centroid(1)[0]];
    c.sort_by(f64::total_cmp);
    let err = (c[0] - want[0]).abs().max((c[1] - want[1]).abs());

    report(
        9,
        "quantizer matches brute force; inertia monotone; 1-D fixture",
        mismatches == 0 && monotone && err <= 1e-9,
        &format!(
            "{mismatches} of 10000 mismatches, {} iterations monotone {monotone}, centroids {c:?} vs {want:?}",
            fit.iterations
        ),
        t.elapsed(),
        Duration::from_secs(30),
    );
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

#[test]
fn c10_two_stage_beats_acoustic_only() {
    let t = Instant::now();
    let (sc, data) = &task().value;
    let (sem, aco, only) = (semantic_models(), acoustic(), acoustic_only());
    let codec = sc.codec();
    let (mut two, mut solo) = (0.0, 0.0);
    for ex in &data.validation {
        let (r, m) = sides(ex);
        let out = extract(&sem.value.1, &aco.value, &r, &m, &codec, None, &Strategy::Greedy).unwrap();
        two += token_error_rate(&out.acoustic.tokens, &ex.target_acoustic).unwrap();
        let base = extract_acoustic_only(&only.value, &r, &m, &codec, &Strategy::Greedy).unwrap();
        solo += token_error_rate(&base.acoustic.tokens, &ex.target_acoustic).unwrap();
    }
    let n = data.validation.len() as f64;
    let (two, solo) = (two / n, solo / n);
    report(
        10,
        "two-stage extraction beats an acoustic-only model",
        two < solo,
        &format!("two-stage TER {two:.4}, acoustic-only TER {solo:.4} ({ACOUSTIC_STEPS} acoustic steps each)"),
        t.elapsed() + sem.cost + aco.cost + only.cost + task().cost,
        Duration::from_secs(900),
    );
}

fn run_cli(args: &[String]) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run_with(args.iter().cloned(), &mut out, &mut err);
    assert_eq!(code, 0, "{args:?}: {}", String::from_utf8_lossy(&err));
}

/// The full smoke pipeline under `root`; returns every artifact by relative path.
fn smoke_pipeline(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let data = p("data");
    let steps = [
        format!("data synth --out {data} --num-examples 60 --frames 8 --ref-frames 4 --seed 5"),
        format!("tokenize fit-kmeans --in {data}/manifest.tsv --k 8 --out {} --seed 5", p("kmeans.json")),
        format!("train semantic --data {data} --out {} --steps 30 --warmup-steps 5 --seed 5", p("sem")),
        format!("train acoustic --data {data} --out {} --steps 30 --warmup-steps 5 --seed 5", p("aco")),
        format!("flc --frozen {} --stage semantic --data {data} --out {} --steps 10 --seed 5", p("sem"), p("sem_flc")),
        format!("dpo --init {} --data {data} --out {} --steps 4 --m 4 --k 4 --seed 5", p("aco"), p("aco_dpo")),
        format!(
            "extract --sem {} --aco {} --ref {data}/items/00019.ref.json --mix {data}/items/00019.mix.json --out {} --dump-tokens {}",
            p("sem_flc"),
            p("aco_dpo"),
            p("out.wav"),
            p("tokens")
        ),
        format!("evaluate --ckpt {} --aco {} --data {data} --out {}", p("sem_flc"), p("aco_dpo"), p("report.tsv")),
    ];
    for s in &steps {
        run_cli(&s.split_whitespace().map(String::from).collect::<Vec<_>>());
    }
    let mut files = BTreeMap::new();
    for dir in ["sem", "aco", "sem_flc", "aco_dpo", "tokens"] {
        collect(root, &root.join(dir), &mut files);
    }
    for f in ["kmeans.json", "out.wav", "report.tsv"] {
        files.insert(f.to_string(), std::fs::read(root.join(f)).unwrap());
    }
    files
}

fn collect(root: &Path, dir: &Path, files: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(root, &path, files);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            files.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

#[test]
fn c11_cli_pipeline_is_deterministic() {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = smoke_pipeline(a.path());
    let second = smoke_pipeline(b.path());
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let same_set = first.keys().eq(second.keys());
    let has_wav = first.get("out.wav").is_some_and(|w| w.len() > 44);
    report(
        11,
        "CLI smoke pipeline is byte-identical across runs",
        differing.is_empty() && same_set && has_wav,
        &format!("{} artifacts compared, differing {differing:?}", first.len()),
        t.elapsed(),
        Duration::from_secs(900),
    );
}
