use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::kernels::{self, LnTape, Matrix};
use crate::domain::{FeatureMatrix, LMConfig, SlotKind, TokenSequence, VocabRegistry};
use crate::error::{Error, Result};

/// A conditioning stream payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Continuous(FeatureMatrix),
    Discrete(TokenSequence),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Continuous(f) => f.frames(),
            Payload::Discrete(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered, slot-tagged conditioning streams for one model call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditioningBundle {
    pub segments: Vec<(String, Payload)>,
}

impl ConditioningBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, slot: impl Into<String>, payload: Payload) -> Self {
        self.segments.push((slot.into(), payload));
        self
    }

    pub fn total_frames(&self) -> usize {
        self.segments.iter().map(|(_, p)| p.len()).sum()
    }

    pub fn get(&self, slot: &str) -> Option<&Payload> {
        self.segments.iter().find(|(n, _)| n == slot).map(|(_, p)| p)
    }
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// Vectors (biases, norm gains) are exempt from weight decay.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() > 1
    }
}

#[derive(Debug, Clone)]
enum SlotParams {
    Continuous { sep: usize, w: usize, b: usize, dim: usize },
    Discrete { sep: usize, emb: usize },
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    pos: usize,
    bos: usize,
    tok_emb: usize,
    slots: Vec<SlotParams>,
    blocks: Vec<BlockParams>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Sinusoid(f64),
}

/// Decoder-only transformer LM with prefix conditioning.
///
/// The assembled input is `[sep_1, slot_1 rows, sep_2, slot_2 rows, ...,
/// BOS, history tokens]` under one causal mask. Logits row `t` is read at
/// the position holding BOS (t = 0) or history token `t - 1`, so it
/// predicts target token `t` from the conditioning and targets before `t`.
#[derive(Debug, Clone)]
pub struct DecoderLM {
    config: LMConfig,
    registry: VocabRegistry,
    params: Vec<Param>,
    layout: Layout,
}

impl PartialEq for DecoderLM {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.registry == other.registry && self.params == other.params
    }
}

/// Where an assembled row's embedding came from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RowSource {
    Sep(usize),
    Continuous { slot: usize, frame: usize },
    Discrete { slot: usize, id: u32 },
    Bos,
    Target(u32),
}

/// Embedded input sequence, `rows x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub embeddings: Matrix,
    /// Row index of the begin-of-target marker.
    pub bos_row: usize,
    sources: Vec<RowSource>,
}

impl Assembled {
    pub fn len(&self) -> usize {
        self.embeddings.rows
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows == 0
    }
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct BlockTape {
    ln1: LnTape,
    a: Vec<f64>,
    qkv: Vec<f64>,
    /// Per head, `n x n` attention weights (zero above the diagonal).
    probs: Vec<Vec<f64>>,
    o: Vec<f64>,
    ln2: LnTape,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    sources: Vec<RowSource>,
    cond_payloads: Vec<Option<FeatureMatrix>>,
    bos_row: usize,
    blocks: Vec<BlockTape>,
    lnf: LnTape,
    head_in: Vec<f64>,
}

/// Per-parameter gradient buffers, aligned with [`DecoderLM::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(model: &DecoderLM) -> Self {
        Self {
            tensors: model.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }
}

fn pair_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

impl DecoderLM {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: LMConfig, registry: VocabRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        if registry.size(&config.target_vocab) != Some(config.content_vocab()) {
            return Err(Error::Config(format!(
                "target vocabulary `{}` must be registered with {} entries",
                config.target_vocab,
                config.content_vocab()
            )));
        }
        for slot in &config.conditioning_slots {
            if let SlotKind::Discrete { vocab, size } = &slot.kind {
                if registry.size(vocab) != Some(*size) {
                    return Err(Error::Config(format!(
                        "slot `{}` expects vocabulary `{vocab}` of size {size}",
                        slot.name
                    )));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Param> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| -> usize {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
                Init::Sinusoid(scale) => {
                    let (rows, cols) = (shape[0], shape[1]);
                    let mut d = vec![0.0; n];
                    for p in 0..rows {
                        for i in 0..cols / 2 {
                            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / cols as f64);
                            d[p * cols + 2 * i] = scale * (p as f64 * freq).sin();
                            d[p * cols + 2 * i + 1] = scale * (p as f64 * freq).cos();
                        }
                    }
                    d
                }
            };
            params.push(Param { name, shape, data });
            params.len() - 1
        };
        let h = config.hidden;
        let std = 0.02;
        let pos = add("pos".into(), vec![config.max_positions, h], Init::Sinusoid(std * 2f64.sqrt()));
        let bos = add("bos".into(), vec![h], Init::Normal(std));
        let tok_emb = add("tok_emb".into(), vec![config.vocab_size, h], Init::Normal(std));
        let slots = config
            .conditioning_slots
            .iter()
            .map(|s| {
                let sep = add(format!("slot.{}.sep", s.name), vec![h], Init::Normal(std));
                match &s.kind {
                    SlotKind::Continuous { dim } => SlotParams::Continuous {
                        sep,
                        w: add(
                            format!("slot.{}.proj.w", s.name),
                            vec![*dim, h],
                            Init::Normal(1.0 / (*dim as f64).sqrt()),
                        ),
                        b: add(format!("slot.{}.proj.b", s.name), vec![h], Init::Zeros),
                        dim: *dim,
                    },
                    SlotKind::Discrete { size, .. } => SlotParams::Discrete {
                        sep,
                        emb: add(format!("slot.{}.emb", s.name), vec![*size, h], Init::Normal(std)),
                    },
                }
            })
            .collect();
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("block{l}.{s}");
                BlockParams {
                    ln1_g: add(p("ln1.g"), vec![h], Init::Ones),
                    ln1_b: add(p("ln1.b"), vec![h], Init::Zeros),
                    qkv_w: add(p("attn.qkv.w"), vec![h, 3 * h], Init::Normal(std)),
                    qkv_b: add(p("attn.qkv.b"), vec![3 * h], Init::Zeros),
                    out_w: add(p("attn.out.w"), vec![h, h], Init::Normal(resid_std)),
                    out_b: add(p("attn.out.b"), vec![h], Init::Zeros),
                    ln2_g: add(p("ln2.g"), vec![h], Init::Ones),
                    ln2_b: add(p("ln2.b"), vec![h], Init::Zeros),
                    fc1_w: add(p("mlp.fc1.w"), vec![h, config.ffn], Init::Normal(std)),
                    fc1_b: add(p("mlp.fc1.b"), vec![config.ffn], Init::Zeros),
                    fc2_w: add(p("mlp.fc2.w"), vec![config.ffn, h], Init::Normal(resid_std)),
                    fc2_b: add(p("mlp.fc2.b"), vec![h], Init::Zeros),
                }
            })
            .collect();
        let lnf_g = add("ln_f.g".into(), vec![h], Init::Ones);
        let lnf_b = add("ln_f.b".into(), vec![h], Init::Zeros);
        let head_w = add("head.w".into(), vec![h, config.vocab_size], Init::Normal(std));
        let head_b = add("head.b".into(), vec![config.vocab_size], Init::Zeros);
        let layout = Layout {
            pos,
            bos,
            tok_emb,
            slots,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        };
        Ok(Self {
            config,
            registry,
            params,
            layout,
        })
    }

    /// Rebuild a model from stored parameters, checking names and shapes.
    pub fn from_params(config: LMConfig, registry: VocabRegistry, params: Vec<Param>) -> Result<Self> {
        let mut model = Self::new(config, registry, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.shape != p.shape || p.data.len() != slot.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name, p.shape, slot.name, slot.shape
                )));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn registry(&self) -> &VocabRegistry {
        &self.registry
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable parameter access for optimizers. Shapes must not change.
    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Set the output projection to zero, making every logits row uniform.
    pub fn zero_output_head(&mut self) {
        let (w, b) = (self.layout.head_w, self.layout.head_b);
        self.params[w].data.iter_mut().for_each(|v| *v = 0.0);
        self.params[b].data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for s in &p.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Short checkpoint id derived from [`DecoderLM::param_hash`].
    pub fn param_version(&self) -> String {
        self.param_hash()[..16].to_string()
    }

    /// True if `other` has the same architecture and vocabularies.
    pub fn compatible_with(&self, other: &DecoderLM) -> bool {
        self.config == other.config && self.registry == other.registry
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params[i].data
    }

    // -----------------------------------------------------------------------
    // Assembly

    fn check_bundle(&self, cond: &ConditioningBundle) -> Result<()> {
        let slots = &self.config.conditioning_slots;
        let names: Vec<&str> = cond.segments.iter().map(|(n, _)| n.as_str()).collect();
        let expected: Vec<&str> = slots.iter().map(|s| s.name.as_str()).collect();
        if names != expected {
            return Err(Error::invalid(
                "conditioning",
                format!("slots {names:?} do not match model slots {expected:?}"),
            ));
        }
        for (spec, (name, payload)) in slots.iter().zip(&cond.segments) {
            let field = format!("conditioning.{name}");
            match (&spec.kind, payload) {
                (SlotKind::Continuous { dim }, Payload::Continuous(f)) => {
                    if f.dim() != *dim {
                        return Err(Error::invalid(
                            field,
                            format!("feature dim {} != slot dim {dim}", f.dim()),
                        ));
                    }
                    f.validate(&field)?;
                }
                (SlotKind::Discrete { vocab, size }, Payload::Discrete(t)) => {
                    if &t.vocab_name != vocab {
                        return Err(Error::invalid(
                            field,
                            format!("vocabulary `{}` != slot vocabulary `{vocab}`", t.vocab_name),
                        ));
                    }
                    if let Some(id) = t.ids.iter().find(|&&id| id as usize >= *size) {
                        return Err(Error::invalid(field, format!("id out of range: {id}")));
                    }
                    if t.is_empty() {
                        return Err(Error::invalid(field, "empty token stream"));
                    }
                }
                _ => {
                    return Err(Error::invalid(field, "payload kind does not match slot kind"));
                }
            }
        }
        Ok(())
    }

    fn check_history(&self, history: &[u32]) -> Result<()> {
        if let Some(id) = history.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::invalid(
                "targets",
                format!("id out of range: {id} >= {}", self.config.vocab_size),
            ));
        }
        Ok(())
    }

    /// Embed conditioning and target history into one input sequence.
    pub fn assemble(&self, cond: &ConditioningBundle, history: &[u32]) -> Result<Assembled> {
        self.check_bundle(cond)?;
        self.check_history(history)?;
        let total = cond.total_frames() + cond.segments.len() + 1 + history.len();
        if total > self.config.max_positions {
            return Err(Error::Shape(format!(
                "assembled length {total} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let h = self.config.hidden;
        let mut x = Vec::with_capacity(total * h);
        let mut sources = Vec::with_capacity(total);
        for (s, (sp, (_, payload))) in self.layout.slots.iter().zip(&cond.segments).enumerate() {
            match (sp, payload) {
                (SlotParams::Continuous { sep, w, b, dim }, Payload::Continuous(f)) => {
                    x.extend_from_slice(self.p(*sep));
                    sources.push(RowSource::Sep(s));
                    x.extend(kernels::linear(f.values(), *dim, self.p(*w), self.p(*b), h));
                    sources.extend((0..f.frames()).map(|frame| RowSource::Continuous { slot: s, frame }));
                }
                (SlotParams::Discrete { sep, emb }, Payload::Discrete(t)) => {
                    x.extend_from_slice(self.p(*sep));
                    sources.push(RowSource::Sep(s));
                    for &id in &t.ids {
                        x.extend_from_slice(&self.p(*emb)[id as usize * h..(id as usize + 1) * h]);
                        sources.push(RowSource::Discrete { slot: s, id });
                    }
                }
                _ => unreachable!("bundle checked against slots"),
            }
        }
        let bos_row = sources.len();
        x.extend_from_slice(self.p(self.layout.bos));
        sources.push(RowSource::Bos);
        let tok = self.p(self.layout.tok_emb);
        for &id in history {
            x.extend_from_slice(&tok[id as usize * h..(id as usize + 1) * h]);
            sources.push(RowSource::Target(id));
        }
        let pos = self.p(self.layout.pos);
        for (xv, pv) in x.iter_mut().zip(pos) {
            *xv += pv;
        }
        Ok(Assembled {
            embeddings: Matrix::from_vec(total, h, x),
            bos_row,
            sources,
        })
    }

    // -----------------------------------------------------------------------
    // Forward

    fn block_forward(
        &self,
        l: usize,
        x: &mut [f64],
        start: usize,
        cache: &mut LayerCache,
        tape: Option<&mut BlockTape>,
    ) {
        let bp = &self.layout.blocks[l];
        let h = self.config.hidden;
        let nh = self.config.heads;
        let dh = h / nh;
        let f = self.config.ffn;
        let n = x.len() / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, ln1) = kernels::layer_norm(x, h, self.p(bp.ln1_g), self.p(bp.ln1_b));
        let qkv = kernels::linear(&a, h, self.p(bp.qkv_w), self.p(bp.qkv_b), 3 * h);
        for row in qkv.chunks_exact(3 * h) {
            cache.k.extend_from_slice(&row[h..2 * h]);
            cache.v.extend_from_slice(&row[2 * h..]);
        }
        let keep = tape.is_some();
        let mut probs = if keep { vec![vec![0.0; n * n]; nh] } else { Vec::new() };
        let mut o = vec![0.0; n * h];
        let mut scores = Vec::with_capacity(start + n);
        for i in 0..n {
            let pos = start + i;
            for hd in 0..nh {
                let q = &qkv[i * 3 * h + hd * dh..i * 3 * h + (hd + 1) * dh];
                scores.clear();
                for j in 0..=pos {
                    scores.push(kernels::dot(q, &cache.k[j * h + hd * dh..j * h + (hd + 1) * dh]) * scale);
                }
                let p = kernels::softmax(&scores);
                let oi = &mut o[i * h + hd * dh..i * h + (hd + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &cache.v[j * h + hd * dh..j * h + (hd + 1) * dh];
                    for (ov, &vv) in oi.iter_mut().zip(vj) {
                        *ov += pj * vv;
                    }
                }
                if keep {
                    probs[hd][i * n..i * n + p.len()].copy_from_slice(&p);
                }
            }
        }
        let y = kernels::linear(&o, h, self.p(bp.out_w), self.p(bp.out_b), h);
        for (xv, yv) in x.iter_mut().zip(&y) {
            *xv += yv;
        }
        let (b, ln2) = kernels::layer_norm(x, h, self.p(bp.ln2_g), self.p(bp.ln2_b));
        let u = kernels::linear(&b, h, self.p(bp.fc1_w), self.p(bp.fc1_b), f);
        let g: Vec<f64> = u.iter().map(|&v| kernels::gelu(v)).collect();
        let z = kernels::linear(&g, f, self.p(bp.fc2_w), self.p(bp.fc2_b), h);
        for (xv, zv) in x.iter_mut().zip(&z) {
            *xv += zv;
        }
        if let Some(t) = tape {
            *t = BlockTape {
                ln1,
                a,
                qkv,
                probs,
                o,
                ln2,
                b,
                u,
                g,
            };
        }
    }

    fn head(&self, x: &[f64]) -> (Vec<f64>, LnTape, Vec<f64>) {
        let h = self.config.hidden;
        let (xf, lnf) = kernels::layer_norm(x, h, self.p(self.layout.lnf_g), self.p(self.layout.lnf_b));
        let logits = kernels::linear(
            &xf,
            h,
            self.p(self.layout.head_w),
            self.p(self.layout.head_b),
            self.config.vocab_size,
        );
        (logits, lnf, xf)
    }

    fn run(&self, asm: &Assembled, tape: Option<&mut Tape>) -> (Matrix, Vec<LayerCache>) {
        let h = self.config.hidden;
        let mut x = asm.embeddings.data.clone();
        let mut caches = vec![LayerCache::default(); self.config.layers];
        let mut block_tapes = Vec::new();
        for (l, cache) in caches.iter_mut().enumerate() {
            if tape.is_some() {
                let mut bt = BlockTape::default();
                self.block_forward(l, &mut x, 0, cache, Some(&mut bt));
                block_tapes.push(bt);
            } else {
                self.block_forward(l, &mut x, 0, cache, None);
            }
        }
        let rows = asm.len() - asm.bos_row;
        let (logits, lnf, head_in) = self.head(&x[asm.bos_row * h..]);
        if let Some(t) = tape {
            t.blocks = block_tapes;
            t.lnf = lnf;
            t.head_in = head_in;
        }
        (Matrix::from_vec(rows, self.config.vocab_size, logits), caches)
    }

    /// Logits for `history.len() + 1` positions: row `t` scores the token
    /// following `history[..t]`.
    pub fn logits_for(&self, cond: &ConditioningBundle, history: &[u32]) -> Result<Matrix> {
        let asm = self.assemble(cond, history)?;
        Ok(self.run(&asm, None).0)
    }

    /// Teacher-forced logits, one row per target token.
    pub fn forward_teacher_forced(&self, cond: &ConditioningBundle, targets: &TokenSequence) -> Result<Matrix> {
        self.check_target_vocab(targets)?;
        if targets.is_empty() {
            return Err(Error::invalid("targets", "empty sequence"));
        }
        self.logits_for(cond, &targets.ids[..targets.len() - 1])
    }

    pub(crate) fn check_target_vocab(&self, targets: &TokenSequence) -> Result<()> {
        if targets.vocab_name != self.config.target_vocab {
            return Err(Error::invalid(
                "targets.vocab_name",
                format!(
                    "model predicts `{}`, got `{}`",
                    self.config.target_vocab, targets.vocab_name
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass that records activations for [`DecoderLM::backward`].
    pub fn forward_train(&self, cond: &ConditioningBundle, history: &[u32]) -> Result<(Matrix, Tape)> {
        let asm = self.assemble(cond, history)?;
        let mut tape = Tape {
            sources: asm.sources.clone(),
            cond_payloads: cond
                .segments
                .iter()
                .map(|(_, p)| match p {
                    Payload::Continuous(f) => Some(f.clone()),
                    Payload::Discrete(_) => None,
                })
                .collect(),
            bos_row: asm.bos_row,
            blocks: Vec::new(),
            lnf: LnTape::default(),
            head_in: Vec::new(),
        };
        let (logits, _) = self.run(&asm, Some(&mut tape));
        Ok((logits, tape))
    }

    /// Accumulate parameter gradients for upstream logits gradient `dlogits`.
    pub fn backward(&self, tape: &Tape, dlogits: &Matrix, grads: &mut Grads) {
        let h = self.config.hidden;
        let v = self.config.vocab_size;
        let lay = &self.layout;
        let n = tape.sources.len();
        let g = &mut grads.tensors;

        let dxf = {
            let (dw, db) = pair_mut(g, lay.head_w, lay.head_b);
            kernels::linear_backward(&tape.head_in, h, self.p(lay.head_w), v, &dlogits.data, dw, db)
        };
        let dtail = {
            let (dg, db) = pair_mut(g, lay.lnf_g, lay.lnf_b);
            kernels::layer_norm_backward(&tape.lnf, h, self.p(lay.lnf_g), &dxf, dg, db)
        };
        let mut dx = vec![0.0; n * h];
        dx[tape.bos_row * h..].copy_from_slice(&dtail);

        for (l, bt) in tape.blocks.iter().enumerate().rev() {
            dx = self.block_backward(l, bt, n, dx, g);
        }

        // Input embeddings.
        let pos = &mut g[lay.pos];
        for (d, s) in pos.iter_mut().zip(&dx) {
            *d += s;
        }
        for (r, src) in tape.sources.iter().enumerate() {
            let dr = &dx[r * h..(r + 1) * h];
            let add = |dst: &mut [f64]| dst.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
            match *src {
                RowSource::Sep(s) => {
                    let i = match lay.slots[s] {
                        SlotParams::Continuous { sep, .. } | SlotParams::Discrete { sep, .. } => sep,
                    };
                    add(&mut g[i]);
                }
                RowSource::Continuous { slot, frame } => {
                    if let SlotParams::Continuous { w, b, dim, .. } = lay.slots[slot] {
                        let feats = tape.cond_payloads[slot].as_ref().expect("continuous payload");
                        let x = feats.row(frame);
                        let (dw, db) = pair_mut(g, w, b);
                        for (k, &xv) in x.iter().enumerate().take(dim) {
                            for (d, &s) in dw[k * h..(k + 1) * h].iter_mut().zip(dr) {
                                *d += xv * s;
                            }
                        }
                        db.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
                    }
                }
                RowSource::Discrete { slot, id } => {
                    if let SlotParams::Discrete { emb, .. } = lay.slots[slot] {
                        add(&mut g[emb][id as usize * h..(id as usize + 1) * h]);
                    }
                }
                RowSource::Bos => add(&mut g[lay.bos]),
                RowSource::Target(id) => add(&mut g[lay.tok_emb][id as usize * h..(id as usize + 1) * h]),
            }
        }
    }

    fn block_backward(&self, l: usize, bt: &BlockTape, n: usize, dx2: Vec<f64>, g: &mut [Vec<f64>]) -> Vec<f64> {
        let bp = &self.layout.blocks[l];
        let h = self.config.hidden;
        let nh = self.config.heads;
        let dh = h / nh;
        let f = self.config.ffn;
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch.
        let dgelu = {
            let (dw, db) = pair_mut(g, bp.fc2_w, bp.fc2_b);
            kernels::linear_backward(&bt.g, f, self.p(bp.fc2_w), h, &dx2, dw, db)
        };
        let du: Vec<f64> = dgelu.iter().zip(&bt.u).map(|(d, &u)| d * kernels::gelu_grad(u)).collect();
        let db_ = {
            let (dw, db) = pair_mut(g, bp.fc1_w, bp.fc1_b);
            kernels::linear_backward(&bt.b, h, self.p(bp.fc1_w), f, &du, dw, db)
        };
        let dln2 = {
            let (dg, db) = pair_mut(g, bp.ln2_g, bp.ln2_b);
            kernels::layer_norm_backward(&bt.ln2, h, self.p(bp.ln2_g), &db_, dg, db)
        };
        let mut dx1 = dx2;
        dx1.iter_mut().zip(&dln2).for_each(|(a, b)| *a += b);

        // Attention branch.
        let dout = {
            let (dw, db) = pair_mut(g, bp.out_w, bp.out_b);
            kernels::linear_backward(&bt.o, h, self.p(bp.out_w), h, &dx1, dw, db)
        };
        let mut dqkv = vec![0.0; n * 3 * h];
        let qkv = &bt.qkv;
        let mut dp = vec![0.0; n];
        for hd in 0..nh {
            let probs = &bt.probs[hd];
            let qo = hd * dh;
            let ko = h + hd * dh;
            let vo = 2 * h + hd * dh;
            for i in 0..n {
                let doi = &dout[i * h + qo..i * h + qo + dh];
                let pi = &probs[i * n..i * n + i + 1];
                let mut sum = 0.0;
                for j in 0..=i {
                    dp[j] = kernels::dot(doi, &qkv[j * 3 * h + vo..j * 3 * h + vo + dh]);
                    sum += pi[j] * dp[j];
                }
                for j in 0..=i {
                    let ds = pi[j] * (dp[j] - sum) * scale;
                    let pj = pi[j];
                    for c in 0..dh {
                        let qi = qkv[i * 3 * h + qo + c];
                        let kj = qkv[j * 3 * h + ko + c];
                        dqkv[i * 3 * h + qo + c] += ds * kj;
                        dqkv[j * 3 * h + ko + c] += ds * qi;
                        dqkv[j * 3 * h + vo + c] += pj * doi[c];
                    }
                }
            }
        }
        let da = {
            let (dw, db) = pair_mut(g, bp.qkv_w, bp.qkv_b);
            kernels::linear_backward(&bt.a, h, self.p(bp.qkv_w), 3 * h, &dqkv, dw, db)
        };
        let dln1 = {
            let (dg, db) = pair_mut(g, bp.ln1_g, bp.ln1_b);
            kernels::layer_norm_backward(&bt.ln1, h, self.p(bp.ln1_g), &da, dg, db)
        };
        dx1.iter_mut().zip(&dln1).for_each(|(a, b)| *a += b);
        dx1
    }

    // -----------------------------------------------------------------------
    // Incremental decoding

    /// Run the conditioning prefix and return a decoder positioned before
    /// the first target token.
    pub fn start_decoding(&self, cond: &ConditioningBundle) -> Result<Decoder<'_>> {
        let asm = self.assemble(cond, &[])?;
        let (logits, caches) = self.run(&asm, None);
        Ok(Decoder {
            model: self,
            caches,
            len: asm.len(),
            logits: logits.data,
        })
    }

    /// Log-probability of `tokens` (optionally followed by end-of-sequence)
    /// under teacher forcing.
    pub fn ids_log_prob(&self, cond: &ConditioningBundle, ids: &[u32]) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::invalid("tokens", "empty sequence"));
        }
        self.check_history(ids)?;
        let logits = self.logits_for(cond, &ids[..ids.len() - 1])?;
        Ok(logits
            .iter_rows()
            .zip(ids)
            .map(|(row, &id)| kernels::log_softmax(row)[id as usize])
            .sum())
    }

    /// Sum over positions of the log-probability of each token given the
    /// conditioning and the tokens before it.
    pub fn sequence_log_prob(&self, cond: &ConditioningBundle, tokens: &TokenSequence) -> Result<f64> {
        self.check_target_vocab(tokens)?;
        self.ids_log_prob(cond, &tokens.ids)
    }
}

/// Cached autoregressive state over one conditioning prefix.
#[derive(Debug, Clone)]
pub struct Decoder<'m> {
    model: &'m DecoderLM,
    caches: Vec<LayerCache>,
    len: usize,
    logits: Vec<f64>,
}

impl Decoder<'_> {
    /// Logits for the next token.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Assembled positions consumed so far.
    pub fn position(&self) -> usize {
        self.len
    }

    /// Feed `token` and advance one position.
    pub fn push(&mut self, token: u32) -> Result<()> {
        let m = self.model;
        let h = m.config.hidden;
        if token as usize >= m.config.vocab_size {
            return Err(Error::invalid("token", format!("id out of range: {token}")));
        }
        if self.len >= m.config.max_positions {
            return Err(Error::Shape(format!(
                "decoding past max_positions {}",
                m.config.max_positions
            )));
        }
        let tok = &m.p(m.layout.tok_emb)[token as usize * h..(token as usize + 1) * h];
        let pos = &m.p(m.layout.pos)[self.len * h..(self.len + 1) * h];
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        for (l, cache) in self.caches.iter_mut().enumerate() {
            m.block_forward(l, &mut x, self.len, cache, None);
        }
        self.logits = m.head(&x).0;
        self.len += 1;
        Ok(())
    }
}
