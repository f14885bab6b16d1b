//! Checkpoint directories.
//!
//! ```text
//! ckpt/
//!   config        model hyperparameters, `key = value`
//!   vocabs        `name<TAB>size` per registered vocabulary
//!   meta          id, parent id, stage, step, validation CE
//!   params/index  `name<TAB>shape<TAB>file` per array, in model order
//!   params/*.bin  little-endian f64 values
//! ```
//!
//! Writing is deterministic: the same model and meta always produce the
//! same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::model::{DecoderLM, Param};
use crate::domain::{LMConfig, SlotSpec, VocabRegistry};
use crate::error::{Error, Result};
use crate::kv::{self, KvFile};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Lineage and bookkeeping stored next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Parameter version of the stored model.
    pub id: String,
    /// Id of the checkpoint this one was fine-tuned from.
    pub parent: Option<String>,
    /// Producing procedure, e.g. `semantic`, `acoustic`, `flc`, `dpo`.
    pub stage: String,
    pub step: usize,
    pub val_ce: Option<f64>,
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(stage: impl Into<String>) -> Self {
        Self {
            id: String::new(),
            parent: None,
            stage: stage.into(),
            step: 0,
            val_ce: None,
            extra: BTreeMap::new(),
        }
    }
}

/// A model plus its lineage record.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DecoderLM,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: DecoderLM, mut meta: CheckpointMeta) -> Self {
        meta.id = model.param_version();
        Self { model, meta }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params_dir = dir.join("params");
        fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
        let write = |p: &Path, bytes: &[u8]| fs::write(p, bytes).map_err(|e| Error::io(p, e));

        write(&dir.join("config"), config_text(self.model.config()).as_bytes())?;

        let mut vocabs = String::new();
        for (name, size) in self.model.registry().iter() {
            let _ = writeln!(vocabs, "{name}\t{size}");
        }
        write(&dir.join("vocabs"), vocabs.as_bytes())?;

        let id = self.model.param_version();
        let mut pairs = vec![
            ("format_version", CHECKPOINT_FORMAT_VERSION.to_string()),
            ("id", id),
            ("parent", self.meta.parent.clone().unwrap_or_else(|| "none".into())),
            ("stage", self.meta.stage.clone()),
            ("step", self.meta.step.to_string()),
            (
                "val_ce",
                self.meta.val_ce.map_or_else(|| "none".into(), |v| v.to_string()),
            ),
        ];
        let extra: Vec<(String, String)> = self
            .meta
            .extra
            .iter()
            .map(|(k, v)| (format!("extra.{k}"), v.clone()))
            .collect();
        pairs.extend(extra.iter().map(|(k, v)| (k.as_str(), v.clone())));
        write(&dir.join("meta"), kv::render(&pairs).as_bytes())?;

        let mut index = String::new();
        for (i, p) in self.model.params().iter().enumerate() {
            let file = format!("{i:03}.bin");
            let shape: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(index, "{}\t{}\t{file}", p.name, shape.join(","));
            let bytes: Vec<u8> = p.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            write(&params_dir.join(file), &bytes)?;
        }
        write(&params_dir.join("index"), index.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = parse_config(&KvFile::load(&dir.join("config"))?)?;

        let vpath = dir.join("vocabs");
        let vtext = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
        let mut registry = VocabRegistry::new();
        for (i, line) in vtext.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Parse {
                path: vpath.clone(),
                line: i + 1,
                reason: "expected `name<TAB>size`".into(),
            };
            let (name, size) = line.split_once('\t').ok_or_else(bad)?;
            registry.register(name, size.parse().map_err(|_| bad())?)?;
        }

        let meta_kv = KvFile::load(&dir.join("meta"))?;
        let version: u32 = meta_kv.require("format_version")?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let none_or = |k: &str| -> Option<String> {
            meta_kv.get(k).filter(|v| *v != "none").map(str::to_string)
        };
        let meta = CheckpointMeta {
            id: meta_kv.require("id")?,
            parent: none_or("parent"),
            stage: meta_kv.require("stage")?,
            step: meta_kv.require("step")?,
            val_ce: none_or("val_ce")
                .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad val_ce".into())))
                .transpose()?,
            extra: meta_kv
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
                .collect(),
        };

        let pdir = dir.join("params");
        let ipath = pdir.join("index");
        let itext = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let mut params = Vec::new();
        for (i, line) in itext.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |reason: &str| Error::Parse {
                path: ipath.clone(),
                line: i + 1,
                reason: reason.into(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let [name, shape, file] = cols.as_slice() else {
                return Err(bad("expected `name<TAB>shape<TAB>file`"));
            };
            let shape: Vec<usize> = shape
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad shape"))?;
            let fpath = pdir.join(file);
            let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
            if bytes.len() != 8 * shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("{} has the wrong size", fpath.display())));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Param {
                name: name.to_string(),
                shape,
                data,
            });
        }
        let model = DecoderLM::from_params(config, registry, params)?;
        if model.param_version() != meta.id {
            return Err(Error::Checkpoint(format!(
                "parameter hash {} does not match recorded id {}",
                model.param_version(),
                meta.id
            )));
        }
        Ok(Self { model, meta })
    }
}

fn config_text(c: &LMConfig) -> String {
    let mut pairs = vec![
        ("layers", c.layers.to_string()),
        ("heads", c.heads.to_string()),
        ("hidden", c.hidden.to_string()),
        ("ffn", c.ffn.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("eos_id", c.eos_id.map_or_else(|| "none".into(), |e| e.to_string())),
        ("max_positions", c.max_positions.to_string()),
        ("target_vocab", c.target_vocab.clone()),
        ("slots", c.conditioning_slots.len().to_string()),
    ];
    let slot_keys: Vec<String> = (0..c.conditioning_slots.len()).map(|i| format!("slot.{i}")).collect();
    for (k, s) in slot_keys.iter().zip(&c.conditioning_slots) {
        pairs.push((k.as_str(), s.to_string()));
    }
    kv::render(&pairs)
}

fn parse_config(kv: &KvFile) -> Result<LMConfig> {
    let slots: usize = kv.require("slots")?;
    let conditioning_slots = (0..slots)
        .map(|i| kv.require::<String>(&format!("slot.{i}"))?.parse::<SlotSpec>())
        .collect::<Result<Vec<_>>>()?;
    let eos_id = match kv.require::<String>("eos_id")?.as_str() {
        "none" => None,
        v => Some(v.parse().map_err(|_| Error::Config("bad eos_id".into()))?),
    };
    let cfg = LMConfig {
        layers: kv.require("layers")?,
        heads: kv.require("heads")?,
        hidden: kv.require("hidden")?,
        ffn: kv.require("ffn")?,
        vocab_size: kv.require("vocab_size")?,
        eos_id,
        max_positions: kv.require("max_positions")?,
        target_vocab: kv.require("target_vocab")?,
        conditioning_slots,
    };
    cfg.validate()?;
    Ok(cfg)
}
