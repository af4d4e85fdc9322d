//! Checkpoint files: a `key=value` text manifest, a blank line, then the
//! arrays as raw little-endian `f32` values.
//!
//! ```text
//! format=abwim-checkpoint
//! version=1
//! config.d=300
//! ...
//! word.0=<pad>
//! ...
//! relation.0=<unk_relation>
//! ...
//! array=embedding.word f32 1204,300 0 1444800
//! ...
//!
//! <payload>
//! ```
//!
//! Array lines give name, dtype, comma-separated shape, byte offset and
//! byte length within the payload.

use std::io::Write;
use std::path::Path;

use gradkit::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::dataset::RawInstance;
use crate::data::embeddings::init_embeddings;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const FORMAT: &str = "abwim-checkpoint";
pub const VERSION: u32 = 1;

/// RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0;

/// Trained parameters with the vocabulary and configuration they belong to.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    /// Untrained parameters for a vocabulary built from `train`. Embedding
    /// rows and weights are drawn from stream 0 of the configured seed.
    pub fn initialize(
        config: &ModelConfig,
        train: &[RawInstance],
        min_count: usize,
        pretrained: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::build(train, min_count);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let tables = init_embeddings(&vocab, config.d, pretrained, &mut rng)?;
        let params = ModelParams::init(config, tables, &mut rng)?;
        Ok(Self { vocab, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("format={FORMAT}\nversion={VERSION}\n");
        for (k, v) in self.params.config.to_pairs() {
            manifest.push_str(&format!("config.{k}={v}\n"));
        }
        for (i, w) in self.vocab.words().iter().enumerate() {
            manifest.push_str(&format!("word.{i}={w}\n"));
        }
        for (i, r) in self.vocab.relations().iter().enumerate() {
            manifest.push_str(&format!("relation.{i}={r}\n"));
        }
        let mut payload = Vec::with_capacity(self.params.store.numel() * 4);
        for (_, name, t) in self.params.store.iter() {
            let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            let len = t.numel() * 4;
            manifest.push_str(&format!(
                "array={name} f32 {} {} {len}\n",
                shape.join(","),
                payload.len()
            ));
            for &x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        manifest.push('\n');
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a checkpoint and checks its arrays against its own configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = RawCheckpoint::parse(bytes)?;
        let params = ModelParams::from_store(raw.config, raw.store)?;
        Ok(Self {
            vocab: raw.vocab,
            params,
        })
    }

    /// Parses a checkpoint whose arrays must fit `config`; architecture
    /// fields of the stored configuration are replaced by it.
    pub fn from_bytes_for(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        let raw = RawCheckpoint::parse(bytes)?;
        let params = ModelParams::from_store(config.clone(), raw.store)?;
        Ok(Self {
            vocab: raw.vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes_for(&bytes, config)
    }
}

struct RawCheckpoint {
    config: ModelConfig,
    vocab: Vocabulary,
    store: ParamStore<f32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

impl RawCheckpoint {
    fn parse(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| corrupt("manifest terminator not found"))?;
        let manifest = std::str::from_utf8(&bytes[..split + 1])
            .map_err(|_| corrupt("manifest is not UTF-8"))?;
        let payload = &bytes[split + 2..];

        let mut lines = manifest.lines();
        if lines.next() != Some(&format!("format={FORMAT}")) {
            return Err(corrupt("not a checkpoint file"));
        }
        match lines.next() {
            Some(l) if l == format!("version={VERSION}") => {}
            other => return Err(corrupt(format!("unsupported version line {other:?}"))),
        }
        let mut config = ModelConfig::default();
        let mut words = Vec::new();
        let mut relations = Vec::new();
        let mut arrays: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("manifest line without `=`: {line}")))?;
            if let Some(k) = key.strip_prefix("config.") {
                if !config.set(k, value)? {
                    return Err(corrupt(format!("unknown configuration key `{k}`")));
                }
            } else if let Some(i) = key.strip_prefix("word.") {
                push_indexed(&mut words, i, value)?;
            } else if let Some(i) = key.strip_prefix("relation.") {
                push_indexed(&mut relations, i, value)?;
            } else if key == "array" {
                arrays.push(parse_array_line(value)?);
            } else {
                return Err(corrupt(format!("unknown manifest key `{key}`")));
            }
        }
        let vocab = Vocabulary::from_tokens(words, relations)?;

        let mut expected_offset = 0;
        let mut store = ParamStore::new();
        for (name, shape, offset, len) in arrays {
            let numel: usize = shape.iter().product();
            if offset != expected_offset || len != numel * 4 {
                return Err(corrupt(format!("array `{name}` has an inconsistent directory entry")));
            }
            let end = offset + len;
            let chunk = payload
                .get(offset..end)
                .ok_or_else(|| corrupt(format!("payload truncated inside array `{name}`")))?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if store.id(&name).is_some() {
                return Err(corrupt(format!("array `{name}` listed twice")));
            }
            store.add(name, Tensor::new(shape, data)?);
            expected_offset = end;
        }
        if payload.len() != expected_offset {
            return Err(corrupt(format!(
                "payload has {} bytes, directory accounts for {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self {
            config,
            vocab,
            store,
        })
    }
}

fn push_indexed(list: &mut Vec<String>, index: &str, value: &str) -> Result<()> {
    let i: usize = index.parse().map_err(|_| corrupt(format!("bad index `{index}`")))?;
    if i != list.len() {
        return Err(corrupt(format!("vocabulary entry {i} out of order")));
    }
    list.push(value.to_string());
    Ok(())
}

fn parse_array_line(value: &str) -> Result<(String, Vec<usize>, usize, usize)> {
    let parts: Vec<&str> = value.split(' ').collect();
    let [name, dtype, shape, offset, len] = parts.as_slice() else {
        return Err(corrupt(format!("malformed array line `{value}`")));
    };
    if *dtype != "f32" {
        return Err(corrupt(format!("unsupported dtype `{dtype}`")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt(format!("bad number `{s}`")));
    let shape = shape.split(',').map(num).collect::<Result<Vec<_>>>()?;
    Ok((name.to_string(), shape, num(offset)?, num(len)?))
}
