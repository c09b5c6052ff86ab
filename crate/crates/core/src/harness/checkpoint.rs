//! Checkpoint file: magic `MGP1`, u16 version, config hash, u32 section
//! count, then named sections. A section carries its config as JSON and a
//! directory of (name, shape, little-endian f64 data) tensors. The file ends
//! with a SHA-256 trailer.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{read_file, verified_body, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::{ParameterStore, Tensor};
use crate::tokenizer::{ActionTokenizer, Codebook, TokenizerConfig};
use crate::transformer::{MaskedTransformer, PlanMode, TransformerConfig};

const MAGIC: &[u8; 4] = b"MGP1";
const VERSION: u16 = 1;
const TOKENIZER: &str = "tokenizer";
const CODES: &str = "codebook.codes";
const COUNTS: &str = "codebook.ema_counts";
const SUMS: &str = "codebook.ema_sums";

fn section_name(mode: PlanMode) -> String {
    format!("mgt.{}", mode.name())
}

/// A frozen tokenizer and the transformers trained on top of it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub tokenizer: ActionTokenizer,
    pub models: Vec<(PlanMode, MaskedTransformer)>,
}

struct Section {
    name: String,
    config: String,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn model(&self, mode: PlanMode) -> Option<&MaskedTransformer> {
        self.models.iter().find(|(m, _)| *m == mode).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut sections = vec![tokenizer_section(&self.tokenizer)];
        for (mode, model) in &self.models {
            sections.push(Section {
                name: section_name(*mode),
                config: serde_json::to_string(model.config()).expect("config serializes"),
                tensors: model.params().to_map(),
            });
        }
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.str(&self.config_hash);
        w.u32(sections.len() as u32);
        for s in &sections {
            w.str(&s.name);
            w.str(&s.config);
            w.u32(s.tensors.len() as u32);
            for (name, t) in &s.tensors {
                w.str(name);
                w.u32(t.shape().len() as u32);
                for &d in t.shape() {
                    w.u64(d as u64);
                }
                w.f64s(t.data());
            }
        }
        w.finish()
    }

    /// Parses a whole checkpoint; nothing is returned unless every section
    /// decodes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let body = verified_body(bytes)?;
        let mut r = Reader::new(body);
        r.take(6)?;
        let config_hash = r.str()?;
        let count = r.u32()? as usize;
        let mut tokenizer = None;
        let mut models = Vec::new();
        for _ in 0..count {
            let at = r.pos();
            let s = read_section(&mut r)?;
            let bad = |reason: String| Error::Format { offset: at, reason };
            if s.name == TOKENIZER {
                if tokenizer.is_some() {
                    return Err(bad("duplicate tokenizer section".into()));
                }
                tokenizer = Some(tokenizer_from(s).map_err(|e| bad(e.to_string()))?);
            } else {
                let mode = [PlanMode::Long, PlanMode::Short]
                    .into_iter()
                    .find(|m| section_name(*m) == s.name)
                    .ok_or_else(|| bad(format!("unknown section `{}`", s.name)))?;
                if models.iter().any(|(m, _)| *m == mode) {
                    return Err(bad(format!("duplicate section `{}`", s.name)));
                }
                let config: TransformerConfig =
                    serde_json::from_str(&s.config).map_err(|e| bad(format!("section config: {e}")))?;
                let model = MaskedTransformer::from_parts(config, ParameterStore::from_map(s.tensors))
                    .map_err(|e| bad(e.to_string()))?;
                models.push((mode, model));
            }
        }
        if r.remaining() != 0 {
            return r.fail("trailing bytes after last section");
        }
        let tokenizer = tokenizer.ok_or_else(|| Error::Format {
            offset: body.len(),
            reason: "checkpoint has no tokenizer section".into(),
        })?;
        Ok(Checkpoint {
            config_hash,
            tokenizer,
            models,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }

    /// Checks that this checkpoint's tokenizer can feed `config`.
    pub fn check_tokenizer(&self, tokenizer: &TokenizerConfig, transformer: &TransformerConfig) -> Result<()> {
        let k = self.tokenizer.config().codebook_size;
        if k != transformer.codebook_size {
            return Err(Error::Compatibility(format!(
                "tokenizer checkpoint has |K| = {k}, transformer config expects {}",
                transformer.codebook_size
            )));
        }
        if self.tokenizer.config() != tokenizer {
            return Err(Error::Compatibility(
                "tokenizer checkpoint was trained with a different tokenizer config".into(),
            ));
        }
        Ok(())
    }
}

fn tokenizer_section(tok: &ActionTokenizer) -> Section {
    let mut tensors = tok.params().to_map();
    let cb = tok.codebook();
    tensors.insert(CODES.into(), cb.codes().clone());
    let k = cb.ema_counts().len();
    tensors.insert(
        COUNTS.into(),
        Tensor::new(vec![k], cb.ema_counts().to_vec()).expect("sized"),
    );
    let n = cb.ema_sums().len();
    tensors.insert(
        SUMS.into(),
        Tensor::new(vec![n], cb.ema_sums().to_vec()).expect("sized"),
    );
    Section {
        name: TOKENIZER.into(),
        config: serde_json::to_string(tok.config()).expect("config serializes"),
        tensors,
    }
}

fn tokenizer_from(mut s: Section) -> Result<ActionTokenizer> {
    let config: TokenizerConfig =
        serde_json::from_str(&s.config).map_err(|e| Error::Config(format!("tokenizer config: {e}")))?;
    let mut take = |name: &str| {
        s.tensors
            .remove(name)
            .ok_or_else(|| Error::Compatibility(format!("tokenizer section lacks `{name}`")))
    };
    let codes = take(CODES)?;
    let counts = take(COUNTS)?.into_data();
    let sums = take(SUMS)?.into_data();
    let codebook = Codebook::with_stats(codes, counts, sums)?;
    ActionTokenizer::from_parts(config, ParameterStore::from_map(s.tensors), codebook)
}

fn read_section(r: &mut Reader) -> Result<Section> {
    let name = r.str()?;
    let config = r.str()?;
    let n = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let tname = r.str()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return r.fail(format!("tensor `{tname}` has rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= r.remaining() / 8)
            .ok_or_else(|| Error::Format {
                offset: r.pos(),
                reason: format!("tensor `{tname}` shape {shape:?} exceeds the file"),
            })?;
        let data = r.f64s(numel)?;
        if tensors.insert(tname.clone(), Tensor::new(shape, data)?).is_some() {
            return r.fail(format!("duplicate tensor `{tname}`"));
        }
    }
    Ok(Section { name, config, tensors })
}
