//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TPRC"  u32 version  u64 entry_count
//! entry*: u64 name_len  name(UTF-8)  u64 rank  u64 extent*rank  f64 value*
//! u64 meta_len  meta(UTF-8 key=value lines)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::kv;
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPRC";
pub const VERSION: u32 = 1;

pub const META_FINGERPRINT: &str = "fingerprint";
pub const META_SEED: &str = "seed";
pub const META_HISTORY: &str = "history";
pub const META_VOCAB: &str = "vocab";
pub const META_LABELS: &str = "labels";
/// Model settings are stored under this prefix, e.g. `config.hidden`.
pub const META_CONFIG_PREFIX: &str = "config.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub params: ParamSet<F>,
    pub meta: BTreeMap<String, String>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(params: ParamSet<F>) -> Self {
        Self {
            params,
            meta: BTreeMap::new(),
        }
    }

    /// Checkpoint of a model with its config, fingerprint and seed.
    pub fn from_model(model: &Model<F>, seed: u64) -> Self {
        let mut c = Self::new(model.params.clone());
        c.meta.insert(META_FINGERPRINT.into(), model.config.fingerprint());
        c.meta.insert(META_SEED.into(), seed.to_string());
        for (k, v) in model.config.to_kv() {
            c.meta.insert(format!("{META_CONFIG_PREFIX}{k}"), v);
        }
        c
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let map: BTreeMap<String, String> = self
            .meta
            .iter()
            .filter_map(|(k, v)| Some((k.strip_prefix(META_CONFIG_PREFIX)?.to_string(), v.clone())))
            .collect();
        if map.is_empty() {
            return Err(Error::Checkpoint("no model configuration stored".into()));
        }
        ModelConfig::from_kv(&map)
    }

    /// Rebuilds the model, checking every parameter against a fresh init.
    pub fn to_model(&self) -> Result<Model<F>> {
        let config = self.model_config()?;
        let mut model = Model::init(config, 0)?;
        for (name, fresh) in model.params.iter_mut() {
            let stored = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if stored.shape() != fresh.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    stored.shape(),
                    fresh.shape()
                )));
            }
            *fresh = stored.clone();
        }
        if let Some(extra) = self.params.names().find(|n| !model.params.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn set_history(&mut self, dev_acc: &[f64]) {
        let s: Vec<String> = dev_acc.iter().map(|a| a.to_string()).collect();
        self.meta.insert(META_HISTORY.into(), s.join(","));
    }

    pub fn history(&self) -> Result<Vec<f64>> {
        match self.meta.get(META_HISTORY).map(String::as_str) {
            None | Some("") => Ok(Vec::new()),
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::Checkpoint(format!("bad history entry {x:?}")))
                })
                .collect(),
        }
    }

    pub fn set_vocab(&mut self, vocab: &Vocab) {
        self.meta.insert(META_VOCAB.into(), vocab.as_text().replace('\n', " "));
    }

    pub fn vocab(&self) -> Result<Option<Vocab>> {
        self.meta
            .get(META_VOCAB)
            .map(|s| Vocab::parse(&s.replace(' ', "\n")))
            .transpose()
    }

    pub fn set_labels(&mut self, labels: &[String]) {
        self.meta.insert(META_LABELS.into(), labels.join(" "));
    }

    pub fn labels(&self) -> Option<Vec<String>> {
        self.meta
            .get(META_LABELS)
            .map(|s| s.split(' ').map(String::from).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        let meta = kv::format(&self.meta);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = r.len()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| F::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            if params.contains(&name) {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        let meta_len = r.len()?;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let meta = kv::parse(meta_text)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}
