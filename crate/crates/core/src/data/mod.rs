//! Tokenization, GLUE-style TSV corpora, and the synthetic generators.

mod probes;
mod structured;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub use probes::{
    collapse_index, collapse_to_two_class, gen_heuristic_probes, subtree_yields, validate_probe,
    HeuristicClass, NliLabel, ProbeSpec, TwoClass, PROBE_LABELS,
};
pub use structured::{gen_structured_tasks, NegativeKind, Rule, StructuredConfig, StructuredTasks};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Token ↔ id bijection with the four reserved tokens at ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in [PAD, CLS, SEP, UNK] {
            v.add(t);
        }
        v
    }

    /// Adds a token (lowercased unless reserved); returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        let key = if is_reserved(token) {
            token.to_string()
        } else {
            token.to_lowercase()
        };
        if let Some(&id) = self.ids.get(&key) {
            return id;
        }
        self.tokens.push(key.clone());
        self.ids.insert(key, self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Vocabulary over every token in `corpora`, in order of first appearance.
    pub fn from_corpora<'a>(corpora: impl IntoIterator<Item = &'a [LabeledPair]>) -> Self {
        let mut v = Self::new();
        for corpus in corpora {
            for p in corpus {
                for t in p.sentence1.iter().chain(p.sentence2.iter().flatten()) {
                    v.add(t);
                }
            }
        }
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Self::new();
        for (i, line) in text.lines().enumerate() {
            if i < 4 {
                if v.token(i) != Some(line) {
                    return Err(Error::Data(format!(
                        "vocabulary line {}: expected reserved token {:?}, found {line:?}",
                        i + 1,
                        v.token(i).unwrap_or_default()
                    )));
                }
                continue;
            }
            if v.add(line) != i {
                return Err(Error::Data(format!("vocabulary line {}: duplicate {line:?}", i + 1)));
            }
        }
        Ok(v)
    }

    pub fn as_text(&self) -> String {
        self.tokens.join("\n")
    }
}

fn is_reserved(t: &str) -> bool {
    matches!(t, PAD | CLS | SEP | UNK)
}

/// Whitespace split, lowercase, unknown words → `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK_ID))
        .collect()
}

pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One classification example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub sentence1: Vec<String>,
    pub sentence2: Option<Vec<String>>,
    pub label: usize,
    /// Per-token categories for `sentence1`.
    pub tags: Option<Vec<String>>,
    pub heuristic: Option<HeuristicClass>,
    /// Bracketed parse of `sentence1`, when the generator knows it.
    pub parse: Option<String>,
}

impl LabeledPair {
    pub fn single(sentence1: Vec<String>, label: usize) -> Self {
        Self {
            sentence1,
            sentence2: None,
            label,
            tags: None,
            heuristic: None,
            parse: None,
        }
    }

    pub fn pair(sentence1: Vec<String>, sentence2: Vec<String>, label: usize) -> Self {
        Self {
            sentence2: Some(sentence2),
            ..Self::single(sentence1, label)
        }
    }

    /// Token count after packing with `[CLS]`/`[SEP]` markers.
    pub fn packed_len(&self) -> usize {
        2 + self.sentence1.len() + self.sentence2.as_ref().map_or(0, |s| s.len() + 1)
    }

    /// Drops tokens from the end of the longer sentence until the packed
    /// length fits. Returns whether anything was removed.
    pub fn truncate_to(&mut self, max_len: usize) -> bool {
        let mut changed = false;
        while self.packed_len() > max_len {
            let s2_len = self.sentence2.as_ref().map_or(0, Vec::len);
            if s2_len > self.sentence1.len() {
                self.sentence2.as_mut().expect("second sentence").pop();
            } else if !self.sentence1.is_empty() {
                self.sentence1.pop();
                if let Some(t) = self.tags.as_mut() {
                    t.pop();
                }
            } else if s2_len > 0 {
                self.sentence2.as_mut().expect("second sentence").pop();
            } else {
                break;
            }
            changed = true;
        }
        changed
    }
}

/// `[CLS] s1 [SEP]` or `[CLS] s1 [SEP] s2 [SEP]` as ids. Token `i` of
/// `sentence1` lands at position `i + 1`.
pub fn pack(pair: &LabeledPair, vocab: &Vocab) -> Vec<usize> {
    let mut ids = Vec::with_capacity(pair.packed_len());
    ids.push(CLS_ID);
    ids.extend(pair.sentence1.iter().map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK_ID)));
    ids.push(SEP_ID);
    if let Some(s2) = &pair.sentence2 {
        ids.extend(s2.iter().map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK_ID)));
        ids.push(SEP_ID);
    }
    ids
}

/// Column layout and label set expected by [`load_tsv`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsvSchema {
    pub paired: bool,
    /// Label strings; a label's id is its index here.
    pub labels: Vec<String>,
    pub max_len: usize,
}

impl TsvSchema {
    pub fn new(paired: bool, labels: &[&str], max_len: usize) -> Self {
        Self {
            paired,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<LabeledPair>,
    pub labels: Vec<String>,
    pub paired: bool,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn schema(&self, max_len: usize) -> TsvSchema {
        TsvSchema {
            paired: self.paired,
            labels: self.labels.clone(),
            max_len,
        }
    }

    pub fn has_tags(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.tags.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loaded {
    pub corpus: Corpus,
    /// Rows shortened to fit `max_len`.
    pub truncated: usize,
}

/// Sidecar path for per-token tags: `x.tsv` → `x.tags.tsv`.
pub fn tags_path(path: &Path) -> PathBuf {
    let stem = path
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.strip_suffix(".tsv").unwrap_or(s))
        .unwrap_or("corpus");
    path.with_file_name(format!("{stem}.tags.tsv"))
}

/// Reads a header-led, tab-separated corpus. A `.tags.tsv` sidecar next to
/// the file, if present, is attached to `sentence1`.
pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut loaded = parse_tsv(&text, path, schema)?;
    let sidecar = tags_path(path);
    if sidecar.exists() {
        let tags = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        attach_tags(&mut loaded.corpus.pairs, &tags, &sidecar)?;
    }
    Ok(loaded)
}

fn schema_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn parse_tsv(text: &str, path: &Path, schema: &TsvSchema) -> Result<Loaded> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| schema_err(path, 1, "missing header"))?
        .split('\t')
        .collect();
    let col = |name: &str| header.iter().position(|&h| h == name);
    let s1 = col("sentence1").ok_or_else(|| schema_err(path, 1, "missing column sentence1"))?;
    let s2 = if schema.paired {
        Some(col("sentence2").ok_or_else(|| schema_err(path, 1, "missing column sentence2"))?)
    } else {
        None
    };
    let lab = col("label").ok_or_else(|| schema_err(path, 1, "missing column label"))?;
    let heur = col("heuristic_class");
    let parse = col("parse");
    let mut pairs = Vec::new();
    let mut truncated = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |c: usize, name: &str| {
            fields
                .get(c)
                .copied()
                .ok_or_else(|| schema_err(path, lineno, format!("missing column {name}")))
        };
        let words = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>();
        let label_str = field(lab, "label")?;
        let label = schema
            .labels
            .iter()
            .position(|l| l == label_str)
            .ok_or_else(|| {
                Error::Data(format!("{}: line {lineno}: unknown label {label_str:?}", path.display()))
            })?;
        let mut pair = LabeledPair::single(words(field(s1, "sentence1")?), label);
        if let Some(c) = s2 {
            pair.sentence2 = Some(words(field(c, "sentence2")?));
        }
        if let Some(c) = heur {
            let h = field(c, "heuristic_class")?;
            pair.heuristic = Some(
                h.parse()
                    .map_err(|_| schema_err(path, lineno, format!("unknown heuristic class {h:?}")))?,
            );
        }
        if let Some(c) = parse {
            let p = field(c, "parse")?;
            if !p.is_empty() {
                pair.parse = Some(p.to_string());
            }
        }
        if pair.truncate_to(schema.max_len) {
            truncated += 1;
        }
        pairs.push(pair);
    }
    Ok(Loaded {
        corpus: Corpus {
            pairs,
            labels: schema.labels.clone(),
            paired: schema.paired,
        },
        truncated,
    })
}

fn attach_tags(pairs: &mut [LabeledPair], text: &str, path: &Path) -> Result<()> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != pairs.len() {
        return Err(schema_err(
            path,
            lines.len().min(pairs.len()) + 1,
            format!("{} tag lines for {} rows", lines.len(), pairs.len()),
        ));
    }
    for (i, (p, line)) in pairs.iter_mut().zip(lines).enumerate() {
        let mut tags: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        // Rows truncated on load lose their trailing tags as well.
        tags.truncate(p.sentence1.len());
        if tags.len() != p.sentence1.len() {
            return Err(schema_err(
                path,
                i + 1,
                format!("{} tags for {} tokens", tags.len(), p.sentence1.len()),
            ));
        }
        p.tags = Some(tags);
    }
    Ok(())
}

/// Writes the corpus as TSV, plus a `.tags.tsv` sidecar when every row is
/// tagged. Probe corpora gain `heuristic_class` and `parse` columns.
pub fn write_tsv(corpus: &Corpus, path: &Path) -> Result<()> {
    let with_probe = corpus.pairs.iter().any(|p| p.heuristic.is_some());
    let mut out = String::new();
    out.push_str("sentence1");
    if corpus.paired {
        out.push_str("\tsentence2");
    }
    out.push_str("\tlabel");
    if with_probe {
        out.push_str("\theuristic_class\tparse");
    }
    out.push('\n');
    for p in &corpus.pairs {
        out.push_str(&p.sentence1.join(" "));
        if corpus.paired {
            out.push('\t');
            out.push_str(&p.sentence2.as_ref().map(|s| s.join(" ")).unwrap_or_default());
        }
        out.push('\t');
        out.push_str(&corpus.labels[p.label]);
        if with_probe {
            out.push('\t');
            out.push_str(&p.heuristic.map(|h| h.to_string()).unwrap_or_default());
            out.push('\t');
            out.push_str(p.parse.as_deref().unwrap_or_default());
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())?;
    if corpus.has_tags() {
        let mut tags = String::new();
        for p in &corpus.pairs {
            tags.push_str(&p.tags.as_ref().expect("tagged").join(" "));
            tags.push('\n');
        }
        write_file(&tags_path(path), tags.as_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Train/dev pair of corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Corpus,
    pub dev: Corpus,
}

impl fmt::Display for HeuristicClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeuristicClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeuristicClass::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown heuristic class {s:?}")))
    }
}
