//! Paired-sequence tasks that share structural rules across disjoint vocabularies.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, LabeledPair, Split, Vocab};
use crate::error::{Error, Result};

/// Transformation that maps sequence A to a positive sequence B.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Identity,
    Reverse,
    /// Rotate left by one position.
    Rotate,
    /// Replace each word with its fixed same-tag partner.
    Substitute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeKind {
    /// A reordering of the positive B.
    Shuffle,
    /// The positive B with one word swapped for another of the same tag.
    Substitute,
    Mixed,
}

macro_rules! named_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!("unknown {} {s:?}", stringify!($t)))),
                }
            }
        }
    };
}

named_enum!(Rule, Rule::Identity => "identity", Rule::Reverse => "reverse", Rule::Rotate => "rotate", Rule::Substitute => "substitute");
named_enum!(NegativeKind, NegativeKind::Shuffle => "shuffle", NegativeKind::Substitute => "substitute", NegativeKind::Mixed => "mixed");

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredConfig {
    pub rule: Rule,
    pub negative: NegativeKind,
    /// Distinct words available to each task.
    pub words_per_task: usize,
    /// Size of the shared word pool both tasks draw from.
    pub word_pool: usize,
    pub disjoint: bool,
    pub n_tags: usize,
    /// Number of tag templates shared by both tasks.
    pub templates: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub source_train: usize,
    pub source_dev: usize,
    pub target_train: usize,
    pub target_dev: usize,
    /// Probability of a positive example.
    pub balance: f64,
    /// Target labels positives 0 and negatives 1 (source uses the reverse).
    pub flip_target_labels: bool,
}

impl Default for StructuredConfig {
    fn default() -> Self {
        Self {
            rule: Rule::Reverse,
            negative: NegativeKind::Mixed,
            words_per_task: 16,
            word_pool: 64,
            disjoint: true,
            n_tags: 8,
            templates: 6,
            min_len: 3,
            max_len: 5,
            source_train: 1000,
            source_dev: 200,
            target_train: 200,
            target_dev: 200,
            balance: 0.5,
            flip_target_labels: true,
        }
    }
}

impl StructuredConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("words_per_task", self.words_per_task),
            ("word_pool", self.word_pool),
            ("n_tags", self.n_tags),
            ("templates", self.templates),
            ("source_train", self.source_train),
            ("source_dev", self.source_dev),
            ("target_train", self.target_train),
            ("target_dev", self.target_dev),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "sequence lengths {}..={} invalid (need 2 ≤ min ≤ max)",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(Error::Config(format!("balance {} outside [0, 1]", self.balance)));
        }
        if self.words_per_task < 2 * self.n_tags {
            return Err(Error::Config(format!(
                "{} words cannot give each of {} tags two words",
                self.words_per_task, self.n_tags
            )));
        }
        let needed = if self.disjoint { 2 * self.words_per_task } else { self.words_per_task };
        if needed > self.word_pool {
            return Err(Error::Config(format!(
                "{needed} words needed{} but the pool holds {}",
                if self.disjoint { " for disjoint vocabularies" } else { "" },
                self.word_pool
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredTasks {
    pub source: Split,
    pub target: Split,
    pub vocab: Vocab,
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
}

struct Lexicon {
    words: Vec<String>,
    n_tags: usize,
}

impl Lexicon {
    fn tag(&self, j: usize) -> usize {
        j % self.n_tags
    }

    fn words_with_tag(&self, tag: usize) -> impl Iterator<Item = usize> + '_ {
        (tag..self.words.len()).step_by(self.n_tags)
    }

    /// Same-tag partner: the next word of that tag, cyclically.
    fn partner(&self, j: usize) -> usize {
        let same: Vec<usize> = self.words_with_tag(self.tag(j)).collect();
        let pos = same.iter().position(|&w| w == j).expect("member");
        same[(pos + 1) % same.len()]
    }
}

fn apply_rule(rule: Rule, a: &[usize], lex: &Lexicon) -> Vec<usize> {
    match rule {
        Rule::Identity => a.to_vec(),
        Rule::Reverse => a.iter().rev().copied().collect(),
        Rule::Rotate => {
            let mut b = a.to_vec();
            b.rotate_left(1);
            b
        }
        Rule::Substitute => a.iter().map(|&j| lex.partner(j)).collect(),
    }
}

fn negative(kind: NegativeKind, b: &[usize], lex: &Lexicon, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let kind = match kind {
        NegativeKind::Mixed if rng.gen_bool(0.5) => NegativeKind::Shuffle,
        NegativeKind::Mixed => NegativeKind::Substitute,
        k => k,
    };
    match kind {
        NegativeKind::Shuffle => {
            // Every reordering of an all-equal sequence is the sequence itself.
            if b.iter().all(|&w| w == b[0]) {
                return None;
            }
            let mut c = b.to_vec();
            while c == b {
                c.shuffle(rng);
            }
            Some(c)
        }
        _ => {
            let i = rng.gen_range(0..b.len());
            let others: Vec<usize> = lex.words_with_tag(lex.tag(b[i])).filter(|&w| w != b[i]).collect();
            let mut c = b.to_vec();
            c[i] = *others.choose(rng)?;
            Some(c)
        }
    }
}

fn gen_corpus(
    n: usize,
    cfg: &StructuredConfig,
    templates: &[Vec<usize>],
    lex: &Lexicon,
    flip: bool,
    rng: &mut ChaCha8Rng,
) -> Corpus {
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let template = templates.choose(rng).expect("templates");
        let a: Vec<usize> = template
            .iter()
            .map(|&t| {
                let ws: Vec<usize> = lex.words_with_tag(t).collect();
                *ws.choose(rng).expect("words per tag")
            })
            .collect();
        let positive = rng.gen_bool(cfg.balance);
        let pos_b = apply_rule(cfg.rule, &a, lex);
        let b = if positive {
            pos_b
        } else {
            match negative(cfg.negative, &pos_b, lex, rng) {
                Some(b) => b,
                None => continue,
            }
        };
        let label = usize::from(positive != flip);
        let words = |s: &[usize]| s.iter().map(|&j| lex.words[j].clone()).collect::<Vec<_>>();
        let mut p = LabeledPair::pair(words(&a), words(&b), label);
        p.tags = Some(template.iter().map(|t| format!("t{t}")).collect());
        pairs.push(p);
    }
    Corpus {
        pairs,
        labels: vec!["0".into(), "1".into()],
        paired: true,
    }
}

/// Source and target corpora over the same tag templates and rule. With
/// `disjoint`, the two tasks draw from non-overlapping word sets.
pub fn gen_structured_tasks(seed: u64, cfg: &StructuredConfig) -> Result<StructuredTasks> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..cfg.word_pool).map(|i| format!("w{i}")).collect();
    let k = cfg.words_per_task;
    let source_words = pool[..k].to_vec();
    let target_words = if cfg.disjoint {
        pool[k..2 * k].to_vec()
    } else {
        source_words.clone()
    };
    let templates: Vec<Vec<usize>> = (0..cfg.templates)
        .map(|_| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            (0..len).map(|_| rng.gen_range(0..cfg.n_tags)).collect()
        })
        .collect();
    let src = Lexicon {
        words: source_words.clone(),
        n_tags: cfg.n_tags,
    };
    let tgt = Lexicon {
        words: target_words.clone(),
        n_tags: cfg.n_tags,
    };
    let flip = cfg.flip_target_labels;
    let source = Split {
        train: gen_corpus(cfg.source_train, cfg, &templates, &src, false, &mut rng),
        dev: gen_corpus(cfg.source_dev, cfg, &templates, &src, false, &mut rng),
    };
    let target = Split {
        train: gen_corpus(cfg.target_train, cfg, &templates, &tgt, flip, &mut rng),
        dev: gen_corpus(cfg.target_dev, cfg, &templates, &tgt, flip, &mut rng),
    };
    let mut vocab = Vocab::new();
    for w in source_words.iter().chain(&target_words) {
        vocab.add(w);
    }
    Ok(StructuredTasks {
        source,
        target,
        vocab,
        source_words,
        target_words,
    })
}
