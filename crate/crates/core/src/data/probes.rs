//! Diagnostic premise/hypothesis pairs for three shallow entailment heuristics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, LabeledPair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeuristicClass {
    LexicalOverlap,
    Subsequence,
    Constituent,
}

impl HeuristicClass {
    pub const ALL: [HeuristicClass; 3] = [
        HeuristicClass::LexicalOverlap,
        HeuristicClass::Subsequence,
        HeuristicClass::Constituent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeuristicClass::LexicalOverlap => "lexical_overlap",
            HeuristicClass::Subsequence => "subsequence",
            HeuristicClass::Constituent => "constituent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoClass {
    Entailment,
    NonEntailment,
}

/// Probe label strings; ids follow [`TwoClass`] order.
pub const PROBE_LABELS: [&str; 2] = ["entailment", "non-entailment"];

pub fn collapse_to_two_class(pred: NliLabel) -> TwoClass {
    match pred {
        NliLabel::Entailment => TwoClass::Entailment,
        NliLabel::Neutral | NliLabel::Contradiction => TwoClass::NonEntailment,
    }
}

/// Collapses a predicted class id to a two-class id. Id 0 is entailment
/// for both 2- and 3-class label sets.
pub fn collapse_index(pred: usize) -> usize {
    usize::from(pred != 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    /// Nouns drawn from the grammar's lexicon (at least 3).
    pub vocab_size: usize,
    /// Maximum number of stacked prepositional modifiers.
    pub depth: usize,
    pub lexical_overlap: usize,
    pub subsequence: usize,
    pub constituent: usize,
    /// Fraction of each class whose true label is entailment.
    pub balance: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            vocab_size: 10,
            depth: 1,
            lexical_overlap: 100,
            subsequence: 100,
            constituent: 100,
            balance: 0.5,
        }
    }
}

impl ProbeSpec {
    pub fn count(&self, class: HeuristicClass) -> usize {
        match class {
            HeuristicClass::LexicalOverlap => self.lexical_overlap,
            HeuristicClass::Subsequence => self.subsequence,
            HeuristicClass::Constituent => self.constituent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(Error::Config(format!("balance {} outside [0, 1]", self.balance)));
        }
        if self.vocab_size < 3 || self.vocab_size > NOUNS.len() {
            return Err(Error::Config(format!(
                "noun vocabulary {} outside 3..={}",
                self.vocab_size,
                NOUNS.len()
            )));
        }
        Ok(())
    }

    /// Entailment examples in a class of `n`.
    pub fn entailed_count(&self, n: usize) -> usize {
        (n as f64 * self.balance).round() as usize
    }
}

const NOUNS: [&str; 16] = [
    "doctor", "lawyer", "actor", "banker", "artist", "judge", "student", "senator", "manager",
    "tourist", "author", "scientist", "secretary", "athlete", "professor", "president",
];
const TRANSITIVE: [&str; 6] = ["saw", "helped", "paid", "called", "admired", "thanked"];
const INTRANSITIVE: [&str; 5] = ["danced", "slept", "waited", "left", "laughed"];
const PREPOSITIONS: [&str; 3] = ["near", "behind", "beside"];
const VERIDICAL: [&str; 3] = ["certainly", "clearly", "obviously"];
const NONVERIDICAL: [&str; 3] = ["perhaps", "maybe", "supposedly"];

/// A bracketed constituency tree.
#[derive(Debug, Clone)]
enum Tree {
    Leaf(&'static str),
    Node(&'static str, Vec<Tree>),
}

impl Tree {
    fn words(&self, out: &mut Vec<(String, &'static str)>, parent: &'static str) {
        match self {
            Tree::Leaf(w) => out.push((w.to_string(), parent)),
            Tree::Node(label, kids) => {
                for k in kids {
                    k.words(out, label);
                }
            }
        }
    }

    fn bracket(&self) -> String {
        match self {
            Tree::Leaf(w) => w.to_string(),
            Tree::Node(label, kids) => {
                let inner: Vec<String> = kids.iter().map(Tree::bracket).collect();
                format!("({label} {})", inner.join(" "))
            }
        }
    }
}

fn np(noun: &'static str) -> Tree {
    Tree::Node("NP", vec![Tree::Node("DT", vec![Tree::Leaf("the")]), Tree::Node("NN", vec![Tree::Leaf(noun)])])
}

fn tag_of(word: &str, parent: &str) -> String {
    if word == "the" {
        "DT".into()
    } else {
        parent.to_string()
    }
}

struct Gen<'a> {
    spec: &'a ProbeSpec,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn nouns(&mut self, k: usize) -> Vec<&'static str> {
        NOUNS[..self.spec.vocab_size]
            .choose_multiple(&mut self.rng, k)
            .copied()
            .collect()
    }

    fn pick(&mut self, xs: &[&'static str]) -> &'static str {
        xs.choose(&mut self.rng).copied().expect("non-empty")
    }

    /// Subject NP with `mods ≥ 1` stacked PPs, using distinct nouns.
    fn modified_np(&mut self, head: &'static str, others: &[&'static str]) -> Tree {
        let mut t = np(head);
        for &o in others {
            let p = self.pick(&PREPOSITIONS);
            t = Tree::Node("NP", vec![t, Tree::Node("PP", vec![Tree::Node("IN", vec![Tree::Leaf(p)]), np(o)])]);
        }
        t
    }

    fn depth(&mut self) -> usize {
        let max = self.spec.depth.max(1).min(self.spec.vocab_size - 1);
        self.rng.gen_range(1..=max)
    }

    /// Returns premise tree and hypothesis words.
    fn example(&mut self, class: HeuristicClass, entailed: bool) -> (Tree, Vec<&'static str>) {
        let vt = |w| Tree::Node("VB", vec![Tree::Leaf(w)]);
        match (class, entailed) {
            (HeuristicClass::LexicalOverlap, false) => {
                let n = self.nouns(2);
                let v = self.pick(&TRANSITIVE);
                let t = Tree::Node("S", vec![np(n[0]), Tree::Node("VP", vec![vt(v), np(n[1])])]);
                (t, vec!["the", n[1], v, "the", n[0]])
            }
            (HeuristicClass::LexicalOverlap, true) => {
                let n = self.nouns(3);
                let v = self.pick(&TRANSITIVE);
                let obj = Tree::Node("NP", vec![np(n[1]), Tree::Node("CC", vec![Tree::Leaf("and")]), np(n[2])]);
                let t = Tree::Node("S", vec![np(n[0]), Tree::Node("VP", vec![vt(v), obj])]);
                (t, vec!["the", n[0], v, "the", n[2]])
            }
            (HeuristicClass::Subsequence, false) => {
                let d = self.depth();
                let n = self.nouns(d + 1);
                let v = self.pick(&INTRANSITIVE);
                let subj = self.modified_np(n[0], &n[1..]);
                let t = Tree::Node("S", vec![subj, Tree::Node("VP", vec![vt(v)])]);
                (t, vec!["the", n[d], v])
            }
            (HeuristicClass::Subsequence, true) => {
                let d = self.depth();
                let n = self.nouns(d + 2);
                let v = self.pick(&TRANSITIVE);
                let obj = self.modified_np(n[1], &n[2..]);
                let t = Tree::Node("S", vec![np(n[0]), Tree::Node("VP", vec![vt(v), obj])]);
                (t, vec!["the", n[0], v, "the", n[1]])
            }
            (HeuristicClass::Constituent, _) => {
                let n = self.nouns(1);
                let v = self.pick(&INTRANSITIVE);
                let adv = self.pick(if entailed { &VERIDICAL } else { &NONVERIDICAL });
                let inner = Tree::Node("S", vec![np(n[0]), Tree::Node("VP", vec![vt(v)])]);
                let t = Tree::Node("S", vec![Tree::Node("RB", vec![Tree::Leaf(adv)]), inner]);
                (t, vec!["the", n[0], v])
            }
        }
    }
}

/// Probe pairs in class order, entailed examples first within each class.
/// Labels index [`PROBE_LABELS`].
pub fn gen_heuristic_probes(spec: &ProbeSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut gen = Gen {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut pairs = Vec::new();
    for class in HeuristicClass::ALL {
        let n = spec.count(class);
        let entailed = spec.entailed_count(n);
        for i in 0..n {
            let is_ent = i < entailed;
            let (tree, hyp) = gen.example(class, is_ent);
            let mut words = Vec::new();
            tree.words(&mut words, "S");
            let mut p = LabeledPair::pair(
                words.iter().map(|(w, _)| w.clone()).collect(),
                hyp.iter().map(|w| w.to_string()).collect(),
                usize::from(!is_ent),
            );
            p.tags = Some(words.iter().map(|(w, t)| tag_of(w, t)).collect());
            p.heuristic = Some(class);
            p.parse = Some(tree.bracket());
            pairs.push(p);
        }
    }
    Ok(Corpus {
        pairs,
        labels: PROBE_LABELS.iter().map(|s| s.to_string()).collect(),
        paired: true,
    })
}

/// Word sequences of every constituent of a bracketed parse.
pub fn subtree_yields(parse: &str) -> Result<Vec<Vec<String>>> {
    let mut stack: Vec<Vec<String>> = Vec::new();
    let mut out = Vec::new();
    let spaced = parse.replace('(', " ( ").replace(')', " ) ");
    let mut toks = spaced.split_whitespace().peekable();
    while let Some(t) = toks.next() {
        match t {
            "(" => {
                // Skip the node label.
                toks.next()
                    .ok_or_else(|| Error::Data(format!("dangling bracket in {parse:?}")))?;
                stack.push(Vec::new());
            }
            ")" => {
                let done = stack
                    .pop()
                    .ok_or_else(|| Error::Data(format!("unbalanced parse {parse:?}")))?;
                if let Some(top) = stack.last_mut() {
                    top.extend(done.iter().cloned());
                }
                out.push(done);
            }
            w => stack
                .last_mut()
                .ok_or_else(|| Error::Data(format!("word outside brackets in {parse:?}")))?
                .push(w.to_string()),
        }
    }
    if !stack.is_empty() {
        return Err(Error::Data(format!("unbalanced parse {parse:?}")));
    }
    Ok(out)
}

/// Whether a pair has the surface property its heuristic keys on.
pub fn validate_probe(pair: &LabeledPair) -> Result<bool> {
    let class = pair
        .heuristic
        .ok_or_else(|| Error::Data("pair has no heuristic class".into()))?;
    let prem = &pair.sentence1;
    let hyp = pair
        .sentence2
        .as_ref()
        .ok_or_else(|| Error::Data("probe pair has no hypothesis".into()))?;
    Ok(match class {
        HeuristicClass::LexicalOverlap => hyp.iter().all(|w| prem.contains(w)),
        HeuristicClass::Subsequence => {
            !hyp.is_empty() && prem.windows(hyp.len()).any(|w| w == hyp.as_slice())
        }
        HeuristicClass::Constituent => {
            let parse = pair
                .parse
                .as_deref()
                .ok_or_else(|| Error::Data("constituent probe without a parse".into()))?;
            let yields = subtree_yields(parse)?;
            yields.last().is_some_and(|y| y == prem) && yields.iter().any(|y| y == hyp)
        }
    })
}
