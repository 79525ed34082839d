//! Role interpretation against token tags, and heuristic-probe scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{collapse_index, pack, Corpus, HeuristicClass, LabeledPair, TwoClass, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

/// Indices of the `k` largest weights, by descending weight then ascending index.
pub fn top_k_roles<F: Scalar>(a_role: &[F], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > a_role.len() {
        return Err(Error::Parameter(format!(
            "top-k with k = {k} over {} roles",
            a_role.len()
        )));
    }
    let mut idx: Vec<usize> = (0..a_role.len()).collect();
    idx.sort_by(|&i, &j| a_role[j].partial_cmp(&a_role[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleAssignment {
    /// Row of the example in its corpus.
    pub example: usize,
    /// Token index within `sentence1`.
    pub token: usize,
    pub tag: String,
    pub roles: Vec<usize>,
}

/// Top-`k` role tuples for every tagged `sentence1` token.
///
/// With whitespace tokens each word is a single token. A sub-word
/// tokenizer would take the tag's roles from the word's last sub-token.
pub fn role_assignments<F: Scalar>(
    model: &Model<F>,
    corpus: &Corpus,
    vocab: &Vocab,
    k: usize,
) -> Result<Vec<RoleAssignment>> {
    if !model.config.family.has_tpr() {
        return Err(Error::Config(format!(
            "{} has no role attention to analyze",
            model.config.family
        )));
    }
    if !corpus.has_tags() {
        return Err(Error::Data("role analysis needs a tagged corpus".into()));
    }
    let mut out = Vec::new();
    for (e, pair) in corpus.pairs.iter().enumerate() {
        out.extend(assign_pair(model, pair, vocab, k, e)?);
    }
    Ok(out)
}

fn assign_pair<F: Scalar>(
    model: &Model<F>,
    pair: &LabeledPair,
    vocab: &Vocab,
    k: usize,
    example: usize,
) -> Result<Vec<RoleAssignment>> {
    let tags = pair.tags.as_ref().expect("checked tagged");
    let att = model
        .role_attention(&pack(pair, vocab))?
        .expect("binding family");
    tags.iter()
        .enumerate()
        .map(|(i, tag)| {
            Ok(RoleAssignment {
                example,
                token: i,
                tag: tag.clone(),
                roles: top_k_roles(att.row(i + 1), k)?,
            })
        })
        .collect()
}

/// Counts of role tuples per tag.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagRoleHistogram {
    pub counts: BTreeMap<String, BTreeMap<Vec<usize>, usize>>,
}

impl TagRoleHistogram {
    pub fn from_assignments<'a>(items: impl IntoIterator<Item = &'a RoleAssignment>) -> Self {
        let mut h = Self::default();
        for a in items {
            *h.counts
                .entry(a.tag.clone())
                .or_default()
                .entry(a.roles.clone())
                .or_default() += 1;
        }
        h
    }

    pub fn merge(&mut self, other: &Self) {
        for (tag, row) in &other.counts {
            let mine = self.counts.entry(tag.clone()).or_default();
            for (t, c) in row {
                *mine.entry(t.clone()).or_default() += c;
            }
        }
    }

    pub fn total(&self) -> usize {
        self.counts.values().flat_map(|r| r.values()).sum()
    }

    /// `tag,role_tuple,count` with dash-joined role indices.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tag,role_tuple,count\n");
        for (tag, row) in &self.counts {
            for (t, c) in row {
                let _ = writeln!(s, "{tag},{},{c}", tuple_name(t));
            }
        }
        s
    }

    /// Like [`TagRoleHistogram::to_csv`] with each tag's counts divided by
    /// its total.
    pub fn to_normalized_csv(&self) -> String {
        let mut s = String::from("tag,role_tuple,fraction\n");
        for (tag, row) in &self.counts {
            let n: usize = row.values().sum();
            for (t, c) in row {
                let _ = writeln!(s, "{tag},{},{:.6}", tuple_name(t), *c as f64 / n as f64);
            }
        }
        s
    }

    /// Stacked-histogram table for gnuplot: one row per tag, one column per
    /// role tuple seen anywhere.
    pub fn to_gnuplot(&self) -> String {
        let mut tuples: Vec<&Vec<usize>> = self.counts.values().flat_map(|r| r.keys()).collect();
        tuples.sort();
        tuples.dedup();
        let mut s = String::from("tag");
        for t in &tuples {
            let _ = write!(s, " {}", tuple_name(t));
        }
        s.push('\n');
        for (tag, row) in &self.counts {
            s.push_str(tag);
            for t in &tuples {
                let _ = write!(s, " {}", row.get(*t).copied().unwrap_or(0));
            }
            s.push('\n');
        }
        s
    }
}

pub fn tuple_name(t: &[usize]) -> String {
    t.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

pub fn tag_role_histogram<F: Scalar>(
    model: &Model<F>,
    corpus: &Corpus,
    vocab: &Vocab,
    k: usize,
) -> Result<TagRoleHistogram> {
    Ok(TagRoleHistogram::from_assignments(&role_assignments(model, corpus, vocab, k)?))
}

/// Per heuristic class and gold two-class label: (correct, total).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProbeReport {
    pub cells: BTreeMap<(HeuristicClass, usize), (usize, usize)>,
}

impl ProbeReport {
    fn gold(label: usize) -> TwoClass {
        if label == 0 {
            TwoClass::Entailment
        } else {
            TwoClass::NonEntailment
        }
    }

    /// Percentage correct in one cell; `None` when the cell is empty.
    pub fn accuracy(&self, class: HeuristicClass, gold: TwoClass) -> Option<f64> {
        let key = (class, usize::from(gold == TwoClass::NonEntailment));
        self.cells
            .get(&key)
            .filter(|(_, n)| *n > 0)
            .map(|&(c, n)| 100.0 * c as f64 / n as f64)
    }

    /// Mean of the non-empty cells' accuracies.
    pub fn overall(&self) -> f64 {
        let accs: Vec<f64> = self.six().into_iter().filter_map(|(_, _, a)| a).collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    }

    /// Pooled accuracy over every probe.
    pub fn weighted(&self) -> f64 {
        let (c, n) = self
            .cells
            .values()
            .fold((0, 0), |(c, n), &(ci, ni)| (c + ci, n + ni));
        100.0 * c as f64 / n as f64
    }

    pub fn six(&self) -> Vec<(HeuristicClass, TwoClass, Option<f64>)> {
        let mut v = Vec::with_capacity(6);
        for class in HeuristicClass::ALL {
            for gold in [TwoClass::Entailment, TwoClass::NonEntailment] {
                v.push((class, gold, self.accuracy(class, gold)));
            }
        }
        v
    }

    /// `heuristic_class,correct_label,accuracy` plus an `overall` row. Empty
    /// cells are written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("heuristic_class,correct_label,accuracy\n");
        for (class, gold, acc) in self.six() {
            let label = match gold {
                TwoClass::Entailment => "entailment",
                TwoClass::NonEntailment => "non-entailment",
            };
            let acc = acc.map_or("nan".to_string(), |a| format!("{a:.2}"));
            let _ = writeln!(s, "{class},{label},{acc}");
        }
        let _ = writeln!(s, "overall,all,{:.2}", self.overall());
        s
    }
}

/// Scores class predictions on probes. Predicted id 0 means entailment;
/// every other id (neutral, contradiction, non-entailment) collapses to
/// non-entailment.
pub fn evaluate_probes(
    probes: &Corpus,
    mut predict: impl FnMut(&LabeledPair) -> Result<usize>,
) -> Result<ProbeReport> {
    let mut report = ProbeReport::default();
    for p in &probes.pairs {
        let class = p
            .heuristic
            .ok_or_else(|| Error::Data("probe without a heuristic class".into()))?;
        let gold = usize::from(ProbeReport::gold(p.label) == TwoClass::NonEntailment);
        let pred = collapse_index(predict(p)?);
        let cell = report.cells.entry((class, gold)).or_default();
        cell.1 += 1;
        if pred == gold {
            cell.0 += 1;
        }
    }
    Ok(report)
}

pub fn evaluate_probes_with_model<F: Scalar>(
    model: &Model<F>,
    vocab: &Vocab,
    probes: &Corpus,
) -> Result<ProbeReport> {
    evaluate_probes(probes, |p| model.predict(&pack(p, vocab)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_roles(&[0.5f64, 0.3, 0.2], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_roles(&[0.25f64; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_roles(&[0.1f64, 0.6, 0.3], 3).unwrap(), vec![1, 2, 0]);
        assert!(matches!(top_k_roles(&[0.5f64], 0), Err(Error::Parameter(_))));
        assert!(matches!(top_k_roles(&[0.5f64], 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn histogram_counts_and_csv() {
        let a = |tag: &str, roles: Vec<usize>| RoleAssignment {
            example: 0,
            token: 0,
            tag: tag.into(),
            roles,
        };
        let items = vec![a("N", vec![1, 0]), a("N", vec![1, 0]), a("V", vec![0, 1])];
        let h = TagRoleHistogram::from_assignments(&items);
        assert_eq!(h.total(), 3);
        assert_eq!(h.to_csv(), "tag,role_tuple,count\nN,1-0,2\nV,0-1,1\n");
        assert_eq!(h.to_gnuplot(), "tag 0-1 1-0\nN 0 2\nV 1 0\n");
        assert!(h.to_normalized_csv().contains("N,1-0,1.000000"));
        let mut m = h.clone();
        m.merge(&h);
        assert_eq!(m.total(), 6);
    }
}
