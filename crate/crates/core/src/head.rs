//! Sentence aggregation, the task classifier and the training loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tpr;

pub const PROJECTION: &str = "head.proj";
pub const CLASSIFIER: &str = "head.W_f";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationStrategy {
    MaxPool,
    MeanPool,
    ClsOnly,
    /// Concatenate all `N_max` token rows (zero-padded) and project to `p`.
    ConcatProject,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 4] = [
        AggregationStrategy::MaxPool,
        AggregationStrategy::MeanPool,
        AggregationStrategy::ClsOnly,
        AggregationStrategy::ConcatProject,
    ];

    /// Sentence-embedding width for token features of width `feat`.
    pub fn output_dim(self, feat: usize, proj_dim: usize) -> usize {
        match self {
            AggregationStrategy::ConcatProject => proj_dim,
            _ => feat,
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationStrategy::MaxPool => "max_pool",
            AggregationStrategy::MeanPool => "mean_pool",
            AggregationStrategy::ClsOnly => "cls_only",
            AggregationStrategy::ConcatProject => "concat_project",
        })
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation strategy {s:?}")))
    }
}

/// Reduces token features `[N × D]` to a sentence embedding.
///
/// `keep[t] == false` marks padding. `proj` (`[p × max_len·D]`) is required
/// for [`AggregationStrategy::ConcatProject`].
pub fn aggregate<F: Scalar>(
    g: &mut Graph<F>,
    feats: Var,
    keep: &[bool],
    strategy: AggregationStrategy,
    proj: Option<Var>,
    max_len: usize,
) -> Result<Var> {
    let (n, d) = g.value(feats).dims2();
    if keep.len() != n {
        return Err(Error::Data(format!("mask length {} for {n} tokens", keep.len())));
    }
    let live: Vec<usize> = (0..n).filter(|&t| keep[t]).collect();
    if live.is_empty() {
        return Err(Error::Data("aggregation over an all-padding sequence".into()));
    }
    match strategy {
        AggregationStrategy::MaxPool | AggregationStrategy::MeanPool => {
            let rows = if live.len() == n {
                feats
            } else {
                g.gather_rows(feats, &live)?
            };
            if strategy == AggregationStrategy::MaxPool {
                Ok(g.max_rows(rows)?)
            } else {
                Ok(g.mean_rows(rows)?)
            }
        }
        AggregationStrategy::ClsOnly => {
            let row = g.slice_rows(feats, 0, 1)?;
            Ok(g.reshape(row, &[d])?)
        }
        AggregationStrategy::ConcatProject => {
            let proj = proj.ok_or_else(|| Error::Config("concat_project needs a projection".into()))?;
            if n > max_len {
                return Err(Error::Length { len: n, max: max_len });
            }
            let (p, width) = g.value(proj).dims2();
            if width != max_len * d {
                return Err(crate::tensor::TensorError::Dimension {
                    op: "aggregate",
                    lhs: g.shape(proj).to_vec(),
                    rhs: vec![max_len, d],
                }
                .into());
            }
            let masked = if live.len() == n {
                feats
            } else {
                let mask = (0..n * d)
                    .map(|k| if keep[k / d] { F::one() } else { F::zero() })
                    .collect();
                g.apply_mask(feats, mask)?
            };
            // Rows past `n` are zero padding, so only the first n·D columns contribute.
            let flat = g.reshape(masked, &[1, n * d])?;
            let w = if n == max_len {
                proj
            } else {
                g.slice_cols(proj, 0, n * d)?
            };
            let f = g.matmul_nt(flat, w)?;
            Ok(g.reshape(f, &[p])?)
        }
    }
}

/// Class logits `W_f f`.
pub fn logits<F: Scalar>(g: &mut Graph<F>, f: Var, w_f: Var) -> Result<Var> {
    let p = g.value(f).len();
    let row = g.reshape(f, &[1, p])?;
    let z = g.matmul_nt(row, w_f)?;
    let c = g.value(z).len();
    Ok(g.reshape(z, &[c])?)
}

/// `softmax(W_f f)`.
pub fn classify<F: Scalar>(g: &mut Graph<F>, f: Var, w_f: Var) -> Result<Var> {
    let z = logits(g, f, w_f)?;
    Ok(g.softmax(z))
}

/// Mean cross-entropy of `logits` against `labels`, plus the orthogonality
/// penalty on `roles` when given.
pub fn loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: &[Var],
    labels: &[usize],
    roles: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut picked = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let c = g.value(z).len();
        if y >= c {
            return Err(Error::Data(format!("label {y} invalid for {c} classes")));
        }
        let lp = g.log_softmax(z);
        picked.push(g.slice_rows(lp, y, y + 1)?);
    }
    let all = g.concat(&picked, 0)?;
    let mean = g.mean(all);
    let ce = g.scale(mean, -F::one());
    match roles {
        Some(r) => {
            let pen = tpr::orthogonality_penalty(g, r, lambda)?;
            Ok(g.add(ce, pen)?)
        }
        None => Ok(ce),
    }
}

/// Value-level loss from probability vectors, for checks outside a graph.
pub fn loss_from_probs<F: Scalar>(probs: &[Tensor<F>], labels: &[usize], roles: Option<&Tensor<F>>, lambda: f64) -> f64 {
    let ce: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p.data()[y].as_f64().ln())
        .sum::<f64>()
        / probs.len() as f64;
    ce + roles.map_or(0.0, |r| tpr::orthogonality_penalty_value(r, lambda).as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Var {
        let t = Tensor::from_rows(rows).unwrap();
        g.constant(t)
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in AggregationStrategy::ALL {
            assert_eq!(s.to_string().parse::<AggregationStrategy>().unwrap(), s);
        }
        assert!("sum".parse::<AggregationStrategy>().is_err());
    }

    #[test]
    fn mean_pool_of_identical_tokens() {
        let mut g = Graph::new();
        let row = vec![0.5, -1.0, 2.0];
        let x = feats(&mut g, &[row.clone(), row.clone(), row.clone()]);
        let f = aggregate(&mut g, x, &[true; 3], AggregationStrategy::MeanPool, None, 8).unwrap();
        for (a, b) in g.value(f).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn one_token_reduces_to_that_token() {
        let row = vec![0.25, -0.75];
        for s in [AggregationStrategy::MaxPool, AggregationStrategy::MeanPool, AggregationStrategy::ClsOnly] {
            let mut g = Graph::new();
            let x = feats(&mut g, std::slice::from_ref(&row));
            let f = aggregate(&mut g, x, &[true], s, None, 4).unwrap();
            assert_eq!(g.value(f).data(), row.as_slice(), "{s}");
        }
        // concat_project: the projection of the token through the first D columns.
        let mut g = Graph::new();
        let x = feats(&mut g, std::slice::from_ref(&row));
        let proj = Tensor::from_f64(&[1, 4], &[2.0, 3.0, 100.0, 100.0]).unwrap();
        let pv = g.constant(proj);
        let f = aggregate(&mut g, x, &[true], AggregationStrategy::ConcatProject, Some(pv), 2).unwrap();
        assert!((g.value(f).data()[0] - (0.5 - 2.25)).abs() < 1e-15);
    }

    #[test]
    fn padding_is_ignored() {
        let mut g = Graph::new();
        let x = feats(&mut g, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![99.0, -99.0]]);
        let keep = [true, true, false];
        let f = aggregate(&mut g, x, &keep, AggregationStrategy::MeanPool, None, 3).unwrap();
        assert_eq!(g.value(f).data(), &[2.0, 3.0]);
        let f = aggregate(&mut g, x, &keep, AggregationStrategy::MaxPool, None, 3).unwrap();
        assert_eq!(g.value(f).data(), &[3.0, 4.0]);
        let proj = g.constant(Tensor::ones(&[1, 6]));
        let f = aggregate(&mut g, x, &keep, AggregationStrategy::ConcatProject, Some(proj), 3).unwrap();
        assert_eq!(g.value(f).data(), &[10.0]);
    }

    #[test]
    fn all_padding_is_an_error() {
        let mut g = Graph::new();
        let x = feats(&mut g, &[vec![1.0], vec![2.0]]);
        let err = aggregate(&mut g, x, &[false, false], AggregationStrategy::MeanPool, None, 2).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn invalid_label_is_data_error() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(loss(&mut g, &[z], &[2], None, 0.0), Err(Error::Data(_))));
    }

    #[test]
    fn uniform_prediction_costs_log_c() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::vector(vec![0.3; 5]));
        let l = loss(&mut g, &[z], &[4], None, 0.0).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_with_orthogonal_roles_is_zero() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::vector(vec![800.0, 0.0, 0.0]));
        let r = g.constant(Tensor::eye(3));
        let l = loss(&mut g, &[z], &[0], Some(r), 5.0).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }
}
