//! The backbone encoder and the two encoders that produce symbol and role
//! selector states for the binding layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Dropout, EncoderLayer, LstmCell};
use crate::params::{ParamSet, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tpr::{self, Binding, TprConfig};

pub const TOKEN_EMBEDDING: &str = "backbone.tok_emb";
pub const POSITION_EMBEDDING: &str = "backbone.pos_emb";

/// Small trainable stand-in for a pretrained contextual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden: 64,
            layers: 2,
            heads: 4,
            max_len: 32,
            ffn_dim: 256,
            dropout: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of head count {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Config("vocabulary and max length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn layer(&self, i: usize) -> EncoderLayer {
        EncoderLayer::new(format!("backbone.layer{i}"), self.hidden, self.heads, self.ffn_dim)
    }

    pub fn init_params<F: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        let b = 1.0 / (self.hidden as f64).sqrt();
        params.insert(
            TOKEN_EMBEDDING,
            Tensor::uniform(&[self.vocab_size, self.hidden], -b, b, rng),
        );
        params.insert(
            POSITION_EMBEDDING,
            Tensor::uniform(&[self.max_len, self.hidden], -b, b, rng),
        );
        for i in 0..self.layers {
            self.layer(i).init(params, rng);
        }
    }
}

/// Contextual embeddings `[N × hidden]` for `tokens`. `keep[t] == false`
/// marks padding; padded keys are masked out of every attention softmax.
pub fn encode_backbone<F: Scalar>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    cfg: &BackboneConfig,
    tokens: &[usize],
    keep: &[bool],
    drop: &mut Dropout,
) -> Result<Var> {
    if tokens.len() > cfg.max_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_len,
        });
    }
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if keep.len() != tokens.len() {
        return Err(Error::Data(format!(
            "mask length {} differs from token count {}",
            keep.len(),
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let n = tokens.len();
    let tok = g.gather_rows(pv.get(TOKEN_EMBEDDING), tokens)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(pv.get(POSITION_EMBEDDING), &positions)?;
    let mut x = g.add(tok, pos)?;
    x = drop.apply(g, x)?;
    for i in 0..cfg.layers {
        x = cfg.layer(i).forward(g, pv, x, Some(keep), drop)?;
    }
    Ok(x)
}

/// Which encoder feeds the selectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TprEncoderKind {
    Transformer,
    Lstm,
}

pub fn symbol_transformer(hidden: usize, heads: usize, ffn_dim: usize) -> EncoderLayer {
    EncoderLayer::new("tprenc.sym", hidden, heads, ffn_dim)
}

pub fn role_transformer(hidden: usize, heads: usize, ffn_dim: usize) -> EncoderLayer {
    EncoderLayer::new("tprenc.role", hidden, heads, ffn_dim)
}

pub fn symbol_lstm(input: usize, tpr: &TprConfig) -> LstmCell {
    LstmCell::new("tprenc.sym", input, tpr.bound_dim())
}

pub fn role_lstm(input: usize, tpr: &TprConfig) -> LstmCell {
    LstmCell::new("tprenc.role", input, tpr.bound_dim())
}

/// Two independent one-layer transformer encodings of `v`: `(h_S, h_R)`.
pub fn tpr_encode_transformer<F: Scalar>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    bb: &BackboneConfig,
    v: Var,
    keep: Option<&[bool]>,
    drop: &mut Dropout,
) -> Result<(Var, Var)> {
    let sym = symbol_transformer(bb.hidden, bb.heads, bb.ffn_dim);
    let role = role_transformer(bb.hidden, bb.heads, bb.ffn_dim);
    let h_sym = sym.forward(g, pv, v, keep, drop)?;
    let h_role = role.forward(g, pv, v, keep, drop)?;
    Ok((h_sym, h_role))
}

/// Per-step outputs of the recurrent binding encoder.
#[derive(Debug, Clone)]
pub struct LstmTprOutput {
    /// `h_S^(t)`, each `[1 × d_S·d_R]`.
    pub h_sym: Vec<Var>,
    pub h_role: Vec<Var>,
    /// Rows stacked over time.
    pub binding: Binding,
}

/// Recurrent binding encoder. At step `t` both LSTMs read `v^(t)`; their
/// recurrent hidden input is `vec(x^(t−1))` (zeros at `t = 0`) and each
/// chains its own cell state.
pub fn tpr_encode_lstm<F: Scalar>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    tpr_cfg: &TprConfig,
    v: Var,
) -> Result<LstmTprOutput> {
    let (n, input) = g.value(v).dims2();
    if n == 0 {
        return Err(Error::Data("empty sequence".into()));
    }
    let sym = symbol_lstm(input, tpr_cfg);
    let role = role_lstm(input, tpr_cfg);
    let width = tpr_cfg.bound_dim();
    let mut x_prev = g.constant(Tensor::zeros(&[1, width]));
    let mut c_sym = g.constant(Tensor::zeros(&[1, width]));
    let mut c_role = g.constant(Tensor::zeros(&[1, width]));
    let (mut hs, mut hr) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut a_s, mut a_r, mut xs) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..n {
        let vt = g.slice_rows(v, t, t + 1)?;
        let (h_s, c_s) = sym.step(g, pv, vt, x_prev, c_sym)?;
        let (h_r, c_r) = role.step(g, pv, vt, x_prev, c_role)?;
        let b = tpr::select_and_bind(g, pv, tpr_cfg, h_s, h_r)?;
        hs.push(h_s);
        hr.push(h_r);
        a_s.push(b.a_sym);
        a_r.push(b.a_role);
        xs.push(b.bound);
        x_prev = b.bound;
        c_sym = c_s;
        c_role = c_r;
    }
    let binding = Binding {
        a_sym: g.concat(&a_s, 0)?,
        a_role: g.concat(&a_r, 0)?,
        bound: g.concat(&xs, 0)?,
    };
    Ok(LstmTprOutput {
        h_sym: hs,
        h_role: hr,
        binding,
    })
}
