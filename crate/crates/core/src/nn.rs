//! Layers shared by the encoders: affine maps, a post-norm transformer
//! encoder layer, and an LSTM cell. Each layer is a small descriptor holding
//! its parameter-name prefix and dimensions; weights live in a [`ParamSet`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamSet, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dropout state for one forward pass. `rng == None` disables dropout.
pub struct Dropout {
    pub p: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn apply<F: Scalar>(&mut self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 => Ok(g.dropout(x, self.p, rng)?),
            _ => Ok(x),
        }
    }
}

fn uniform_init<F: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

/// `y = x Wᵀ + b` with `W: [out × in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub prefix: String,
    pub inp: usize,
    pub out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, inp: usize, out: usize, bias: bool) -> Self {
        Self {
            prefix: prefix.into(),
            inp,
            out,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        params.insert(self.weight_name(), uniform_init(&[self.out, self.inp], self.inp, rng));
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.out]));
        }
    }

    /// `x: [N × in]` → `[N × out]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Result<Var> {
        let y = g.matmul_nt(x, pv.get(&self.weight_name()))?;
        if self.bias {
            Ok(g.add_row(y, pv.get(&self.bias_name()))?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init<F: Scalar>(&self, params: &mut ParamSet<F>) {
        params.insert(format!("{}.g", self.prefix), Tensor::ones(&[self.dim]));
        params.insert(format!("{}.b", self.prefix), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Result<Var> {
        let gamma = pv.get(&format!("{}.g", self.prefix));
        let beta = pv.get(&format!("{}.b", self.prefix));
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

/// One post-norm transformer encoder layer:
/// attention → residual+dropout → norm → feed-forward → residual+dropout → norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        let prefix = prefix.into();
        let p = |s: &str| format!("{prefix}.{s}");
        Self {
            q: Linear::new(p("attn.q"), dim, dim, true),
            k: Linear::new(p("attn.k"), dim, dim, true),
            v: Linear::new(p("attn.v"), dim, dim, true),
            o: Linear::new(p("attn.o"), dim, dim, true),
            ln1: LayerNorm {
                prefix: p("ln1"),
                dim,
            },
            ff1: Linear::new(p("ffn.1"), dim, ffn_dim, true),
            ff2: Linear::new(p("ffn.2"), ffn_dim, dim, true),
            ln2: LayerNorm {
                prefix: p("ln2"),
                dim,
            },
            prefix,
            dim,
            heads,
            ffn_dim,
        }
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        for lin in [&self.q, &self.k, &self.v, &self.o, &self.ff1, &self.ff2] {
            lin.init(params, rng);
        }
        self.ln1.init(params);
        self.ln2.init(params);
    }

    /// Names of the attention output projection and feed-forward weights.
    pub fn mixing_param_names(&self) -> Vec<String> {
        [&self.o, &self.ff1, &self.ff2]
            .iter()
            .flat_map(|l| [l.weight_name(), l.bias_name()])
            .collect()
    }

    /// `x: [N × dim]`; `keep[j] == false` masks key `j` with −∞.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        pv: &ParamVars,
        x: Var,
        keep: Option<&[bool]>,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let attn = self.attention(g, pv, x, keep)?;
        let attn = drop.apply(g, attn)?;
        let r1 = g.add(x, attn)?;
        let x1 = self.ln1.forward(g, pv, r1)?;
        let hidden = self.ff1.forward(g, pv, x1)?;
        let hidden = g.gelu(hidden);
        let ff = self.ff2.forward(g, pv, hidden)?;
        let ff = drop.apply(g, ff)?;
        let r2 = g.add(x1, ff)?;
        self.ln2.forward(g, pv, r2)
    }

    fn attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        pv: &ParamVars,
        x: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        let q = self.q.forward(g, pv, x)?;
        let k = self.k.forward(g, pv, x)?;
        let v = self.v.forward(g, pv, x)?;
        let mask = match keep {
            Some(keep) if keep.iter().any(|&b| !b) => {
                let mut m = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for (j, &b) in keep.iter().enumerate() {
                        if !b {
                            m.set(&[i, j], F::neg_infinity());
                        }
                    }
                }
                Some(g.constant(m))
            }
            _ => None,
        };
        let dh = self.dim / self.heads;
        let inv = F::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, inv);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s);
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        self.o.forward(g, pv, cat)
    }
}

/// LSTM cell with separate input (`in`) and recurrent (`hidden`) projections.
/// Gate order: input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub prefix: String,
    pub inp: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(prefix: impl Into<String>, inp: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            inp,
            hidden,
        }
    }

    pub fn names(&self) -> [String; 3] {
        [
            format!("{}.w_ih", self.prefix),
            format!("{}.w_hh", self.prefix),
            format!("{}.b", self.prefix),
        ]
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        let [wih, whh, b] = self.names();
        let h4 = 4 * self.hidden;
        params.insert(wih, uniform_init(&[h4, self.inp], self.inp, rng));
        params.insert(whh, uniform_init(&[h4, self.hidden], self.hidden, rng));
        params.insert(b, Tensor::zeros(&[h4]));
    }

    /// One step on row vectors: `x: [1×in]`, `h, c: [1×hidden]` → `(h', c')`.
    pub fn step<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        pv: &ParamVars,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let [wih, whh, b] = self.names();
        let gx = g.matmul_nt(x, pv.get(&wih))?;
        let gh = g.matmul_nt(h, pv.get(&whh))?;
        let z = g.add(gx, gh)?;
        let z = g.add_row(z, pv.get(&b))?;
        let hd = self.hidden;
        let zi = g.slice_cols(z, 0, hd)?;
        let zf = g.slice_cols(z, hd, 2 * hd)?;
        let zg = g.slice_cols(z, 2 * hd, 3 * hd)?;
        let zo = g.slice_cols(z, 3 * hd, 4 * hd)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, cand)?;
        let c2 = g.add(fc, ig)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }

    /// Plain recurrence over `xs: [N × in]` from zero state; returns `[N × hidden]`.
    pub fn run<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, xs: Var) -> Result<Var> {
        let n = g.shape(xs)[0];
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut outs = Vec::with_capacity(n);
        for t in 0..n {
            let x = g.slice_rows(xs, t, t + 1)?;
            let (h2, c2) = self.step(g, pv, x, h, c)?;
            outs.push(h2);
            h = h2;
            c = c2;
        }
        Ok(g.concat(&outs, 0)?)
    }
}
