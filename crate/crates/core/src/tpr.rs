//! The binding layer: global role and symbol embeddings, temperature-scaled
//! soft selection over them, rank-1 binding into a `d_S × d_R` token tensor,
//! unbinding by role, and the orthogonality penalty on the role matrix.
//!
//! For one token with symbol attention `a_S` and role attention `a_R`:
//!
//! ```text
//! x = scale · S (a_S a_Rᵀ) Rᵀ = scale · (S a_S) ⊗ (R a_R)
//! ```
//!
//! The functions taking a [`Graph`] are what the models use; [`TprParams`]
//! offers the same operations on plain values.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::params::{ParamSet, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SYMBOLS: &str = "tpr.S";
pub const ROLES: &str = "tpr.R";
pub const SYMBOL_SELECTOR: &str = "tpr.W_S";
pub const ROLE_SELECTOR: &str = "tpr.W_R";
pub const SYMBOL_SELECTOR_BIAS: &str = "tpr.b_S";
pub const ROLE_SELECTOR_BIAS: &str = "tpr.b_R";
pub const SCALE: &str = "tpr.scale";

/// Tolerance on `‖RᵀR − I‖_max` for unbinding.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Shape and hyperparameters of the binding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TprConfig {
    pub d_sym: usize,
    pub d_role: usize,
    pub n_sym: usize,
    pub n_role: usize,
    pub temperature: f64,
    /// Separate role-selector temperature; `None` shares `temperature`.
    pub role_temperature: Option<f64>,
    pub lambda: f64,
    pub scale_init: f64,
    pub selector_bias: bool,
}

impl Default for TprConfig {
    fn default() -> Self {
        Self {
            d_sym: 32,
            d_role: 32,
            n_sym: 50,
            n_role: 35,
            temperature: 1.0,
            role_temperature: None,
            lambda: 1e-3,
            scale_init: 1000.0,
            selector_bias: false,
        }
    }
}

/// Grid values searched for `d_S`/`d_R`.
pub const DIM_GRID: [usize; 3] = [10, 30, 60];
/// Grid values searched for `n_S`.
pub const FILLER_COUNT_GRID: [usize; 3] = [50, 100, 150];

impl TprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_sym == 0 || self.d_role == 0 || self.n_role == 0 {
            return Err(Error::Config("binding dimensions must be positive".into()));
        }
        if self.n_sym <= self.n_role {
            return Err(Error::Config(format!(
                "number of symbols ({}) must exceed number of roles ({})",
                self.n_sym, self.n_role
            )));
        }
        check_temperature(self.temperature)?;
        if let Some(t) = self.role_temperature {
            check_temperature(t)?;
        }
        if !(self.scale_init > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale_init)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn symbol_temperature(&self) -> f64 {
        self.temperature
    }

    pub fn role_temperature(&self) -> f64 {
        self.role_temperature.unwrap_or(self.temperature)
    }

    pub fn bound_dim(&self) -> usize {
        self.d_sym * self.d_role
    }

    /// Registers `tpr.*` parameters for selectors reading `hidden`-wide states.
    pub fn init_params<F: Scalar, R: Rng + ?Sized>(
        &self,
        hidden: usize,
        params: &mut ParamSet<F>,
        rng: &mut R,
    ) {
        let bs = 1.0 / (self.d_sym as f64).sqrt();
        let br = 1.0 / (self.d_role as f64).sqrt();
        let bw = 1.0 / (hidden as f64).sqrt();
        params.insert(SYMBOLS, Tensor::uniform(&[self.d_sym, self.n_sym], -bs, bs, rng));
        params.insert(ROLES, Tensor::uniform(&[self.d_role, self.n_role], -br, br, rng));
        params.insert(SYMBOL_SELECTOR, Tensor::uniform(&[self.n_sym, hidden], -bw, bw, rng));
        params.insert(ROLE_SELECTOR, Tensor::uniform(&[self.n_role, hidden], -bw, bw, rng));
        if self.selector_bias {
            params.insert(SYMBOL_SELECTOR_BIAS, Tensor::zeros(&[self.n_sym]));
            params.insert(ROLE_SELECTOR_BIAS, Tensor::zeros(&[self.n_role]));
        }
        params.insert(SCALE, Tensor::scalar(F::lit(self.scale_init)));
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {t}")))
    }
}

/// `softmax((h Wᵀ + b) / T)` row-wise; `h` is `[N × hidden]` or `[hidden]`.
pub fn attend<F: Scalar>(
    g: &mut Graph<F>,
    h: Var,
    w: Var,
    bias: Option<Var>,
    temperature: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    let vector_in = g.value(h).rank() == 1;
    let h2 = if vector_in {
        let n = g.value(h).len();
        g.reshape(h, &[1, n])?
    } else {
        h
    };
    let mut logits = g.matmul_nt(h2, w)?;
    if let Some(b) = bias {
        logits = g.add_row(logits, b)?;
    }
    let z = g.scale(logits, F::lit(1.0 / temperature));
    let a = g.softmax(z);
    if vector_in {
        let n = g.value(a).len();
        Ok(g.reshape(a, &[n])?)
    } else {
        Ok(a)
    }
}

/// Binds one token: `a_S: [n_S]`, `a_R: [n_R]` → `x: [d_S × d_R]`.
pub fn bind<F: Scalar>(
    g: &mut Graph<F>,
    a_sym: Var,
    a_role: Var,
    symbols: Var,
    roles: Var,
    scale: Var,
) -> Result<Var> {
    let s = column_mix(g, symbols, a_sym)?;
    let r = column_mix(g, roles, a_role)?;
    let x = g.outer(s, r)?;
    Ok(g.mul_scalar(x, scale)?)
}

/// Binds a whole sequence: `a_S: [N × n_S]`, `a_R: [N × n_R]` →
/// `[N × d_S·d_R]`, row `t` being `vec(x_t)` in row-major order.
pub fn bind_rows<F: Scalar>(
    g: &mut Graph<F>,
    a_sym: Var,
    a_role: Var,
    symbols: Var,
    roles: Var,
    scale: Var,
) -> Result<Var> {
    let s = g.matmul_nt(a_sym, symbols)?;
    let r = g.matmul_nt(a_role, roles)?;
    let x = g.row_outer(s, r)?;
    Ok(g.mul_scalar(x, scale)?)
}

/// `M a` for `M: [d × n]`, `a: [n]`, giving `[d]`.
fn column_mix<F: Scalar>(g: &mut Graph<F>, m: Var, a: Var) -> Result<Var> {
    let (d, n) = g.value(m).dims2();
    if g.value(a).len() != n || g.value(a).rank() != 1 {
        return Err(crate::tensor::TensorError::Dimension {
            op: "bind",
            lhs: g.shape(m).to_vec(),
            rhs: g.shape(a).to_vec(),
        }
        .into());
    }
    let col = g.reshape(a, &[n, 1])?;
    let y = g.matmul(m, col)?;
    Ok(g.reshape(y, &[d])?)
}

/// `R a_R`: the role vector implied by an attention distribution over roles.
pub fn role_vector<F: Scalar>(g: &mut Graph<F>, a_role: Var, roles: Var) -> Result<Var> {
    column_mix(g, roles, a_role)
}

/// `λ (‖R Rᵀ − I‖_F² + ‖Rᵀ R − I‖_F²)`.
pub fn orthogonality_penalty<F: Scalar>(g: &mut Graph<F>, roles: Var, lambda: f64) -> Result<Var> {
    let (d, n) = g.value(roles).dims2();
    let gram_d = g.matmul_nt(roles, roles)?;
    let rt = g.transpose(roles)?;
    let gram_n = g.matmul_nt(rt, rt)?;
    let eye_d = g.constant(Tensor::eye(d));
    let eye_n = g.constant(Tensor::eye(n));
    let dd = g.sub(gram_d, eye_d)?;
    let dn = g.sub(gram_n, eye_n)?;
    let fd = g.frobenius_sq(dd);
    let fnn = g.frobenius_sq(dn);
    let total = g.add(fd, fnn)?;
    Ok(g.scale(total, F::lit(lambda)))
}

/// Symbol and role attention plus bound tensors for a sequence of selector
/// states.
#[derive(Debug, Clone, Copy)]
pub struct Binding {
    pub a_sym: Var,
    pub a_role: Var,
    /// `[N × d_S·d_R]`
    pub bound: Var,
}

/// Full selection + binding for `[N × hidden]` symbol and role states.
pub fn select_and_bind<F: Scalar>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    cfg: &TprConfig,
    h_sym: Var,
    h_role: Var,
) -> Result<Binding> {
    let a_sym = attend(
        g,
        h_sym,
        pv.get(SYMBOL_SELECTOR),
        pv.try_get(SYMBOL_SELECTOR_BIAS),
        cfg.symbol_temperature(),
    )?;
    let a_role = attend(
        g,
        h_role,
        pv.get(ROLE_SELECTOR),
        pv.try_get(ROLE_SELECTOR_BIAS),
        cfg.role_temperature(),
    )?;
    let bound = bind_rows(g, a_sym, a_role, pv.get(SYMBOLS), pv.get(ROLES), pv.get(SCALE))?;
    Ok(Binding {
        a_sym,
        a_role,
        bound,
    })
}

/// Value-level view of the binding layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TprParams<F> {
    /// `[d_S × n_S]`, one symbol per column.
    pub symbols: Tensor<F>,
    /// `[d_R × n_R]`, one role per column.
    pub roles: Tensor<F>,
    pub symbol_selector: Tensor<F>,
    pub role_selector: Tensor<F>,
    pub symbol_temperature: f64,
    pub role_temperature: f64,
    pub scale: F,
    pub lambda: f64,
}

impl<F: Scalar> TprParams<F> {
    pub fn from_params(cfg: &TprConfig, params: &ParamSet<F>) -> Self {
        Self {
            symbols: params.expect(SYMBOLS).clone(),
            roles: params.expect(ROLES).clone(),
            symbol_selector: params.expect(SYMBOL_SELECTOR).clone(),
            role_selector: params.expect(ROLE_SELECTOR).clone(),
            symbol_temperature: cfg.symbol_temperature(),
            role_temperature: cfg.role_temperature(),
            scale: params.expect(SCALE).data()[0],
            lambda: cfg.lambda,
        }
    }

    pub fn d_sym(&self) -> usize {
        self.symbols.shape()[0]
    }

    pub fn d_role(&self) -> usize {
        self.roles.shape()[0]
    }

    pub fn n_sym(&self) -> usize {
        self.symbols.shape()[1]
    }

    pub fn n_role(&self) -> usize {
        self.roles.shape()[1]
    }

    /// Checks the structural invariants: `n_S > n_R`, positive temperatures
    /// and scale, nonnegative λ.
    pub fn validate(&self) -> Result<()> {
        if self.n_sym() <= self.n_role() {
            return Err(Error::Config(format!(
                "number of symbols ({}) must exceed number of roles ({})",
                self.n_sym(),
                self.n_role()
            )));
        }
        check_temperature(self.symbol_temperature)?;
        check_temperature(self.role_temperature)?;
        if !(self.scale > F::zero()) {
            return Err(Error::Parameter(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }

    /// `bind` on values; `x = scale · S (a_S a_Rᵀ) Rᵀ`.
    pub fn bind(&self, a_sym: &Tensor<F>, a_role: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let s = g.constant(self.symbols.clone());
        let r = g.constant(self.roles.clone());
        let k = g.constant(Tensor::scalar(self.scale));
        let a = g.constant(a_sym.clone());
        let b = g.constant(a_role.clone());
        let x = bind(&mut g, a, b, s, r, k)?;
        Ok(g.value(x).clone())
    }

    pub fn role_vector(&self, a_role: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let r = g.constant(self.roles.clone());
        let a = g.constant(a_role.clone());
        let v = role_vector(&mut g, a, r)?;
        Ok(g.value(v).clone())
    }

    /// Largest entry of `|RᵀR − I|`; zero for orthonormal role columns.
    pub fn role_orthonormality_deviation(&self) -> f64 {
        let gram = self
            .roles
            .transpose()
            .matmul(&self.roles)
            .expect("square gram");
        let n = self.n_role();
        let mut dev = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((gram.get(&[i, j]).as_f64() - target).abs());
            }
        }
        dev
    }

    /// Recovers the filler bound to role `j`: `(x r_j) / scale`.
    pub fn unbind_role(&self, x: &Tensor<F>, j: usize) -> Result<Tensor<F>> {
        if x.shape() != [self.d_sym(), self.d_role()] {
            return Err(crate::tensor::TensorError::Dimension {
                op: "unbind_role",
                lhs: x.shape().to_vec(),
                rhs: vec![self.d_sym(), self.d_role()],
            }
            .into());
        }
        if j >= self.n_role() {
            return Err(Error::Parameter(format!(
                "role index {j} out of range for {} roles",
                self.n_role()
            )));
        }
        let deviation = self.role_orthonormality_deviation();
        if !(deviation <= ORTHONORMAL_TOL) {
            return Err(Error::Precondition {
                msg: "role columns are not orthonormal".into(),
                deviation,
            });
        }
        let r = self.roles.column(j);
        let inv = F::one() / self.scale;
        let out = (0..self.d_sym())
            .map(|i| x.row(i).iter().zip(&r).map(|(&a, &b)| a * b).sum::<F>() * inv)
            .collect();
        Ok(Tensor::vector(out))
    }

    pub fn orthogonality_penalty(&self) -> F {
        orthogonality_penalty_value(&self.roles, self.lambda)
    }

    /// Symbol attention for a single selector state.
    pub fn attend_symbols(&self, h: &Tensor<F>) -> Result<Tensor<F>> {
        attend_values(h, &self.symbol_selector, self.symbol_temperature)
    }

    pub fn attend_roles(&self, h: &Tensor<F>) -> Result<Tensor<F>> {
        attend_values(h, &self.role_selector, self.role_temperature)
    }
}

/// `softmax(W h / T)` on values.
pub fn attend_values<F: Scalar>(h: &Tensor<F>, w: &Tensor<F>, temperature: f64) -> Result<Tensor<F>> {
    check_temperature(temperature)?;
    let (n, k) = w.dims2();
    if h.len() != k {
        return Err(crate::tensor::TensorError::Dimension {
            op: "attend",
            lhs: w.shape().to_vec(),
            rhs: h.shape().to_vec(),
        }
        .into());
    }
    let inv = F::lit(1.0 / temperature);
    let mut z: Vec<F> = (0..n)
        .map(|i| w.row(i).iter().zip(h.data()).map(|(&a, &b)| a * b).sum::<F>() * inv)
        .collect();
    softmax_in_place(&mut z);
    Ok(Tensor::vector(z))
}

/// `softmax(z / T)` for precomputed logits.
pub fn tempered_softmax<F: Scalar>(logits: &[F], temperature: f64) -> Result<Vec<F>> {
    check_temperature(temperature)?;
    let inv = F::lit(1.0 / temperature);
    let mut z: Vec<F> = logits.iter().map(|&x| x * inv).collect();
    softmax_in_place(&mut z);
    Ok(z)
}

pub fn orthogonality_penalty_value<F: Scalar>(roles: &Tensor<F>, lambda: f64) -> F {
    let mut g = Graph::new();
    let r = g.constant(roles.clone());
    let p = orthogonality_penalty(&mut g, r, lambda).expect("matrix input");
    g.scalar(p)
}

/// Shannon entropy in nats.
pub fn entropy<F: Scalar>(p: &[F]) -> f64 {
    p.iter()
        .map(|x| x.as_f64())
        .filter(|&x| x > 0.0)
        .map(|x| -x * x.ln())
        .sum()
}
