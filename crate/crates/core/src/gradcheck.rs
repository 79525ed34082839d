//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{Model, ModelConfig, ModelFamily};
use crate::nn::Dropout;
use crate::params::{ParamSet, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude seen.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares backprop gradients of `loss_fn` against central differences for
/// every entry of every parameter (or the first `limit` entries of each,
/// strided evenly, when `limit` is set).
pub fn check_params<F: Scalar>(
    params: &ParamSet<F>,
    step: f64,
    tolerance: f64,
    limit: Option<usize>,
    loss_fn: impl Fn(&mut Graph<F>, &ParamVars) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g);
    let loss = loss_fn(&mut g, &pv)?;
    g.backward(loss)?;
    let analytic = pv.grads(&g);

    let eval = |ps: &ParamSet<F>| -> Result<f64> {
        let mut g = Graph::new();
        let pv = ps.bind_frozen(&mut g);
        let l = loss_fn(&mut g, &pv)?;
        Ok(g.scalar(l).as_f64())
    };

    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let n = params.expect(&name).len();
        let idx: Vec<usize> = match limit {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: idx.len(),
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for i in idx {
            let orig = params.expect(&name).data()[i];
            let h = F::lit(step);
            work.get_mut(&name).expect("name").data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).expect("name").data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).expect("name").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.expect(&name).data()[i].as_f64();
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
        }
        out.push(check);
    }
    Ok(GradReport {
        tolerance,
        params: out,
    })
}

/// Checks gradients of arbitrary graph inputs; names are `in0`, `in1`, ...
pub fn check_inputs<F: Scalar>(
    inputs: &[Tensor<F>],
    step: f64,
    tolerance: f64,
    f: impl Fn(&mut Graph<F>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let mut ps = ParamSet::new();
    for (i, t) in inputs.iter().enumerate() {
        ps.insert(format!("in{i:03}"), t.clone());
    }
    let n = inputs.len();
    check_params(&ps, step, tolerance, None, |g, pv| {
        let vars: Vec<Var> = (0..n).map(|i| pv.get(&format!("in{i:03}"))).collect();
        f(g, &vars)
    })
}

/// Tiny configuration used to gradient-check a model family end to end.
pub fn tiny_config(family: ModelFamily) -> ModelConfig {
    use crate::encoders::BackboneConfig;
    use crate::head::AggregationStrategy;
    use crate::tpr::TprConfig;
    ModelConfig {
        family,
        backbone: BackboneConfig {
            vocab_size: 11,
            hidden: 8,
            layers: 1,
            heads: 2,
            max_len: 6,
            ffn_dim: 12,
            dropout: 0.0,
        },
        tpr: TprConfig {
            d_sym: 3,
            d_role: 2,
            n_sym: 5,
            n_role: 3,
            temperature: 0.8,
            role_temperature: None,
            lambda: 0.1,
            scale_init: 2.0,
            selector_bias: false,
        },
        aggregation: AggregationStrategy::ConcatProject,
        proj_dim: 4,
        num_classes: 3,
        post_encoder: false,
    }
}

/// Loss-gradient check over every parameter of a tiny `family` model on a
/// fixed three-example batch.
pub fn check_model_family<F: Scalar>(
    family: ModelFamily,
    seed: u64,
    tolerance: f64,
) -> Result<GradReport> {
    let model: Model<F> = Model::init(tiny_config(family), seed)?;
    let batch: Vec<(Vec<usize>, usize)> = vec![
        (vec![1, 4, 2, 7, 3], 0),
        (vec![1, 9, 2, 5], 2),
        (vec![1, 6, 8, 10, 2, 3], 1),
    ];
    let refs: Vec<(&[usize], usize)> = batch.iter().map(|(t, y)| (t.as_slice(), *y)).collect();
    check_params(&model.params, DEFAULT_STEP, tolerance, None, |g, pv| {
        model.batch_loss(g, pv, &refs, &mut Dropout::off())
    })
}
