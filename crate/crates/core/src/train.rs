//! Mini-batch training with Adamax, a warm-up/decay schedule and gradient
//! accumulation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{pack, Corpus, Vocab};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::nn::Dropout;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A packed token sequence and its label.
pub type Example = (Vec<usize>, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_proportion: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub seed: u64,
    /// Overrides the model's penalty weight when set.
    pub lambda: Option<f64>,
    /// Overrides the model's selector temperature when set.
    pub temperature: Option<f64>,
    /// Turns dropout off regardless of the model config.
    pub no_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            warmup_proportion: 0.1,
            epochs: 10,
            batch_size: 32,
            accumulation_steps: 2,
            seed: 0,
            lambda: None,
            temperature: None,
            no_dropout: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return Err(Error::Config(format!(
                "warmup proportion {} outside [0, 1]",
                self.warmup_proportion
            )));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("batch size and accumulation steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Examples consumed per optimizer step.
    pub fn examples_per_step(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * n_examples.div_ceil(self.examples_per_step())
    }
}

/// Learning rate for optimizer step `step` (0-based) of `total`: a linear
/// ramp from 0 over the warm-up steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup_proportion * total as f64).round() as usize;
    let lr = cfg.learning_rate;
    if step >= total {
        0.0
    } else if step < warm {
        lr * step as f64 / warm as f64
    } else {
        lr * (total - step) as f64 / (total - warm) as f64
    }
}

/// Adamax with the infinity-norm second moment.
#[derive(Debug, Clone)]
pub struct Adamax<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: ParamSet<F>,
    u: ParamSet<F>,
}

impl<F: Scalar> Adamax<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros = |ps: &ParamSet<F>| {
            let mut z = ParamSet::new();
            for (n, t) in ps.iter() {
                z.insert(n, Tensor::zeros(t.shape()));
            }
            z
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(params),
            u: zeros(params),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `m ← β1 m + (1−β1) g`, `u ← max(β2 u, |g| + ε)`,
    /// `θ ← θ − lr/(1−β1ᵗ) · m/u`.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64) {
        self.t += 1;
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let eps = F::lit(self.eps);
        let clr = F::lit(lr / (1.0 - self.beta1.powi(self.t)));
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment");
            let u = self.u.get_mut(name).expect("moment");
            let (pd, gd) = (p.data_mut(), g.data());
            for (((x, &gi), mi), ui) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(u.data_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *ui = (b2 * *ui).max(gi.abs() + eps);
                *x -= clr * *mi / *ui;
            }
        }
    }
}

/// Packs every pair of `corpus` with `vocab`.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab) -> Vec<Example> {
    corpus.pairs.iter().map(|p| (pack(p, vocab), p.label)).collect()
}

/// Percentage of `data` the model classifies correctly.
pub fn evaluate<F: Scalar>(model: &Model<F>, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut correct = 0;
    for (tokens, label) in data {
        if model.predict(tokens)? == *label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    /// Parameters from the epoch with the best dev accuracy (earliest on ties).
    pub best: Model<F>,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub history: Vec<EpochRecord>,
    /// Parameters after the final step.
    pub last: Model<F>,
}

impl<F> TrainOutcome<F> {
    pub fn dev_history(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.dev_acc).collect()
    }
}

/// Mean loss and its gradient over one optimizer step's examples, summing
/// micro-batch gradients weighted by their size.
fn accumulate<F: Scalar>(
    model: &Model<F>,
    micro: &[&[&Example]],
    drop: &mut Dropout,
) -> Result<(f64, ParamSet<F>)> {
    let total: usize = micro.iter().map(|m| m.len()).sum();
    let mut grads: Option<ParamSet<F>> = None;
    let mut loss = 0.0;
    for mb in micro {
        let mut g = Graph::new();
        let pv = model.params.bind(&mut g);
        let batch: Vec<(&[usize], usize)> = mb.iter().map(|(t, y)| (t.as_slice(), *y)).collect();
        let l = model.batch_loss(&mut g, &pv, &batch, drop)?;
        g.backward(l)?;
        let w = mb.len() as f64 / total as f64;
        loss += w * g.scalar(l).as_f64();
        let gs = pv.grads(&g);
        let wf = F::lit(w);
        match grads.as_mut() {
            None => {
                let mut first = gs;
                for (_, t) in first.iter_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= wf);
                }
                grads = Some(first);
            }
            Some(acc) => {
                for (name, t) in acc.iter_mut() {
                    for (a, &b) in t.data_mut().iter_mut().zip(gs.expect(name).data()) {
                        *a += wf * b;
                    }
                }
            }
        }
    }
    Ok((loss, grads.expect("at least one micro-batch")))
}

/// Trains `model` on `train`, scoring `dev` after each epoch.
pub fn train<F: Scalar>(
    mut model: Model<F>,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(l) = cfg.lambda {
        model.config.tpr.lambda = l;
    }
    if let Some(t) = cfg.temperature {
        model.config.tpr.temperature = t;
    }
    model.config.validate()?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);
    let p = if cfg.no_dropout { 0.0 } else { model.config.backbone.dropout };
    let mut drop = if p > 0.0 { Dropout::new(p, drop_rng) } else { Dropout::off() };

    let total = cfg.total_steps(train.len());
    let mut opt = Adamax::new(&model.params);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamSet<F>)> = None;
    let mut order: Vec<&Example> = train.iter().collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for group in order.chunks(cfg.examples_per_step()) {
            let micro: Vec<&[&Example]> = group.chunks(cfg.batch_size).collect();
            let (loss, grads) = accumulate(&model, &micro, &mut drop)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            loss_sum += loss * group.len() as f64;
            seen += group.len();
            opt.step(&mut model.params, &grads, lr_at(step, total, cfg));
            step += 1;
        }
        let dev_acc = if dev.is_empty() { f64::NAN } else { evaluate(&model, dev)? };
        history.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / seen as f64,
            dev_acc,
        });
        let better = match &best {
            None => true,
            Some((_, b, _)) => dev_acc > *b,
        };
        if better {
            best = Some((epoch, dev_acc, model.params.clone()));
        }
    }
    let (best_epoch, best_dev_acc, params) = match best {
        Some(b) => b,
        None => (0, f64::NAN, model.params.clone()),
    };
    Ok(TrainOutcome {
        best: Model {
            config: model.config.clone(),
            params,
        },
        best_epoch,
        best_dev_acc,
        history,
        last: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total_lr: f64, warm: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: total_lr,
            warmup_proportion: warm,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(1e-3, 0.1);
        assert_eq!(lr_at(0, 100, &c), 0.0);
        assert_eq!(lr_at(10, 100, &c), 1e-3);
        assert_eq!(lr_at(100, 100, &c), 0.0);
        assert!((lr_at(5, 100, &c) - 5e-4).abs() < 1e-18);
        assert!((lr_at(55, 100, &c) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_without_warmup_starts_at_peak() {
        let c = cfg(2.0, 0.0);
        assert_eq!(lr_at(0, 4, &c), 2.0);
        assert_eq!(lr_at(2, 4, &c), 1.0);
        assert_eq!(lr_at(4, 4, &c), 0.0);
    }

    #[test]
    fn adamax_first_step_moves_by_lr() {
        // t=1: m = 0.1 g, u = |g| + ε, bias-corrected step = lr · g / (|g| + ε).
        let mut ps = ParamSet::<f64>::new();
        ps.insert("x", Tensor::vector(vec![1.0, -2.0]));
        let mut gs = ParamSet::new();
        gs.insert("x", Tensor::vector(vec![3.0, -0.5]));
        let mut opt = Adamax::new(&ps);
        opt.step(&mut ps, &gs, 0.01);
        let x = ps.expect("x").data();
        assert!((x[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((x[1] - (-2.0 + 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        let c = TrainConfig {
            accumulation_steps: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            warmup_proportion: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
