//! Parameter-subset transfer from a source-task model and gain accounting.

use std::fmt;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tpr;
use crate::train::{self, Example, TrainConfig, TrainOutcome};

pub const BACKBONE_PREFIXES: [&str; 2] = ["backbone.", "tprenc."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TransferPlan {
    pub backbone: bool,
    pub fillers: bool,
    pub roles: bool,
}

impl TransferPlan {
    pub const NONE: TransferPlan = TransferPlan {
        backbone: false,
        fillers: false,
        roles: false,
    };
    pub const ROLES_ONLY: TransferPlan = TransferPlan {
        backbone: false,
        fillers: false,
        roles: true,
    };

    /// The seven non-empty plans, backbone as the high bit.
    pub fn all() -> Vec<TransferPlan> {
        (1..8u8)
            .map(|k| TransferPlan {
                backbone: k & 4 != 0,
                fillers: k & 2 != 0,
                roles: k & 1 != 0,
            })
            .collect()
    }

    pub fn is_empty(self) -> bool {
        self == Self::NONE
    }

    /// Whether parameter `name` belongs to a subset this plan copies.
    pub fn covers(self, name: &str) -> bool {
        (self.backbone && BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p)))
            || (self.fillers && name == tpr::SYMBOLS)
            || (self.roles && name == tpr::ROLES)
    }
}

impl fmt::Display for TransferPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.backbone, "backbone"),
            (self.fillers, "fillers"),
            (self.roles, "roles"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

/// Copies the plan's subsets of `source` into `target`. Returns the copied
/// names. Subsets absent from the target architecture are skipped.
pub fn apply_transfer<F: Scalar>(
    target: &mut Model<F>,
    source: &ParamSet<F>,
    plan: TransferPlan,
) -> Result<Vec<String>> {
    let names: Vec<String> = target
        .params
        .names()
        .filter(|n| plan.covers(n))
        .map(String::from)
        .collect();
    for name in &names {
        let src = source.get(name).ok_or_else(|| Error::Transfer {
            name: name.clone(),
            msg: "absent from source checkpoint".into(),
        })?;
        let dst = target.params.get_mut(name).expect("listed name");
        if src.shape() != dst.shape() {
            return Err(Error::Transfer {
                name: name.clone(),
                msg: format!("source shape {:?}, target shape {:?}", src.shape(), dst.shape()),
            });
        }
        *dst = src.clone();
    }
    Ok(names)
}

/// `finetuned − baseline`, rounded to two decimals.
pub fn gain(baseline: f64, finetuned: f64) -> f64 {
    ((finetuned - baseline) * 100.0).round() / 100.0
}

/// Signed two-decimal rendering, e.g. `+12.28`.
pub fn format_gain(g: f64) -> String {
    format!("{g:+.2}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub model: String,
    pub target: String,
    pub plan: TransferPlan,
    pub baseline_acc: f64,
    pub finetuned_acc: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GainTable {
    pub rows: Vec<GainRow>,
}

impl GainTable {
    pub const HEADER: &'static str =
        "model,target,transfer_backbone,transfer_fillers,transfer_roles,baseline_acc,finetuned_acc,gain";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.2},{:.2},{}",
                r.model,
                r.target,
                r.plan.backbone,
                r.plan.fillers,
                r.plan.roles,
                r.baseline_acc,
                r.finetuned_acc,
                format_gain(r.gain)
            );
        }
        s
    }

    /// Best non-empty plan row (first on ties).
    pub fn winner(&self) -> Option<&GainRow> {
        self.rows
            .iter()
            .filter(|r| !r.plan.is_empty())
            .fold(None, |best: Option<&GainRow>, r| match best {
                Some(b) if b.finetuned_acc >= r.finetuned_acc => Some(b),
                _ => Some(r),
            })
    }

    pub fn row(&self, plan: TransferPlan) -> Option<&GainRow> {
        self.rows.iter().find(|r| r.plan == plan)
    }
}

/// Everything [`run_transfer_matrix`] needs besides the data.
#[derive(Debug, Clone)]
pub struct MatrixConfig {
    /// Target-task architecture.
    pub model: ModelConfig,
    /// Class count of the source task.
    pub source_classes: usize,
    pub source_train: TrainConfig,
    pub target_train: TrainConfig,
    /// Baseline instances use `seed`, `seed + 1`, ...
    pub baseline_seeds: usize,
    /// Shared by the source model and every plan's target model.
    pub seed: u64,
    pub target_name: String,
    pub jobs: usize,
}

impl MatrixConfig {
    pub fn new(model: ModelConfig, source_classes: usize, train: TrainConfig, seed: u64) -> Self {
        Self {
            model,
            source_classes,
            source_train: train.clone(),
            target_train: train,
            baseline_seeds: 3,
            seed,
            target_name: "target".into(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
}

/// Baseline instances trained from scratch; returns each best dev accuracy.
pub fn train_baselines<F: Scalar>(
    target: TaskData<'_>,
    cfg: &MatrixConfig,
) -> Result<Vec<f64>> {
    let seeds: Vec<u64> = (0..cfg.baseline_seeds as u64).map(|i| cfg.seed + i).collect();
    parallel_map(cfg.jobs, &seeds, |&s| {
        let model: Model<F> = Model::init(cfg.model.clone(), s)?;
        let tc = TrainConfig {
            seed: s,
            ..cfg.target_train.clone()
        };
        Ok(train::train(model, target.train, target.dev, &tc)?.best_dev_acc)
    })
}

pub fn train_source<F: Scalar>(source: TaskData<'_>, cfg: &MatrixConfig) -> Result<TrainOutcome<F>> {
    let mc = ModelConfig {
        num_classes: cfg.source_classes,
        ..cfg.model.clone()
    };
    let model: Model<F> = Model::init(mc, cfg.seed)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.source_train.clone()
    };
    train::train(model, source.train, source.dev, &tc)
}

/// Fresh target model seeded with `cfg.seed`, given the plan's subsets of
/// `source`, then trained on the target task.
pub fn finetune<F: Scalar>(
    source: &ParamSet<F>,
    plan: TransferPlan,
    target: TaskData<'_>,
    cfg: &MatrixConfig,
) -> Result<TrainOutcome<F>> {
    let mut model: Model<F> = Model::init(cfg.model.clone(), cfg.seed)?;
    apply_transfer(&mut model, source, plan)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.target_train.clone()
    };
    train::train(model, target.train, target.dev, &tc)
}

/// Baselines (best of `baseline_seeds`), one source model, and a target
/// model per non-empty plan. The table holds one baseline row then seven
/// plan rows.
pub fn run_transfer_matrix<F: Scalar>(
    source: TaskData<'_>,
    target: TaskData<'_>,
    cfg: &MatrixConfig,
) -> Result<GainTable> {
    let baselines = train_baselines::<F>(target, cfg)?;
    let baseline = baselines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let src = train_source::<F>(source, cfg)?;
    let plans = TransferPlan::all();
    let accs = parallel_map(cfg.jobs, &plans, |&plan| {
        Ok(finetune(&src.best.params, plan, target, cfg)?.best_dev_acc)
    })?;
    let model = cfg.model.family.to_string();
    let mut rows = vec![GainRow {
        model: model.clone(),
        target: cfg.target_name.clone(),
        plan: TransferPlan::NONE,
        baseline_acc: baseline,
        finetuned_acc: baseline,
        gain: 0.0,
    }];
    for (plan, acc) in plans.into_iter().zip(accs) {
        rows.push(GainRow {
            model: model.clone(),
            target: cfg.target_name.clone(),
            plan,
            baseline_acc: baseline,
            finetuned_acc: acc,
            gain: gain(baseline, acc),
        });
    }
    Ok(GainTable { rows })
}

/// Applies `f` to every item on up to `jobs` threads; results keep input
/// order and the first error (by input order) wins.
pub fn parallel_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::tiny_config;
    use crate::head;
    use crate::model::ModelFamily;

    #[test]
    fn seven_distinct_nonempty_plans() {
        let plans = TransferPlan::all();
        assert_eq!(plans.len(), 7);
        assert!(plans.iter().all(|p| !p.is_empty()));
        let set: std::collections::HashSet<_> = plans.iter().collect();
        assert_eq!(set.len(), 7);
    }

    #[test]
    fn reported_gain_rounds() {
        assert_eq!(gain(61.73, 74.01), 12.28);
        assert_eq!(format_gain(gain(61.73, 74.01)), "+12.28");
        assert_eq!(format_gain(gain(80.0, 79.5)), "-0.50");
    }

    #[test]
    fn plan_covers_exact_names() {
        let p = TransferPlan::ROLES_ONLY;
        assert!(p.covers("tpr.R"));
        assert!(!p.covers("tpr.R2") && !p.covers("tpr.S") && !p.covers("tpr.W_R"));
        let all = TransferPlan {
            backbone: true,
            fillers: true,
            roles: true,
        };
        for n in [head::CLASSIFIER, head::PROJECTION, tpr::SCALE, tpr::SYMBOL_SELECTOR, tpr::ROLE_SELECTOR] {
            assert!(!all.covers(n), "{n}");
        }
        assert!(all.covers("backbone.tok_emb") && all.covers("tprenc.sym.attn.q.w"));
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let mut a: Model<f64> = Model::init(tiny_config(ModelFamily::TprTransformer), 1).unwrap();
        let mut cfg = tiny_config(ModelFamily::TprTransformer);
        cfg.tpr.n_role = 4;
        let b: Model<f64> = Model::init(cfg, 2).unwrap();
        match apply_transfer(&mut a, &b.params, TransferPlan::ROLES_ONLY) {
            Err(Error::Transfer { name, .. }) => assert_eq!(name, "tpr.R"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<u64> = (0..20).collect();
        let ys = parallel_map(4, &xs, |&x| Ok(x * x)).unwrap();
        assert_eq!(ys, xs.iter().map(|x| x * x).collect::<Vec<_>>());
        let err = parallel_map(3, &xs, |&x| if x == 5 { Err(Error::Data("x".into())) } else { Ok(x) });
        assert!(err.is_err());
    }
}
