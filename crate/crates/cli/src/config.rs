//! Layered run settings: built-in defaults, then `--config` file, then
//! `--set` pairs, then canonical flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tpr_core::data::{ProbeSpec, StructuredConfig};
use tpr_core::{kv, ModelConfig, TrainConfig, TransferPlan};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<tpr_core::Error> for CliError {
    fn from(e: tpr_core::Error) -> Self {
        use tpr_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Parameter(_) => CliError::Config(msg),
            E::Data(_) | E::Schema { .. } | E::Length { .. } | E::Io { .. } | E::Checkpoint(_) => {
                CliError::Data(msg)
            }
            E::Tensor(_) | E::Precondition { .. } | E::Divergence { .. } | E::Transfer { .. } => {
                CliError::Runtime(msg)
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Settings that are not model-architecture keys, with their defaults.
fn run_defaults() -> Vec<(&'static str, String)> {
    let t = TrainConfig::default();
    let s = StructuredConfig::default();
    let p = ProbeSpec::default();
    vec![
        ("seed", "0".into()),
        ("jobs", "1".into()),
        ("lr", t.learning_rate.to_string()),
        ("warmup", t.warmup_proportion.to_string()),
        ("epochs", t.epochs.to_string()),
        ("batch", t.batch_size.to_string()),
        ("accum", t.accumulation_steps.to_string()),
        ("no-dropout", "false".into()),
        ("source-lr", String::new()),
        ("source-epochs", String::new()),
        ("baseline-seeds", "3".into()),
        ("train", String::new()),
        ("dev", String::new()),
        ("source-train", String::new()),
        ("source-dev", String::new()),
        ("source-ckpt", String::new()),
        ("ckpt", String::new()),
        ("probes", String::new()),
        ("labels", String::new()),
        ("transfer-backbone", "false".into()),
        ("transfer-fillers", "false".into()),
        ("transfer-roles", "false".into()),
        ("task", "structured".into()),
        ("count", String::new()),
        ("rule", s.rule.to_string()),
        ("negative", s.negative.to_string()),
        ("words-per-task", s.words_per_task.to_string()),
        ("word-pool", s.word_pool.to_string()),
        ("disjoint", s.disjoint.to_string()),
        ("n-tags", s.n_tags.to_string()),
        ("templates", s.templates.to_string()),
        ("sent-min", s.min_len.to_string()),
        ("sent-max", s.max_len.to_string()),
        ("source-train-n", s.source_train.to_string()),
        ("source-dev-n", s.source_dev.to_string()),
        ("target-train-n", s.target_train.to_string()),
        ("target-dev-n", s.target_dev.to_string()),
        ("balance", s.balance.to_string()),
        ("flip-target-labels", s.flip_target_labels.to_string()),
        ("probe-vocab", p.vocab_size.to_string()),
        ("probe-depth", p.depth.to_string()),
        ("k", "2".into()),
        ("tol", "1e-4".into()),
    ]
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone)]
pub struct Settings {
    map: BTreeMap<String, String>,
    /// Keys supplied by the user rather than defaulted.
    explicit: Vec<String>,
}

impl Settings {
    /// `file` entries override defaults; `overrides` (in order) override both.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut map: BTreeMap<String, String> = ModelConfig::default().to_kv();
        for (k, v) in run_defaults() {
            map.insert(k.to_string(), v);
        }
        let mut layered = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            layered.extend(kv::parse(&text)?);
        }
        layered.extend(overrides.iter().cloned());
        let mut explicit = Vec::new();
        for (k, v) in layered {
            if !map.contains_key(&k) {
                return Err(CliError::Config(format!("unknown setting {k:?}")));
            }
            explicit.push(k.clone());
            map.insert(k, v);
        }
        let s = Self { map, explicit };
        // `model` may hold a comma list for `transfer`; check each entry.
        for fam in s.raw("model").split(',') {
            fam.trim().parse::<tpr_core::ModelFamily>()?;
        }
        s.train()?;
        Ok(s)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        Ok(kv::value(key, self.raw(key))?)
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            "" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    /// An input file that must exist.
    pub fn input(&self, key: &str) -> CliResult<Option<PathBuf>> {
        match self.raw(key) {
            "" => Ok(None),
            p => {
                let path = PathBuf::from(p);
                if !path.is_file() {
                    return Err(CliError::Data(format!(
                        "--{key}: {} does not exist",
                        path.display()
                    )));
                }
                Ok(Some(path))
            }
        }
    }

    pub fn required_input(&self, key: &str) -> CliResult<PathBuf> {
        self.input(key)?
            .ok_or_else(|| CliError::Config(format!("--{key} is required")))
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.get("seed")
    }

    pub fn model(&self) -> CliResult<ModelConfig> {
        self.model_as(self.raw("model"))
    }

    /// Model settings with `model` replaced by one family.
    pub fn model_as(&self, family: &str) -> CliResult<ModelConfig> {
        let mut map = self.map.clone();
        map.insert("model".into(), family.to_string());
        Ok(ModelConfig::from_kv(&map)?)
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        let c = TrainConfig {
            learning_rate: self.get("lr")?,
            warmup_proportion: self.get("warmup")?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch")?,
            accumulation_steps: self.get("accum")?,
            seed: self.seed()?,
            lambda: None,
            temperature: None,
            no_dropout: self.get("no-dropout")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn source_train(&self) -> CliResult<TrainConfig> {
        let mut c = self.train()?;
        if let Some(lr) = self.opt("source-lr")? {
            c.learning_rate = lr;
        }
        if let Some(e) = self.opt("source-epochs")? {
            c.epochs = e;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn plan(&self) -> CliResult<TransferPlan> {
        Ok(TransferPlan {
            backbone: self.get("transfer-backbone")?,
            fillers: self.get("transfer-fillers")?,
            roles: self.get("transfer-roles")?,
        })
    }

    pub fn structured(&self) -> CliResult<StructuredConfig> {
        let mut c = StructuredConfig {
            rule: self.get("rule")?,
            negative: self.get("negative")?,
            words_per_task: self.get("words-per-task")?,
            word_pool: self.get("word-pool")?,
            disjoint: self.get("disjoint")?,
            n_tags: self.get("n-tags")?,
            templates: self.get("templates")?,
            min_len: self.get("sent-min")?,
            max_len: self.get("sent-max")?,
            source_train: self.get("source-train-n")?,
            source_dev: self.get("source-dev-n")?,
            target_train: self.get("target-train-n")?,
            target_dev: self.get("target-dev-n")?,
            balance: self.get("balance")?,
            flip_target_labels: self.get("flip-target-labels")?,
        };
        if let Some(n) = self.opt::<usize>("count")? {
            c.source_train = n;
            c.target_train = n;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn probes(&self) -> CliResult<ProbeSpec> {
        let n = self
            .opt::<usize>("count")?
            .unwrap_or(ProbeSpec::default().lexical_overlap);
        let spec = ProbeSpec {
            vocab_size: self.get("probe-vocab")?,
            depth: self.get("probe-depth")?,
            lexical_overlap: n,
            subsequence: n,
            constituent: n,
            balance: self.get("balance")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The effective settings as `key=value` text.
    pub fn resolved_text(&self) -> String {
        kv::format(&self.map)
    }
}
