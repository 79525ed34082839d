//! The four sequence classifiers: backbone only, backbone + LSTM, and the
//! two binding-layer variants (recurrent and transformer selectors).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{self, AggregationStrategy};
use crate::nn::{Dropout, EncoderLayer, LstmCell};
use crate::params::{ParamSet, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tpr::{self, Binding, TprConfig, TprParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelFamily {
    Baseline,
    BaselineLstm,
    TprLstm,
    TprTransformer,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [
        ModelFamily::Baseline,
        ModelFamily::BaselineLstm,
        ModelFamily::TprLstm,
        ModelFamily::TprTransformer,
    ];

    pub fn has_tpr(self) -> bool {
        matches!(self, ModelFamily::TprLstm | ModelFamily::TprTransformer)
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Baseline => "baseline",
            ModelFamily::BaselineLstm => "baseline+lstm",
            ModelFamily::TprLstm => "tpr-lstm",
            ModelFamily::TprTransformer => "tpr-transformer",
        })
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family {s:?}")))
    }
}

pub const POST_ENCODER: &str = "post";
pub const BASELINE_LSTM: &str = "tprenc.lstm";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub backbone: BackboneConfig,
    pub tpr: TprConfig,
    pub aggregation: AggregationStrategy,
    pub proj_dim: usize,
    pub num_classes: usize,
    /// Extra one-head encoder layer over the bound tensors.
    pub post_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: ModelFamily::TprTransformer,
            backbone: BackboneConfig::default(),
            tpr: TprConfig::default(),
            aggregation: AggregationStrategy::ConcatProject,
            proj_dim: 128,
            num_classes: 2,
            post_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.family.has_tpr() {
            self.tpr.validate()?;
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.aggregation == AggregationStrategy::ConcatProject && self.proj_dim == 0 {
            return Err(Error::Config("projection width must be positive".into()));
        }
        Ok(())
    }

    /// Width of the per-token features handed to aggregation.
    pub fn feature_dim(&self) -> usize {
        if self.family.has_tpr() {
            self.tpr.bound_dim()
        } else {
            self.backbone.hidden
        }
    }

    pub fn sentence_dim(&self) -> usize {
        self.aggregation.output_dim(self.feature_dim(), self.proj_dim)
    }

    fn post_layer(&self) -> EncoderLayer {
        let d = self.tpr.bound_dim();
        EncoderLayer::new(POST_ENCODER, d, 1, 2 * d)
    }

    fn tpr_transformers(&self) -> (EncoderLayer, EncoderLayer) {
        let b = &self.backbone;
        (
            encoders::symbol_transformer(b.hidden, b.heads, b.ffn_dim),
            encoders::role_transformer(b.hidden, b.heads, b.ffn_dim),
        )
    }

    /// Sets one field from its `key=value` spelling. Returns `false` for keys
    /// that are not model settings.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        use crate::kv::value;
        let b = &mut self.backbone;
        let t = &mut self.tpr;
        match key {
            "model" => self.family = v.parse()?,
            "vocab-size" => b.vocab_size = value(key, v)?,
            "hidden" => b.hidden = value(key, v)?,
            "layers" => b.layers = value(key, v)?,
            "heads" => b.heads = value(key, v)?,
            "max-len" => b.max_len = value(key, v)?,
            "ffn-dim" => b.ffn_dim = value(key, v)?,
            "dropout" => b.dropout = value(key, v)?,
            "d-sym" => t.d_sym = value(key, v)?,
            "d-role" => t.d_role = value(key, v)?,
            "n-sym" => t.n_sym = value(key, v)?,
            "n-role" => t.n_role = value(key, v)?,
            "temp" => t.temperature = value(key, v)?,
            "role-temp" => {
                t.role_temperature = match v {
                    "" | "shared" => None,
                    _ => Some(value(key, v)?),
                }
            }
            "lambda" => t.lambda = value(key, v)?,
            "scale-init" => t.scale_init = value(key, v)?,
            "selector-bias" => t.selector_bias = value(key, v)?,
            "aggregation" => self.aggregation = v.parse()?,
            "proj-dim" => self.proj_dim = value(key, v)?,
            "num-classes" => self.num_classes = value(key, v)?,
            "post-encoder" => self.post_encoder = value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `key=value` pairs accepted by [`ModelConfig::set`].
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let b = &self.backbone;
        let t = &self.tpr;
        let role_temp = t.role_temperature.map_or("shared".to_string(), |x| x.to_string());
        [
            ("model", self.family.to_string()),
            ("vocab-size", b.vocab_size.to_string()),
            ("hidden", b.hidden.to_string()),
            ("layers", b.layers.to_string()),
            ("heads", b.heads.to_string()),
            ("max-len", b.max_len.to_string()),
            ("ffn-dim", b.ffn_dim.to_string()),
            ("dropout", b.dropout.to_string()),
            ("d-sym", t.d_sym.to_string()),
            ("d-role", t.d_role.to_string()),
            ("n-sym", t.n_sym.to_string()),
            ("n-role", t.n_role.to_string()),
            ("temp", t.temperature.to_string()),
            ("role-temp", role_temp),
            ("lambda", t.lambda.to_string()),
            ("scale-init", t.scale_init.to_string()),
            ("selector-bias", t.selector_bias.to_string()),
            ("aggregation", self.aggregation.to_string()),
            ("proj-dim", self.proj_dim.to_string()),
            ("num-classes", self.num_classes.to_string()),
            ("post-encoder", self.post_encoder.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Rebuilds a config from [`ModelConfig::to_kv`] output; unknown keys are ignored.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Stable textual identity of the architecture, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let b = &self.backbone;
        let t = &self.tpr;
        format!(
            "family={} vocab={} hidden={} layers={} heads={} max_len={} ffn={} d_sym={} d_role={} n_sym={} n_role={} bias={} agg={} proj={} classes={} post={}",
            self.family, b.vocab_size, b.hidden, b.layers, b.heads, b.max_len, b.ffn_dim,
            t.d_sym, t.d_role, t.n_sym, t.n_role, t.selector_bias, self.aggregation,
            self.proj_dim, self.num_classes, self.post_encoder
        )
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub logits: Var,
    /// Present for the binding families.
    pub binding: Option<Binding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> Model<F> {
    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cfg = &config;
        cfg.backbone.init_params(&mut params, &mut rng);
        let hidden = cfg.backbone.hidden;
        match cfg.family {
            ModelFamily::Baseline => {}
            ModelFamily::BaselineLstm => {
                LstmCell::new(BASELINE_LSTM, hidden, hidden).init(&mut params, &mut rng);
            }
            ModelFamily::TprTransformer => {
                let (s, r) = cfg.tpr_transformers();
                s.init(&mut params, &mut rng);
                r.init(&mut params, &mut rng);
                cfg.tpr.init_params(hidden, &mut params, &mut rng);
            }
            ModelFamily::TprLstm => {
                encoders::symbol_lstm(hidden, &cfg.tpr).init(&mut params, &mut rng);
                encoders::role_lstm(hidden, &cfg.tpr).init(&mut params, &mut rng);
                cfg.tpr.init_params(cfg.tpr.bound_dim(), &mut params, &mut rng);
            }
        }
        if cfg.post_encoder && cfg.family.has_tpr() {
            cfg.post_layer().init(&mut params, &mut rng);
        }
        let feat = cfg.feature_dim();
        if cfg.aggregation == AggregationStrategy::ConcatProject {
            let width = cfg.backbone.max_len * feat;
            let b = 1.0 / (width as f64).sqrt();
            params.insert(
                head::PROJECTION,
                Tensor::uniform(&[cfg.proj_dim, width], -b, b, &mut rng),
            );
        }
        let p = cfg.sentence_dim();
        let b = 1.0 / (p as f64).sqrt();
        params.insert(
            head::CLASSIFIER,
            Tensor::uniform(&[cfg.num_classes, p], -b, b, &mut rng),
        );
        Ok(Self { config, params })
    }

    pub fn tpr_params(&self) -> Option<TprParams<F>> {
        self.config
            .family
            .has_tpr()
            .then(|| TprParams::from_params(&self.config.tpr, &self.params))
    }

    /// Runs one unpadded token sequence through the model.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        pv: &ParamVars,
        tokens: &[usize],
        drop: &mut Dropout,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        let keep = vec![true; tokens.len()];
        let v = encoders::encode_backbone(g, pv, &cfg.backbone, tokens, &keep, drop)?;
        let (feats, binding) = match cfg.family {
            ModelFamily::Baseline => (v, None),
            ModelFamily::BaselineLstm => {
                let cell = LstmCell::new(BASELINE_LSTM, cfg.backbone.hidden, cfg.backbone.hidden);
                (cell.run(g, pv, v)?, None)
            }
            ModelFamily::TprTransformer => {
                let (hs, hr) = encoders::tpr_encode_transformer(g, pv, &cfg.backbone, v, None, drop)?;
                let b = tpr::select_and_bind(g, pv, &cfg.tpr, hs, hr)?;
                (b.bound, Some(b))
            }
            ModelFamily::TprLstm => {
                let out = encoders::tpr_encode_lstm(g, pv, &cfg.tpr, v)?;
                (out.binding.bound, Some(out.binding))
            }
        };
        let feats = if cfg.post_encoder && cfg.family.has_tpr() {
            cfg.post_layer().forward(g, pv, feats, None, drop)?
        } else {
            feats
        };
        let proj = pv.try_get(head::PROJECTION);
        let f = head::aggregate(g, feats, &keep, cfg.aggregation, proj, cfg.backbone.max_len)?;
        let logits = head::logits(g, f, pv.get(head::CLASSIFIER))?;
        Ok(ForwardOut { logits, binding })
    }

    /// Batch loss graph: mean cross-entropy plus the role penalty.
    pub fn batch_loss(
        &self,
        g: &mut Graph<F>,
        pv: &ParamVars,
        batch: &[(&[usize], usize)],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let mut logits = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &(tokens, label) in batch {
            logits.push(self.forward(g, pv, tokens, drop)?.logits);
            labels.push(label);
        }
        let roles = pv.try_get(tpr::ROLES);
        head::loss(g, &logits, &labels, roles, self.config.tpr.lambda)
    }

    /// Class probabilities for one sequence, dropout off.
    pub fn predict_proba(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &pv, tokens, &mut Dropout::off())?;
        let p = g.softmax(out.logits);
        Ok(g.value(p).clone())
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(self.predict_proba(tokens)?.argmax())
    }

    /// Role attention rows `[N × n_R]` for one sequence (binding families only).
    pub fn role_attention(&self, tokens: &[usize]) -> Result<Option<Tensor<F>>> {
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &pv, tokens, &mut Dropout::off())?;
        Ok(out.binding.map(|b| g.value(b.a_role).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_names_round_trip() {
        for f in ModelFamily::ALL {
            assert_eq!(f.to_string().parse::<ModelFamily>().unwrap(), f);
        }
        assert!("bert".parse::<ModelFamily>().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut c = ModelConfig::default();
        c.tpr.role_temperature = Some(0.25);
        c.backbone.dropout = 0.1;
        c.family = ModelFamily::BaselineLstm;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(!c.clone().set("lr", "1").unwrap());
        assert!(c.set("hidden", "x").is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = crate::gradcheck::tiny_config(ModelFamily::TprTransformer);
        let a: Model<f64> = Model::init(cfg.clone(), 3).unwrap();
        let b: Model<f64> = Model::init(cfg.clone(), 3).unwrap();
        let c: Model<f64> = Model::init(cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }
}
