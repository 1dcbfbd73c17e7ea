use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::anchoring::{TrainConfig, DEFAULT_K};
use crate::error::{Error, Result};
use crate::graph::{DatasetSplits, GeneratorConfig};
use crate::metrics::DEFAULT_BINS;
use crate::model::{AnchorVariant, AnchoringMode, Backbone, ModelSpec, NfaConcat};
use crate::posthoc::PosthocKind;

/// One training/evaluation recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Vanilla,
    GduqNfa,
    GduqHidden(usize),
    GduqReadout,
    GduqReadoutPretrained,
    DeepEnsemble(usize),
}

impl Method {
    pub fn anchoring(self) -> AnchoringMode {
        let variant = match self {
            Method::Vanilla | Method::DeepEnsemble(_) => AnchorVariant::None,
            Method::GduqNfa => AnchorVariant::NodeFeature,
            Method::GduqHidden(r) => AnchorVariant::HiddenLayer(r),
            Method::GduqReadout | Method::GduqReadoutPretrained => AnchorVariant::Readout,
        };
        AnchoringMode {
            pretrained_frozen_backbone: self == Method::GduqReadoutPretrained,
            ..AnchoringMode::new(variant)
        }
    }

    /// Number of independently trained members.
    pub fn members(self) -> usize {
        match self {
            Method::DeepEnsemble(m) => m,
            _ => 1,
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Vanilla => f.write_str("vanilla"),
            Method::GduqNfa => f.write_str("gduq_nfa"),
            Method::GduqHidden(r) => write!(f, "gduq_hidden:{r}"),
            Method::GduqReadout => f.write_str("gduq_readout"),
            Method::GduqReadoutPretrained => f.write_str("gduq_readout_pretrained"),
            Method::DeepEnsemble(m) => write!(f, "deep_ensemble:{m}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts `name`, `name:N` and `name(N)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = if let Some((n, a)) = s.split_once(':') {
            (n, Some(a))
        } else if let Some(n) = s.strip_suffix(')').and_then(|t| t.split_once('(')) {
            (n.0, Some(n.1))
        } else {
            (s, None)
        };
        let number = |what: &str| -> Result<usize> {
            arg.ok_or_else(|| Error::config(format!("method `{s}` needs {what}")))?
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("method `{s}`: {what} must be a positive integer")))
        };
        let plain = |m: Method| -> Result<Method> {
            match arg {
                None => Ok(m),
                Some(_) => Err(Error::config(format!("method `{name}` takes no argument"))),
            }
        };
        match name {
            "vanilla" => plain(Method::Vanilla),
            "gduq_nfa" => plain(Method::GduqNfa),
            "gduq_hidden" => Ok(Method::GduqHidden(number("a layer index")?)),
            "gduq_readout" => plain(Method::GduqReadout),
            "gduq_readout_pretrained" => plain(Method::GduqReadoutPretrained),
            "deep_ensemble" => Ok(Method::DeepEnsemble(number("a member count")?)),
            _ => Err(Error::config(format!("unknown method `{s}`"))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
}

/// Architecture shared by every method; anchoring, class count and input
/// width are filled in per method and dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Backbone,
    pub num_mp_layers: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_head_layers")]
    pub mlp_head_layers: usize,
    #[serde(default)]
    pub nfa_concat: NfaConcat,
}

fn default_head_layers() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    /// Fresh per-node Gaussian anchors at inference instead of one
    /// broadcast vector per anchor index.
    #[serde(default)]
    pub per_node_inference_draws: bool,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            n_bins: DEFAULT_BINS,
            per_node_inference_draws: false,
        }
    }
}

fn default_posthoc() -> Vec<PosthocKind> {
    vec![PosthocKind::None]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub methods: Vec<Method>,
    #[serde(default = "default_posthoc")]
    pub posthoc: Vec<PosthocKind>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Parses TOML; errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." {
                Error::Config(msg)
            } else {
                Error::Config(format!("{path}: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.seeds.is_empty() {
            return Err(Error::config("train.seeds: seed list is empty"));
        }
        if self.train.seeds.iter().collect::<BTreeSet<_>>().len() != self.train.seeds.len() {
            return Err(Error::config("train.seeds: duplicate seed"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods: no methods listed"));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(Error::config("methods: duplicate method"));
        }
        if self.posthoc.is_empty() || self.posthoc.iter().collect::<BTreeSet<_>>().len() != self.posthoc.len() {
            return Err(Error::config("posthoc: list must be nonempty without duplicates"));
        }
        if self.eval.k == 0 {
            return Err(Error::config("eval.k must be at least 1"));
        }
        if self.eval.n_bins == 0 {
            return Err(Error::config("eval.n_bins must be at least 1"));
        }
        for m in &self.methods {
            match *m {
                Method::DeepEnsemble(n) if n < 2 => {
                    return Err(Error::config(format!("methods: {m} needs at least 2 members")))
                }
                Method::GduqHidden(r) if r < 2 || r > self.model.num_mp_layers => {
                    return Err(Error::config(format!(
                        "methods: {m} needs 2 <= r <= num_mp_layers = {}",
                        self.model.num_mp_layers
                    )))
                }
                _ => {}
            }
        }
        self.train_config(0).validate()?;
        if let Some(ds) = &self.dataset {
            if let Some(g) = &ds.generator {
                g.validate()
                    .map_err(|e| Error::Config(format!("dataset.generator: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed,
        }
    }

    /// Full model spec for `method` on `data`.
    pub fn model_spec(&self, method: Method, data: &DatasetSplits) -> Result<ModelSpec> {
        let m = &self.model;
        let spec = ModelSpec {
            backbone: m.backbone,
            num_mp_layers: m.num_mp_layers,
            hidden_dim: m.hidden_dim,
            mlp_head_layers: m.mlp_head_layers,
            num_classes: data.num_classes,
            task: data.task,
            anchoring: AnchoringMode {
                nfa_concat: m.nfa_concat,
                num_inference_anchors: self.eval.k,
                ..method.anchoring()
            },
            input_dim: data.feature_dim(),
        };
        spec.validate()
            .map_err(|e| Error::Config(format!("method {method}: {e}")))?;
        Ok(spec)
    }

    pub fn generator(&self) -> Result<&GeneratorConfig> {
        self.dataset
            .as_ref()
            .and_then(|d| d.generator.as_ref())
            .ok_or_else(|| Error::config("dataset.generator: missing generator section"))
    }
}
