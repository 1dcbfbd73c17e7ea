//! GCN/GIN message-passing models with optional anchoring.
//!
//! A model is `MPNN^1..MPNN^l`, then (graph tasks) mean READOUT, then an MLP
//! head. Anchoring concatenates `[rep - C || C]` at one point of this chain,
//! and the consuming layer has twice its usual input width:
//!
//! | variant            | anchored representation | consumer        |
//! |--------------------|-------------------------|-----------------|
//! | `node_feature`     | input features `X^0`    | `MPNN^1`        |
//! | `hidden_layer(r)`  | `X^{r-1}`               | `MPNN^r`        |
//! | `readout`          | pooled `G`              | first head layer|
//!
//! Node-feature anchoring concatenates `[X^0 - C || X^0]` by default; see
//! [`NfaConcat`].

mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Matrix, Params, Tape};
use crate::error::{Error, Result};
use crate::graph::{Graph, TaskKind};
use crate::rng;

pub use layers::{gcn_normalized_adjacency, Forward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Gcn,
    Gin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "layer")]
pub enum AnchorVariant {
    None,
    NodeFeature,
    HiddenLayer(usize),
    Readout,
}

/// Second block of the node-feature anchored input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NfaConcat {
    /// `[X^0 - C || X^0]`
    #[default]
    Original,
    /// `[X^0 - C || C]`
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchoringMode {
    pub variant: AnchorVariant,
    #[serde(default = "default_k")]
    pub num_inference_anchors: usize,
    #[serde(default)]
    pub pretrained_frozen_backbone: bool,
    #[serde(default)]
    pub nfa_concat: NfaConcat,
}

fn default_k() -> usize {
    10
}

impl AnchoringMode {
    pub fn none() -> Self {
        Self::new(AnchorVariant::None)
    }

    pub fn new(variant: AnchorVariant) -> Self {
        Self {
            variant,
            num_inference_anchors: default_k(),
            pretrained_frozen_backbone: false,
            nfa_concat: NfaConcat::Original,
        }
    }

    pub fn is_anchored(&self) -> bool {
        self.variant != AnchorVariant::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub num_mp_layers: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_head_layers")]
    pub mlp_head_layers: usize,
    pub num_classes: usize,
    pub task: TaskKind,
    pub anchoring: AnchoringMode,
    pub input_dim: usize,
}

fn default_head_layers() -> usize {
    2
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_mp_layers < 1 {
            return Err(Error::config("num_mp_layers must be at least 1"));
        }
        if self.hidden_dim < 1 || self.input_dim < 1 {
            return Err(Error::config("hidden_dim and input_dim must be at least 1"));
        }
        if self.mlp_head_layers < 1 {
            return Err(Error::config("mlp_head_layers must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        let a = &self.anchoring;
        if a.num_inference_anchors < 1 {
            return Err(Error::config("num_inference_anchors must be at least 1"));
        }
        match a.variant {
            AnchorVariant::HiddenLayer(r) if r < 2 || r > self.num_mp_layers => {
                return Err(Error::config(format!(
                    "hidden-layer anchoring needs 2 <= r <= {}, got r = {r}",
                    self.num_mp_layers
                )))
            }
            AnchorVariant::Readout if self.task == TaskKind::NodeClassification => {
                return Err(Error::config("readout anchoring requires a graph classification task"))
            }
            _ => {}
        }
        if a.pretrained_frozen_backbone && a.variant != AnchorVariant::Readout {
            return Err(Error::config(
                "a frozen pretrained backbone is only supported with readout anchoring",
            ));
        }
        Ok(())
    }

    /// Input width of message-passing layer `i` (1-based), including the
    /// doubling for an anchored input.
    pub fn layer_input_dim(&self, i: usize) -> usize {
        let base = if i == 1 { self.input_dim } else { self.hidden_dim };
        match self.anchoring.variant {
            AnchorVariant::NodeFeature if i == 1 => 2 * base,
            AnchorVariant::HiddenLayer(r) if i == r => 2 * base,
            _ => base,
        }
    }

    pub fn head_input_dim(&self) -> usize {
        match self.anchoring.variant {
            AnchorVariant::Readout => 2 * self.hidden_dim,
            _ => self.hidden_dim,
        }
    }

    /// Width of the representation that anchors are subtracted from.
    pub fn anchor_dim(&self) -> Option<usize> {
        match self.anchoring.variant {
            AnchorVariant::None => None,
            AnchorVariant::NodeFeature => Some(self.input_dim),
            AnchorVariant::HiddenLayer(_) | AnchorVariant::Readout => Some(self.hidden_dim),
        }
    }

    /// Same architecture without anchoring.
    pub fn unanchored(&self) -> ModelSpec {
        ModelSpec {
            anchoring: AnchoringMode {
                variant: AnchorVariant::None,
                pretrained_frozen_backbone: false,
                ..self.anchoring
            },
            ..*self
        }
    }

    pub fn check_graph(&self, g: &Graph) -> Result<()> {
        if g.feature_dim() != self.input_dim {
            return Err(Error::input(format!(
                "graph {} has feature dim {} but the model expects {}",
                g.id,
                g.feature_dim(),
                self.input_dim
            )));
        }
        if g.task() != self.task {
            return Err(Error::input(format!("graph {} does not match the model task", g.id)));
        }
        Ok(())
    }
}

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("mp.")
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

fn init_linear(params: &mut Params, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    params.insert(format!("{prefix}.weight"), glorot(fan_in, fan_out, rng));
    params.insert(format!("{prefix}.bias"), Matrix::zeros(1, fan_out));
}

/// Fresh head parameters sized for `spec` (including anchored doubling).
pub fn init_head(spec: &ModelSpec, rng: &mut impl Rng) -> Params {
    let mut params = Params::new();
    let l = spec.mlp_head_layers;
    for j in 0..l {
        let fan_in = if j == 0 { spec.head_input_dim() } else { spec.hidden_dim };
        let fan_out = if j + 1 == l { spec.num_classes } else { spec.hidden_dim };
        init_linear(&mut params, &format!("head.{j}"), fan_in, fan_out, rng);
    }
    params
}

/// Glorot-uniform weights, zero biases, GIN `eps = 0`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "init");
    let mut params = Params::new();
    let h = spec.hidden_dim;
    for i in 1..=spec.num_mp_layers {
        let fan_in = spec.layer_input_dim(i);
        match spec.backbone {
            Backbone::Gcn => init_linear(&mut params, &format!("mp.{i}"), fan_in, h, &mut rng),
            Backbone::Gin => {
                params.insert(format!("mp.{i}.eps"), Matrix::zeros(1, 1));
                init_linear(&mut params, &format!("mp.{i}.lin1"), fan_in, h, &mut rng);
                init_linear(&mut params, &format!("mp.{i}.lin2"), h, h, &mut rng);
            }
        }
    }
    for (k, v) in init_head(spec, &mut rng).iter() {
        params.insert(k, v.clone());
    }
    Ok(params)
}

/// SHA-256 over names, shapes and little-endian values of the backbone.
pub fn backbone_digest(params: &Params) -> String {
    let mut h = Sha256::new();
    for (name, m) in params.iter().filter(|(n, _)| is_backbone_param(n)) {
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// A spec with its parameters. `frozen_backbone` holds the backbone digest
/// when the backbone was frozen during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
    pub frozen_backbone: Option<String>,
}

impl Model {
    pub fn new(spec: ModelSpec, params: Params) -> Self {
        Self {
            spec,
            params,
            frozen_backbone: None,
        }
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        Ok(Self::new(spec, init_params(&spec, seed)?))
    }

    /// Logits for `graph` (1 x q for graph tasks, N x q for node tasks).
    /// `anchor` must be present exactly when the model is anchored; a single
    /// row is broadcast over all nodes.
    pub fn forward(&self, graph: &Graph, anchor: Option<&Matrix>) -> Result<Matrix> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| false);
        let f = Forward::new(&self.spec, &tape, &bound);
        let prop = f.propagation(graph);
        let rep = f.prefix(graph, prop)?;
        let logits = f.suffix(prop, rep, anchor)?;
        Ok(tape.value(logits))
    }

    /// The representation anchors are drawn from: `X^{r-1}` (N x h) for
    /// hidden-layer anchoring, pooled `G` (1 x h) for readout anchoring, the
    /// input features otherwise.
    pub fn representation(&self, graph: &Graph) -> Result<Matrix> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| false);
        let f = Forward::new(&self.spec, &tape, &bound);
        let prop = f.propagation(graph);
        let rep = f.prefix(graph, prop)?;
        Ok(tape.value(rep))
    }

    pub fn backbone_digest(&self) -> String {
        backbone_digest(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(backbone: Backbone, variant: AnchorVariant) -> ModelSpec {
        ModelSpec {
            backbone,
            num_mp_layers: 3,
            hidden_dim: 4,
            mlp_head_layers: 2,
            num_classes: 3,
            task: TaskKind::GraphClassification,
            anchoring: AnchoringMode::new(variant),
            input_dim: 2,
        }
    }

    #[test]
    fn hidden_layer_index_is_bounded() {
        for r in [0, 1, 4] {
            assert!(spec(Backbone::Gin, AnchorVariant::HiddenLayer(r)).validate().is_err());
        }
        for r in 2..=3 {
            spec(Backbone::Gin, AnchorVariant::HiddenLayer(r)).validate().unwrap();
        }
    }

    #[test]
    fn anchored_layer_doubles_width() {
        let s = spec(Backbone::Gcn, AnchorVariant::HiddenLayer(2));
        let p = init_params(&s, 0).unwrap();
        assert_eq!(p.get("mp.1.weight").unwrap().shape(), (2, 4));
        assert_eq!(p.get("mp.2.weight").unwrap().shape(), (8, 4));
        assert_eq!(p.get("mp.3.weight").unwrap().shape(), (4, 4));

        let s = spec(Backbone::Gin, AnchorVariant::NodeFeature);
        let p = init_params(&s, 0).unwrap();
        assert_eq!(p.get("mp.1.lin1.weight").unwrap().shape(), (4, 4));

        let s = spec(Backbone::Gin, AnchorVariant::Readout);
        let p = init_params(&s, 0).unwrap();
        assert_eq!(p.get("head.0.weight").unwrap().shape(), (8, 4));
        assert_eq!(p.get("head.1.weight").unwrap().shape(), (4, 3));
    }

    #[test]
    fn readout_on_node_task_is_rejected() {
        let mut s = spec(Backbone::Gcn, AnchorVariant::Readout);
        s.task = TaskKind::NodeClassification;
        assert!(s.validate().is_err());
    }

    #[test]
    fn frozen_backbone_requires_readout() {
        let mut s = spec(Backbone::Gcn, AnchorVariant::NodeFeature);
        s.anchoring.pretrained_frozen_backbone = true;
        assert!(s.validate().is_err());
    }

    #[test]
    fn digest_ignores_head() {
        let s = spec(Backbone::Gin, AnchorVariant::None);
        let mut p = init_params(&s, 1).unwrap();
        let d = backbone_digest(&p);
        p.get_mut("head.0.bias").unwrap().data_mut()[0] = 5.0;
        assert_eq!(backbone_digest(&p), d);
        p.get_mut("mp.1.eps").unwrap().data_mut()[0] = 0.5;
        assert_ne!(backbone_digest(&p), d);
    }
}
