//! Graph data model, synthetic benchmarks with controllable distribution
//! shift, split construction and the line-delimited JSON dataset format.

mod io;
mod motif;
mod sbm;
mod split;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use motif::{decode_spurious, gen_motif_dataset, BaseStructure, Motif};
pub use sbm::{gen_node_dataset, SbmConfig};
pub use split::{make_size_shift_splits, nearest_rank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GraphClassification,
    NodeClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    Size,
    Covariate,
    Concept,
}

impl ShiftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::Size => "size",
            ShiftKind::Covariate => "covariate",
            ShiftKind::Concept => "concept",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Graph(usize),
    Nodes(Vec<usize>),
}

/// One graph: dense features `x` (N x d), dense symmetric adjacency (N x N).
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: String,
    pub x: Matrix,
    pub adj: Matrix,
    pub labels: Labels,
    /// Node indices this copy is evaluated on (transductive node tasks only).
    pub mask: Option<Vec<usize>>,
}

impl Graph {
    pub fn new(id: impl Into<String>, x: Matrix, adj: Matrix, labels: Labels) -> Result<Self> {
        let g = Graph {
            id: id.into(),
            x,
            adj,
            labels,
            mask: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.x.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn graph_label(&self) -> Option<usize> {
        match self.labels {
            Labels::Graph(y) => Some(y),
            Labels::Nodes(_) => None,
        }
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Nodes(y) => Some(y),
            Labels::Graph(_) => None,
        }
    }

    pub fn task(&self) -> TaskKind {
        match self.labels {
            Labels::Graph(_) => TaskKind::GraphClassification,
            Labels::Nodes(_) => TaskKind::NodeClassification,
        }
    }

    /// Nodes the loss/metrics are computed on: the mask when present,
    /// otherwise every node.
    pub fn active_nodes(&self) -> Vec<usize> {
        self.mask.clone().unwrap_or_else(|| (0..self.num_nodes()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if self.adj.shape() != (n, n) {
            return Err(Error::input(format!(
                "graph {}: adjacency is {}x{} but there are {n} nodes",
                self.id,
                self.adj.rows(),
                self.adj.cols()
            )));
        }
        if n == 0 {
            return Err(Error::input(format!("graph {} has no nodes", self.id)));
        }
        if let Labels::Nodes(y) = &self.labels {
            if y.len() != n {
                return Err(Error::input(format!(
                    "graph {}: {} node labels for {n} nodes",
                    self.id,
                    y.len()
                )));
            }
        }
        if let Some(mask) = &self.mask {
            if let Some(&bad) = mask.iter().find(|&&i| i >= n) {
                return Err(Error::input(format!("graph {}: mask index {bad} >= {n}", self.id)));
            }
        }
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.num_nodes();
        (0..n).all(|i| (0..i).all(|j| self.adj.get(i, j) == self.adj.get(j, i)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Graph>,
    pub id_val: Vec<Graph>,
    pub id_test: Vec<Graph>,
    pub ood_test: Vec<Graph>,
    pub shift: ShiftKind,
    pub num_classes: usize,
    pub task: TaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    IdVal,
    IdTest,
    OodTest,
}

impl SplitRole {
    pub const ALL: [SplitRole; 4] = [
        SplitRole::Train,
        SplitRole::IdVal,
        SplitRole::IdTest,
        SplitRole::OodTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::IdVal => "id_val",
            SplitRole::IdTest => "id_test",
            SplitRole::OodTest => "ood_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SplitRole::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl DatasetSplits {
    pub fn split(&self, role: SplitRole) -> &[Graph] {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::IdVal => &self.id_val,
            SplitRole::IdTest => &self.id_test,
            SplitRole::OodTest => &self.ood_test,
        }
    }

    pub fn split_mut(&mut self, role: SplitRole) -> &mut Vec<Graph> {
        match role {
            SplitRole::Train => &mut self.train,
            SplitRole::IdVal => &mut self.id_val,
            SplitRole::IdTest => &mut self.id_test,
            SplitRole::OodTest => &mut self.ood_test,
        }
    }

    pub fn feature_dim(&self) -> usize {
        SplitRole::ALL
            .iter()
            .flat_map(|&r| self.split(r).first())
            .map(Graph::feature_dim)
            .next()
            .unwrap_or(0)
    }

    pub fn sizes(&self) -> [usize; 4] {
        SplitRole::ALL.map(|r| self.split(r).len())
    }

    /// Checks the cross-graph invariants: shared feature dimension, labels
    /// within `num_classes`, labels matching the task kind.
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        for role in SplitRole::ALL {
            for g in self.split(role) {
                g.validate()?;
                if g.feature_dim() != d {
                    return Err(Error::input(format!(
                        "graph {} has feature dim {} but dataset has {d}",
                        g.id,
                        g.feature_dim()
                    )));
                }
                if g.task() != self.task {
                    return Err(Error::input(format!("graph {} does not match the task kind", g.id)));
                }
                let max_label = match &g.labels {
                    Labels::Graph(y) => *y,
                    Labels::Nodes(y) => y.iter().copied().max().unwrap_or(0),
                };
                if max_label >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: max_label,
                        classes: self.num_classes,
                    });
                }
            }
        }
        Ok(())
    }

    /// Labels seen in the training split, counted per class.
    pub fn train_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.train {
            match &g.labels {
                Labels::Graph(y) => counts[*y] += 1,
                Labels::Nodes(y) => {
                    for i in g.active_nodes() {
                        counts[y[i]] += 1;
                    }
                }
            }
        }
        counts
    }
}

/// Configuration for the synthetic generators.
///
/// The last feature column is the spurious channel: its value encodes a
/// class that agrees with the true label with probability
/// `spurious_feature_strength` (train/ID) or `ood_spurious_strength` (OOD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub task: TaskKind,
    pub shift: ShiftKind,
    pub num_graphs: usize,
    #[serde(default = "default_bases")]
    pub base_structures: Vec<BaseStructure>,
    #[serde(default = "default_motifs")]
    pub motifs: Vec<Motif>,
    pub size_range: [usize; 2],
    pub feature_dim: usize,
    pub spurious_feature_strength: f64,
    pub ood_spurious_strength: f64,
    pub seed: u64,
    #[serde(default)]
    pub sbm: SbmConfig,
}

fn default_bases() -> Vec<BaseStructure> {
    vec![
        BaseStructure::Path,
        BaseStructure::Cycle,
        BaseStructure::Tree,
        BaseStructure::Ladder,
    ]
}

fn default_motifs() -> Vec<Motif> {
    vec![Motif::House, Motif::Triangle, Motif::Clique4]
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("spurious_feature_strength", self.spurious_feature_strength),
            ("ood_spurious_strength", self.ood_spurious_strength),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(format!("{name} must lie in [0,1], got {s}")));
            }
        }
        if self.feature_dim < 2 {
            return Err(Error::config(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.task == TaskKind::GraphClassification {
            if self.motifs.len() < 2 {
                return Err(Error::config(
                    "at least two motifs are needed for a classification task",
                ));
            }
            if self.base_structures.is_empty() {
                return Err(Error::config("base_structures is empty"));
            }
            let largest = self.motifs.iter().map(|m| m.size()).max().unwrap_or(0);
            let [lo, hi] = self.size_range;
            if lo < largest + 2 {
                return Err(Error::config(format!(
                    "size_range minimum {lo} is below largest motif size {largest} + 2"
                )));
            }
            if hi < lo {
                return Err(Error::config(format!("size_range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_rejects_non_square_adjacency() {
        let x = Matrix::zeros(3, 2);
        let adj = Matrix::zeros(3, 2);
        assert!(Graph::new("g", x, adj, Labels::Graph(0)).is_err());
    }

    #[test]
    fn node_labels_must_cover_nodes() {
        let x = Matrix::zeros(3, 2);
        let adj = Matrix::zeros(3, 3);
        assert!(Graph::new("g", x, adj, Labels::Nodes(vec![0, 1])).is_err());
    }
}
