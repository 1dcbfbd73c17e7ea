#![allow(dead_code)]

use gduq_core::autodiff::Matrix;
use gduq_core::graph::{
    gen_motif_dataset, BaseStructure, DatasetSplits, GeneratorConfig, Graph, Labels, Motif, SbmConfig, ShiftKind,
    TaskKind,
};
use gduq_core::model::{AnchorVariant, AnchoringMode, Backbone, ModelSpec};
use gduq_core::rng;
use rand::Rng;

pub fn motif_config(shift: ShiftKind, num_graphs: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        task: TaskKind::GraphClassification,
        shift,
        num_graphs,
        base_structures: vec![
            BaseStructure::Path,
            BaseStructure::Cycle,
            BaseStructure::Tree,
            BaseStructure::Ladder,
        ],
        motifs: vec![Motif::House, Motif::Triangle, Motif::Clique4],
        size_range: [8, 20],
        feature_dim: 4,
        spurious_feature_strength: 0.8,
        ood_spurious_strength: 0.2,
        seed,
        sbm: SbmConfig::default(),
    }
}

pub fn motif_dataset(num_graphs: usize, seed: u64) -> DatasetSplits {
    gen_motif_dataset(&motif_config(ShiftKind::Size, num_graphs, seed)).unwrap()
}

pub fn spec(backbone: Backbone, variant: AnchorVariant, splits: &DatasetSplits) -> ModelSpec {
    ModelSpec {
        backbone,
        num_mp_layers: 3,
        hidden_dim: 16,
        mlp_head_layers: 2,
        num_classes: splits.num_classes,
        task: splits.task,
        anchoring: AnchoringMode::new(variant),
        input_dim: splits.feature_dim(),
    }
}

pub fn random_graph(n: usize, d: usize, seed: u64) -> Graph {
    let mut r = rng::stream(seed, "random-graph");
    let mut adj = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            if r.random::<f64>() < 0.4 {
                adj.set(i, j, 1.0);
                adj.set(j, i, 1.0);
            }
        }
    }
    let x = Matrix::new(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    Graph::new(format!("r{seed}"), x, adj, Labels::Graph(0)).unwrap()
}

pub fn permute(g: &Graph, perm: &[usize]) -> Graph {
    let n = g.num_nodes();
    let mut adj = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            adj.set(i, j, g.adj.get(perm[i], perm[j]));
        }
    }
    Graph::new(g.id.clone(), g.x.select_rows(perm), adj, g.labels.clone()).unwrap()
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
