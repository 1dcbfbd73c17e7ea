//! Fixtures shared by the benchmarks.

use gduq_core::autodiff::Matrix;
use gduq_core::graph::{gen_motif_dataset, DatasetSplits, GeneratorConfig, SbmConfig, ShiftKind, TaskKind};
use gduq_core::metrics::PredictionRecord;
use gduq_core::model::{AnchorVariant, AnchoringMode, Backbone, ModelSpec};
use gduq_core::rng;
use rand::Rng;

pub fn motif_dataset(num_graphs: usize) -> DatasetSplits {
    let cfg = GeneratorConfig {
        task: TaskKind::GraphClassification,
        shift: ShiftKind::Size,
        num_graphs,
        base_structures: vec![
            gduq_core::graph::BaseStructure::Path,
            gduq_core::graph::BaseStructure::Cycle,
            gduq_core::graph::BaseStructure::Tree,
            gduq_core::graph::BaseStructure::Ladder,
        ],
        motifs: vec![
            gduq_core::graph::Motif::House,
            gduq_core::graph::Motif::Triangle,
            gduq_core::graph::Motif::Clique4,
        ],
        size_range: [8, 20],
        feature_dim: 4,
        spurious_feature_strength: 0.8,
        ood_spurious_strength: 0.2,
        seed: 0,
        sbm: SbmConfig::default(),
    };
    gen_motif_dataset(&cfg).expect("valid generator config")
}

pub fn gin_spec(variant: AnchorVariant, data: &DatasetSplits) -> ModelSpec {
    ModelSpec {
        backbone: Backbone::Gin,
        num_mp_layers: 3,
        hidden_dim: 32,
        mlp_head_layers: 2,
        num_classes: data.num_classes,
        task: data.task,
        anchoring: AnchoringMode::new(variant),
        input_dim: data.feature_dim(),
    }
}

/// `rows x q` matrix of random probability rows.
pub fn random_probs(rows: usize, q: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, "bench-probs");
    let mut data = Vec::with_capacity(rows * q);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..q).map(|_| r.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Matrix::new(rows, q, data).expect("consistent shape")
}

pub fn random_records(n: usize, q: usize, seed: u64) -> Vec<PredictionRecord> {
    let p = random_probs(n, q, seed);
    let mut r = rng::stream(seed, "bench-labels");
    (0..n)
        .map(|i| PredictionRecord::new(p.row(i).to_vec(), r.random_range(0..q)).expect("valid record"))
        .collect()
}
