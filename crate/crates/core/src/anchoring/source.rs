use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, TaskKind};
use crate::model::{AnchorVariant, Model};
use crate::rng;

/// Lower bound applied to fitted per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Where anchors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnchorSource {
    /// Diagonal Gaussian over input node features, for node-feature anchoring.
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
        /// K cached inference draws (one row each); empty until drawn.
        inference: Vec<Vec<f64>>,
        /// Draw a fresh anchor per node at inference instead of broadcasting.
        #[serde(default)]
        per_node_inference: bool,
        rng_seed: u64,
    },
    /// K representation vectors taken once from validation graphs under a
    /// fixed backbone.
    FrozenSet {
        anchors: Vec<Vec<f64>>,
        /// `(graph id, node row)` each anchor came from; the row is `None`
        /// for pooled readout anchors.
        origin: Vec<(String, Option<usize>)>,
        backbone_digest: String,
        rng_seed: u64,
    },
}

impl AnchorSource {
    /// Number of inference anchors available.
    pub fn len(&self) -> usize {
        match self {
            AnchorSource::Gaussian { inference, .. } => inference.len(),
            AnchorSource::FrozenSet { anchors, .. } => anchors.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws and caches `k` inference anchors from a Gaussian source.
    /// Frozen sets are returned unchanged.
    pub fn with_inference_anchors(mut self, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::input("K must be at least 1"));
        }
        if let AnchorSource::Gaussian {
            mean,
            std,
            inference,
            rng_seed,
            ..
        } = &mut self
        {
            let mut r = rng::stream(seed, "nfa-inference");
            *inference = (0..k).map(|_| gaussian_row(mean, std, &mut r)).collect();
            *rng_seed = seed;
        }
        Ok(self)
    }

    /// Anchor used for inference member `k` on `graph`. Gaussian sources
    /// return an N x d matrix, frozen sets a single row that is broadcast.
    pub fn inference_anchor(&self, k: usize, graph: &Graph) -> Result<Matrix> {
        match self {
            AnchorSource::Gaussian {
                mean,
                std,
                per_node_inference: true,
                rng_seed,
                inference,
            } => {
                if k >= inference.len() {
                    return Err(index_error(k, inference.len()));
                }
                let mut r = rng::stream(*rng_seed, &format!("nfa-node-{k}-{}", graph.id));
                let n = graph.num_nodes();
                let data = (0..n).flat_map(|_| gaussian_row(mean, std, &mut r)).collect();
                Matrix::new(n, mean.len(), data)
            }
            AnchorSource::Gaussian { .. } => broadcast_inference_anchor(self, k, graph.num_nodes()),
            AnchorSource::FrozenSet { anchors, .. } => anchors
                .get(k)
                .map(|a| Matrix::row_vector(a.clone()))
                .ok_or_else(|| index_error(k, anchors.len())),
        }
    }
}

fn index_error(k: usize, len: usize) -> Error {
    Error::input(format!("anchor index {k} out of range for {len} cached anchors"))
}

fn gaussian_row(mean: &[f64], std: &[f64], r: &mut impl Rng) -> Vec<f64> {
    mean.iter()
        .zip(std)
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(r);
            m + s * z
        })
        .collect()
}

/// Per-dimension mean and sample standard deviation (divisor `n - 1`) of all
/// training node features, std clamped at [`STD_FLOOR`].
pub fn fit_node_feature_gaussian(train: &[Graph]) -> Result<AnchorSource> {
    if train.is_empty() {
        return Err(Error::input(
            "cannot fit an anchor distribution to an empty training set",
        ));
    }
    let d = train[0].feature_dim();
    let n: usize = train.iter().map(Graph::num_nodes).sum();
    if n < 2 {
        return Err(Error::input("fitting an anchor distribution needs at least two nodes"));
    }
    let mut mean = vec![0.0; d];
    for g in train {
        if g.feature_dim() != d {
            return Err(Error::shape("fit_node_feature_gaussian", (1, d), (1, g.feature_dim())));
        }
        for i in 0..g.num_nodes() {
            for (m, v) in mean.iter_mut().zip(g.x.row(i)) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for g in train {
        for i in 0..g.num_nodes() {
            for ((s, v), m) in var.iter_mut().zip(g.x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = var.iter().map(|s| (s / (n - 1) as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(AnchorSource::Gaussian {
        mean,
        std,
        inference: Vec::new(),
        per_node_inference: false,
        rng_seed: 0,
    })
}

/// `n` i.i.d. rows from a Gaussian source.
pub fn sample_training_anchors(src: &AnchorSource, n: usize, rng: &mut impl Rng) -> Result<Matrix> {
    let AnchorSource::Gaussian { mean, std, .. } = src else {
        return Err(Error::input(
            "training anchors can only be sampled from a Gaussian source",
        ));
    };
    if n == 0 {
        return Err(Error::input("cannot sample zero anchors"));
    }
    let data = (0..n).flat_map(|_| gaussian_row(mean, std, rng)).collect();
    Matrix::new(n, mean.len(), data)
}

/// The `k`-th cached inference anchor repeated over `n` rows.
pub fn broadcast_inference_anchor(src: &AnchorSource, k: usize, n: usize) -> Result<Matrix> {
    let AnchorSource::Gaussian { inference, .. } = src else {
        return Err(Error::input("broadcast anchors come from a Gaussian source"));
    };
    let c = inference.get(k).ok_or_else(|| index_error(k, inference.len()))?;
    if n == 0 {
        return Err(Error::input("cannot broadcast to zero rows"));
    }
    Matrix::row_vector(c.clone()).broadcast_rows(n)
}

/// Uniformly random row permutation (Fisher-Yates).
pub fn shuffle_anchor_batch(node_matrix: &Matrix, rng: &mut impl Rng) -> Matrix {
    let perm = rng::permutation(node_matrix.rows(), rng);
    node_matrix.select_rows(&perm)
}

/// Draws K distinct validation anchors under the model's current backbone.
///
/// Readout anchoring stores pooled graph representations. Hidden-layer
/// anchoring stores one seeded row of the layer `r - 1` node representation
/// of each drawn graph; for node tasks the K rows are drawn without
/// replacement from the active validation nodes instead.
pub fn build_frozen_anchor_set(model: &Model, id_val: &[Graph], k: usize, rng: &mut impl Rng) -> Result<AnchorSource> {
    let spec = &model.spec;
    if !matches!(
        spec.anchoring.variant,
        AnchorVariant::HiddenLayer(_) | AnchorVariant::Readout
    ) {
        return Err(Error::config(
            "frozen anchor sets need hidden-layer or readout anchoring",
        ));
    }
    if id_val.is_empty() {
        return Err(Error::input("id_val is empty"));
    }
    if k == 0 {
        return Err(Error::input("K must be at least 1"));
    }
    let digest = model.backbone_digest();
    if let Some(frozen) = &model.frozen_backbone {
        if *frozen != digest {
            return Err(Error::FrozenBackbone(
                "backbone parameters changed after freezing; anchors cannot be recomputed".into(),
            ));
        }
    }
    let seed: u64 = rng.random();

    let mut anchors = Vec::with_capacity(k);
    let mut origin = Vec::with_capacity(k);
    if spec.task == TaskKind::NodeClassification && spec.anchoring.variant != AnchorVariant::Readout {
        let pool: Vec<(usize, usize)> = id_val
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| g.active_nodes().into_iter().map(move |i| (gi, i)))
            .collect();
        if k > pool.len() {
            return Err(Error::input(format!(
                "K = {k} exceeds the {} validation nodes available",
                pool.len()
            )));
        }
        let reps: Vec<Matrix> = id_val.iter().map(|g| model.representation(g)).collect::<Result<_>>()?;
        for idx in rng::sample_without_replacement(pool.len(), k, rng) {
            let (gi, row) = pool[idx];
            anchors.push(reps[gi].row(row).to_vec());
            origin.push((id_val[gi].id.clone(), Some(row)));
        }
    } else {
        if k > id_val.len() {
            return Err(Error::input(format!(
                "K = {k} exceeds the {} validation graphs available",
                id_val.len()
            )));
        }
        for idx in rng::sample_without_replacement(id_val.len(), k, rng) {
            let g = &id_val[idx];
            let rep = model.representation(g)?;
            if spec.anchoring.variant == AnchorVariant::Readout {
                anchors.push(rep.row(0).to_vec());
                origin.push((g.id.clone(), None));
            } else {
                let row = rng.random_range(0..rep.rows());
                anchors.push(rep.row(row).to_vec());
                origin.push((g.id.clone(), Some(row)));
            }
        }
    }
    Ok(AnchorSource::FrozenSet {
        anchors,
        origin,
        backbone_digest: digest,
        rng_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Labels;

    fn graph(rows: &[&[f64]]) -> Graph {
        let x = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let n = x.rows();
        Graph::new("g", x, Matrix::zeros(n, n), Labels::Graph(0)).unwrap()
    }

    #[test]
    fn constant_features_hit_the_floor() {
        let src = fit_node_feature_gaussian(&[graph(&[&[3.0], &[3.0], &[3.0]])]).unwrap();
        let AnchorSource::Gaussian { mean, std, .. } = &src else {
            unreachable!()
        };
        assert_eq!(mean, &[3.0]);
        assert_eq!(std, &[STD_FLOOR]);
        let mut r = rng::stream(0, "t");
        let c = sample_training_anchors(&src, 50, &mut r).unwrap();
        assert!(c.data().iter().all(|v| (v - 3.0).abs() < 1e-4));
    }

    #[test]
    fn two_point_sample_std() {
        let src = fit_node_feature_gaussian(&[graph(&[&[0.0]]), graph(&[&[2.0]])]).unwrap();
        let AnchorSource::Gaussian { mean, std, .. } = &src else {
            unreachable!()
        };
        assert_eq!(mean, &[1.0]);
        assert!((std[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fit_rejects_tiny_inputs() {
        assert!(fit_node_feature_gaussian(&[]).is_err());
        assert!(fit_node_feature_gaussian(&[graph(&[&[1.0]])]).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_law_of_large_numbers_holds() {
        let src = fit_node_feature_gaussian(&[graph(&[&[0.0, 10.0], &[2.0, 14.0], &[4.0, 12.0]])]).unwrap();
        let AnchorSource::Gaussian { mean, std, .. } = src.clone() else {
            unreachable!()
        };
        let a = sample_training_anchors(&src, 100_000, &mut rng::stream(3, "t")).unwrap();
        let b = sample_training_anchors(&src, 100_000, &mut rng::stream(3, "t")).unwrap();
        assert_eq!(a, b);
        for c in 0..2 {
            let m: f64 = (0..a.rows()).map(|r| a.get(r, c)).sum::<f64>() / a.rows() as f64;
            assert!((m - mean[c]).abs() < 3.0 * std[c] / (1e5f64).sqrt());
        }
        assert!(sample_training_anchors(&src, 0, &mut rng::stream(3, "t")).is_err());
    }

    #[test]
    fn broadcast_rows_match_cache() {
        let src = fit_node_feature_gaussian(&[graph(&[&[0.0, 1.0], &[2.0, 5.0]])])
            .unwrap()
            .with_inference_anchors(3, 9)
            .unwrap();
        let AnchorSource::Gaussian { inference, .. } = &src else {
            unreachable!()
        };
        assert_eq!(
            broadcast_inference_anchor(&src, 1, 1).unwrap().data(),
            &inference[1][..]
        );
        let m = broadcast_inference_anchor(&src, 2, 7).unwrap();
        for r in 1..7 {
            assert_eq!(m.row(r), m.row(0));
        }
        assert_ne!(
            broadcast_inference_anchor(&src, 0, 2).unwrap(),
            broadcast_inference_anchor(&src, 1, 2).unwrap()
        );
        assert!(broadcast_inference_anchor(&src, 3, 2).is_err());
    }

    #[test]
    fn shuffle_matches_reference_fisher_yates() {
        let m = Matrix::new(6, 2, (0..12).map(f64::from).collect()).unwrap();
        let got = shuffle_anchor_batch(&m, &mut rng::stream(5, "shuffle"));
        // reference: swap-based walk from the last index down
        let mut r = rng::stream(5, "shuffle");
        let mut idx: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            let j = r.random_range(0..=i);
            idx.swap(i, j);
        }
        assert_eq!(got, m.select_rows(&idx));

        let one = Matrix::row_vector(vec![1.0, 2.0]);
        assert_eq!(shuffle_anchor_batch(&one, &mut r), one);
    }

    #[test]
    fn source_serializes_with_kind_tag() {
        let src = fit_node_feature_gaussian(&[graph(&[&[0.0], &[1.0]])]).unwrap();
        let json = serde_json::to_string(&src).unwrap();
        assert!(json.starts_with(r#"{"kind":"gaussian""#));
        let back: AnchorSource = serde_json::from_str(&json).unwrap();
        assert_eq!(back, src);
    }
}
