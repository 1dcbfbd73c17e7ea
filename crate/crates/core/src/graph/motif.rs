//! Motif classification benchmark: a base structure with one attached motif,
//! labelled by the motif.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{split, DatasetSplits, GeneratorConfig, Graph, Labels, ShiftKind, TaskKind};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Standard deviation of the noise channels.
const NOISE_STD: f64 = 0.1;
/// Fraction of generated graphs reserved for the OOD split under concept shift.
const CONCEPT_OOD_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseStructure {
    Path,
    Cycle,
    Tree,
    Ladder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    House,
    Triangle,
    Clique4,
    Star,
}

impl Motif {
    pub fn size(self) -> usize {
        match self {
            Motif::House => 5,
            Motif::Triangle => 3,
            Motif::Clique4 => 4,
            Motif::Star => 5,
        }
    }

    fn edges(self) -> Vec<(usize, usize)> {
        match self {
            Motif::House => vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
            Motif::Triangle => vec![(0, 1), (1, 2), (2, 0)],
            Motif::Clique4 => vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
            Motif::Star => vec![(0, 1), (0, 2), (0, 3), (0, 4)],
        }
    }
}

fn base_edges(kind: BaseStructure, n: usize, rng: &mut StreamRng) -> Vec<(usize, usize)> {
    match kind {
        BaseStructure::Path => (1..n).map(|i| (i - 1, i)).collect(),
        BaseStructure::Cycle => {
            let mut e: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
            if n > 2 {
                e.push((n - 1, 0));
            }
            e
        }
        // random recursive tree
        BaseStructure::Tree => (1..n).map(|i| (rng.random_range(0..i), i)).collect(),
        BaseStructure::Ladder => {
            // two rails of `half` nodes; an odd leftover node hangs off the end
            let half = n / 2;
            let mut e = Vec::new();
            for i in 0..half {
                e.push((i, i + half));
                if i + 1 < half {
                    e.push((i, i + 1));
                    e.push((i + half, i + 1 + half));
                }
            }
            if n % 2 == 1 {
                e.push((2 * half - 1, n - 1));
            }
            e
        }
    }
}

/// Class index encoded by the spurious channel: agrees with `label` with
/// probability `strength`, otherwise a uniformly chosen different class.
fn spurious_class(label: usize, q: usize, strength: f64, rng: &mut StreamRng) -> usize {
    if rng.random::<f64>() < strength {
        label
    } else {
        let other = rng.random_range(0..q - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    }
}

pub(crate) fn spurious_value(class: usize, q: usize) -> f64 {
    class as f64 / (q - 1) as f64
}

/// Class index encoded by a spurious-channel value.
pub fn decode_spurious(value: f64, q: usize) -> usize {
    (value * (q - 1) as f64).round() as usize
}

struct Draw {
    base: BaseStructure,
    label: usize,
    strength: f64,
}

fn build_graph(cfg: &GeneratorConfig, idx: usize, draw: &Draw, rng: &mut StreamRng) -> Result<Graph> {
    let q = cfg.motifs.len();
    let motif = cfg.motifs[draw.label];
    let [lo, hi] = cfg.size_range;
    let total = rng.random_range(lo..=hi);
    let base_n = total - motif.size();
    let n = base_n + motif.size();

    let mut adj = Matrix::zeros(n, n);
    let mut link = |a: usize, b: usize| {
        adj.set(a, b, 1.0);
        adj.set(b, a, 1.0);
    };
    for (a, b) in base_edges(draw.base, base_n, rng) {
        link(a, b);
    }
    for (a, b) in motif.edges() {
        link(base_n + a, base_n + b);
    }
    let anchor = rng.random_range(0..base_n);
    link(anchor, base_n);

    let d = cfg.feature_dim;
    let spur = spurious_value(spurious_class(draw.label, q, draw.strength, rng), q);
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        x.set(i, 0, 1.0);
        for c in 1..d - 1 {
            let z: f64 = StandardNormal.sample(rng);
            x.set(i, c, NOISE_STD * z);
        }
        x.set(i, d - 1, spur);
    }
    Graph::new(format!("g{idx}"), x, adj, Labels::Graph(draw.label))
}

/// Generates a motif-classification dataset with the configured shift.
///
/// - `covariate`: the last listed base structure only appears in `ood_test`.
/// - `concept`: a held-out fifth of the graphs uses `ood_spurious_strength`.
/// - `size`: splits by node count (see [`make_size_shift_splits`](super::make_size_shift_splits)).
/// - `none`: i.i.d. 60/15/15/10 split.
pub fn gen_motif_dataset(cfg: &GeneratorConfig) -> Result<DatasetSplits> {
    if cfg.task != TaskKind::GraphClassification {
        return Err(Error::config("gen_motif_dataset requires task = graph_classification"));
    }
    cfg.validate()?;
    if cfg.shift == ShiftKind::Covariate && cfg.base_structures.len() < 2 {
        return Err(Error::config(
            "covariate shift holds out one base structure; at least two are required",
        ));
    }
    let q = cfg.motifs.len();
    let n = cfg.num_graphs;
    if n < q {
        return Err(Error::config(format!("num_graphs {n} is below the class count {q}")));
    }

    let mut rng = rng::stream(cfg.seed, "motif");
    let n_ood_concept = ((n as f64) * CONCEPT_OOD_FRACTION).round() as usize;
    // balanced labels, shuffled
    let mut labels: Vec<usize> = (0..n).map(|i| i % q).collect();
    rng::fisher_yates(&mut labels, &mut rng);

    let mut graphs = Vec::with_capacity(n);
    let mut is_ood = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let base = cfg.base_structures[rng.random_range(0..cfg.base_structures.len())];
        let concept_ood = cfg.shift == ShiftKind::Concept && i >= n - n_ood_concept;
        let strength = if concept_ood {
            cfg.ood_spurious_strength
        } else {
            cfg.spurious_feature_strength
        };
        let draw = Draw { base, label, strength };
        graphs.push(build_graph(cfg, i, &draw, &mut rng)?);
        let held_out = *cfg.base_structures.last().expect("validated nonempty");
        is_ood.push(match cfg.shift {
            ShiftKind::Covariate => base == held_out,
            ShiftKind::Concept => concept_ood,
            ShiftKind::None | ShiftKind::Size => false,
        });
    }

    let splits = match cfg.shift {
        ShiftKind::Size => split::make_size_shift_splits(graphs, 0.5, 0.9, cfg.seed)?,
        ShiftKind::None => {
            let [a, b, c, d] = split::partition(graphs, &[0.6, 0.15, 0.15, 0.1], &mut rng);
            split::assemble(a, b, c, d, ShiftKind::None)
        }
        ShiftKind::Covariate | ShiftKind::Concept => {
            let (ood, id): (Vec<_>, Vec<_>) = graphs.into_iter().zip(is_ood).partition(|(_, o)| *o);
            let id: Vec<Graph> = id.into_iter().map(|(g, _)| g).collect();
            let ood: Vec<Graph> = ood.into_iter().map(|(g, _)| g).collect();
            let [a, b, c] = split::partition(id, &[0.7, 0.15, 0.15], &mut rng);
            split::assemble(a, b, c, ood, cfg.shift)
        }
    };
    let splits = DatasetSplits {
        num_classes: q,
        ..splits
    };
    if splits.train.is_empty() {
        return Err(Error::config("generated training split is empty"));
    }
    if splits.ood_test.is_empty() {
        return Err(Error::config("generated ood_test split is empty"));
    }
    if let Some(missing) = splits.train_class_counts().iter().position(|&c| c == 0) {
        return Err(Error::config(format!(
            "class {missing} is absent from the training split"
        )));
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SbmConfig;

    pub(crate) fn cfg(shift: ShiftKind) -> GeneratorConfig {
        GeneratorConfig {
            task: TaskKind::GraphClassification,
            shift,
            num_graphs: 200,
            base_structures: vec![
                BaseStructure::Path,
                BaseStructure::Cycle,
                BaseStructure::Tree,
                BaseStructure::Ladder,
            ],
            motifs: vec![Motif::House, Motif::Triangle],
            size_range: [8, 20],
            feature_dim: 3,
            spurious_feature_strength: 0.9,
            ood_spurious_strength: 0.1,
            seed: 11,
            sbm: SbmConfig::default(),
        }
    }

    #[test]
    fn single_motif_is_rejected() {
        let mut c = cfg(ShiftKind::Concept);
        c.motifs = vec![Motif::House];
        assert!(gen_motif_dataset(&c).is_err());
    }

    #[test]
    fn covariate_with_one_base_is_rejected() {
        let mut c = cfg(ShiftKind::Covariate);
        c.base_structures = vec![BaseStructure::Cycle];
        assert!(gen_motif_dataset(&c).is_err());
    }

    #[test]
    fn min_nodes_must_fit_motif() {
        let mut c = cfg(ShiftKind::None);
        c.size_range = [6, 10];
        assert!(gen_motif_dataset(&c).is_err());
    }

    #[test]
    fn graphs_are_symmetric_and_connected_to_motif() {
        let s = gen_motif_dataset(&cfg(ShiftKind::None)).unwrap();
        for g in s.train.iter().chain(&s.ood_test) {
            assert!(g.is_symmetric());
            let n = g.num_nodes();
            assert!((8..=20).contains(&n));
            for i in 0..n {
                assert_eq!(g.adj.get(i, i), 0.0);
            }
        }
    }

    #[test]
    fn covariate_holds_out_last_base() {
        let s = gen_motif_dataset(&cfg(ShiftKind::Covariate)).unwrap();
        assert!(!s.ood_test.is_empty());
        assert!(s.train_class_counts().iter().all(|&c| c > 0));
    }

    #[test]
    fn spurious_value_roundtrips() {
        for q in 2..6 {
            for c in 0..q {
                assert_eq!(decode_spurious(spurious_value(c, q), q), c);
            }
        }
    }

    #[test]
    fn ladder_edges_are_in_range() {
        let mut rng = rng::stream(0, "t");
        for n in 2..12 {
            for (a, b) in base_edges(BaseStructure::Ladder, n, &mut rng) {
                assert!(a < n && b < n && a != b);
            }
        }
    }
}
