//! Two-block stochastic block model with class-conditional Gaussian features
//! for transductive node classification.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplits, GeneratorConfig, Graph, Labels, ShiftKind, TaskKind};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmConfig {
    pub num_nodes: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Class means on feature 0 are `-class_sep` and `+class_sep` (unit variance).
    pub class_sep: f64,
    pub ood_fraction: f64,
    /// Mean shift of feature 0 on OOD nodes under covariate shift, in units
    /// of the feature standard deviation.
    pub covariate_shift: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            num_nodes: 300,
            p_intra: 0.05,
            p_inter: 0.005,
            class_sep: 1.0,
            ood_fraction: 0.3,
            covariate_shift: 3.0,
        }
    }
}

/// Generates a node-classification dataset.
///
/// Every split role holds a copy of the same graph whose `mask` selects the
/// role's nodes.
pub fn gen_node_dataset(cfg: &GeneratorConfig) -> Result<DatasetSplits> {
    if cfg.task != TaskKind::NodeClassification {
        return Err(Error::config("gen_node_dataset requires task = node_classification"));
    }
    if cfg.feature_dim < 2 {
        return Err(Error::config(format!(
            "feature_dim must be at least 2, got {}",
            cfg.feature_dim
        )));
    }
    cfg.validate()?;
    let sbm = &cfg.sbm;
    if sbm.num_nodes < 10 {
        return Err(Error::config("sbm.num_nodes must be at least 10"));
    }
    for (name, p) in [
        ("sbm.p_intra", sbm.p_intra),
        ("sbm.p_inter", sbm.p_inter),
        ("sbm.ood_fraction", sbm.ood_fraction),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("{name} must lie in [0,1], got {p}")));
        }
    }
    if cfg.shift == ShiftKind::Size {
        return Err(Error::config("size shift is not defined for node classification"));
    }

    let n = sbm.num_nodes;
    let d = cfg.feature_dim;
    let mut rng = rng::stream(cfg.seed, "sbm");
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();

    let mut adj = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] {
                sbm.p_intra
            } else {
                sbm.p_inter
            };
            if rng.random::<f64>() < p {
                adj.set(i, j, 1.0);
                adj.set(j, i, 1.0);
            }
        }
    }

    let order = rng::permutation(n, &mut rng);
    let n_ood = ((n as f64) * sbm.ood_fraction).round() as usize;
    let (ood_nodes, id_nodes) = order.split_at(n_ood);
    let n_train = (id_nodes.len() as f64 * 0.6).round() as usize;
    let n_val = (id_nodes.len() as f64 * 0.2).round() as usize;
    let mut train = id_nodes[..n_train].to_vec();
    let mut val = id_nodes[n_train..n_train + n_val].to_vec();
    let mut test = id_nodes[n_train + n_val..].to_vec();
    let mut ood = ood_nodes.to_vec();
    for m in [&mut train, &mut val, &mut test, &mut ood] {
        m.sort_unstable();
    }
    let mut is_ood = vec![false; n];
    for &i in &ood {
        is_ood[i] = true;
    }

    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let y = labels[i];
        let mean = if y == 1 { sbm.class_sep } else { -sbm.class_sep };
        let shift = if is_ood[i] && cfg.shift == ShiftKind::Covariate {
            sbm.covariate_shift
        } else {
            0.0
        };
        let z: f64 = StandardNormal.sample(&mut rng);
        x.set(i, 0, mean + shift + z);
        for c in 1..d - 1 {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.set(i, c, z);
        }
        let strength = if is_ood[i] && cfg.shift == ShiftKind::Concept {
            cfg.ood_spurious_strength
        } else {
            cfg.spurious_feature_strength
        };
        let agree = rng.random::<f64>() < strength;
        x.set(i, d - 1, if agree { y as f64 } else { (1 - y) as f64 });
    }

    let base = Graph::new("sbm", x, adj, Labels::Nodes(labels))?;
    let copy = |mask: Vec<usize>| Graph {
        mask: Some(mask),
        ..base.clone()
    };
    Ok(DatasetSplits {
        train: vec![copy(train)],
        id_val: vec![copy(val)],
        id_test: vec![copy(test)],
        ood_test: vec![copy(ood)],
        shift: cfg.shift,
        num_classes: 2,
        task: TaskKind::NodeClassification,
    })
}
