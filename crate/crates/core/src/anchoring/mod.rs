//! Anchor distributions, anchored training and K-anchor inference.
//!
//! Training draws fresh anchors every batch: per-node Gaussian samples for
//! node-feature anchoring, a row shuffle of the batch representation for
//! hidden-layer and readout anchoring. Inference uses a fixed set of K
//! anchors and aggregates the K member predictions into an
//! [`EnsemblePrediction`].

mod aggregate;
mod source;
mod train;

pub use aggregate::{aggregate, EnsemblePrediction};
pub use source::{
    broadcast_inference_anchor, build_frozen_anchor_set, fit_node_feature_gaussian, sample_training_anchors,
    shuffle_anchor_batch, AnchorSource, STD_FLOOR,
};
pub use train::{supervised_rows, train, train_head, TrainConfig, TrainOutcome};

use crate::autodiff::{softmax, Matrix, Tape};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{AnchorVariant, Forward, Model};

/// Default number of inference anchors.
pub const DEFAULT_K: usize = 10;

/// Evaluates `graph` under the first `k` anchors of `src` and aggregates.
///
/// Returns one prediction per supervised row: a single one for graph tasks,
/// one per active node for node tasks. Unanchored models take `src = None`
/// and yield single-member predictions regardless of `k`.
pub fn infer(model: &Model, graph: &Graph, src: Option<&AnchorSource>, k: usize) -> Result<Vec<EnsemblePrediction>> {
    if k == 0 {
        return Err(Error::input("K must be at least 1"));
    }
    let spec = &model.spec;
    let (rows, _) = train::supervised_rows(graph);
    let tape = Tape::new();
    let bound = model.params.bind(&tape, |_| false);
    let f = Forward::new(spec, &tape, &bound);
    let prop = f.propagation(graph);
    let rep = f.prefix(graph, prop)?;

    let members: Vec<Matrix> = match (spec.anchoring.variant, src) {
        (AnchorVariant::None, _) => vec![softmax(&tape.value(f.suffix(prop, rep, None)?))],
        (_, None) => return Err(Error::input("anchored model needs an anchor source")),
        (variant, Some(src)) => {
            check_source(model, variant, src)?;
            if k > src.len() {
                return Err(Error::input(format!(
                    "K = {k} but only {} anchors are cached",
                    src.len()
                )));
            }
            (0..k)
                .map(|i| {
                    let anchor = src.inference_anchor(i, graph)?;
                    Ok(softmax(&tape.value(f.suffix(prop, rep, Some(&anchor))?)))
                })
                .collect::<Result<_>>()?
        }
    };

    rows.iter()
        .map(|&r| {
            let per_anchor: Vec<Vec<f64>> = members.iter().map(|m| m.row(r).to_vec()).collect();
            aggregate(Matrix::from_rows(&per_anchor)?)
        })
        .collect()
}

fn check_source(model: &Model, variant: AnchorVariant, src: &AnchorSource) -> Result<()> {
    match (variant, src) {
        (AnchorVariant::NodeFeature, AnchorSource::Gaussian { .. }) => Ok(()),
        (AnchorVariant::HiddenLayer(_) | AnchorVariant::Readout, AnchorSource::FrozenSet { backbone_digest, .. }) => {
            if *backbone_digest != model.backbone_digest() {
                Err(Error::FrozenBackbone(
                    "anchor set was computed under different backbone parameters".into(),
                ))
            } else {
                Ok(())
            }
        }
        _ => Err(Error::input("anchor source does not match the anchoring mode")),
    }
}
