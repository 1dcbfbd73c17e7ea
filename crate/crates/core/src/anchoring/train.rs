use rand::Rng;
use serde::{Deserialize, Serialize};

use super::source::{fit_node_feature_gaussian, sample_training_anchors, shuffle_anchor_batch, AnchorSource};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Matrix, Params, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{DatasetSplits, Graph, Labels};
use crate::model::{
    backbone_digest, init_head, init_params, is_backbone_param, is_head_param, AnchorVariant, Forward, Model, ModelSpec,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Gaussian source fitted for node-feature anchoring (no inference
    /// anchors drawn yet).
    pub anchor_source: Option<AnchorSource>,
    /// Mean batch loss per optimizer step.
    pub step_losses: Vec<f64>,
}

/// Rows of `logits` that carry a loss, with their labels.
pub fn supervised_rows(g: &Graph) -> (Vec<usize>, Vec<usize>) {
    match &g.labels {
        Labels::Graph(y) => (vec![0], vec![*y]),
        Labels::Nodes(y) => {
            let rows = g.active_nodes();
            let labels = rows.iter().map(|&i| y[i]).collect();
            (rows, labels)
        }
    }
}

fn check_splits(spec: &ModelSpec, splits: &DatasetSplits) -> Result<()> {
    spec.validate()?;
    if spec.task != splits.task {
        return Err(Error::config("model task does not match the dataset task"));
    }
    if spec.num_classes != splits.num_classes {
        return Err(Error::config(format!(
            "model has {} classes but the dataset has {}",
            spec.num_classes, splits.num_classes
        )));
    }
    if splits.train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    for g in &splits.train {
        spec.check_graph(g)?;
    }
    Ok(())
}

/// Logits of one batch with freshly drawn training anchors, plus labels.
fn batch_forward(
    f: &Forward<'_>,
    tape: &Tape,
    spec: &ModelSpec,
    batch: &[&Graph],
    gaussian: Option<&AnchorSource>,
    anchor_rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let mut outputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::new();
    let mut push = |logits: Tensor, g: &Graph| -> Result<()> {
        let (rows, y) = supervised_rows(g);
        outputs.push(
            if rows.len() == logits.rows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
                logits
            } else {
                tape.select_rows(logits, &rows)?
            },
        );
        labels.extend(y);
        Ok(())
    };
    match spec.anchoring.variant {
        AnchorVariant::None | AnchorVariant::NodeFeature => {
            for g in batch {
                let prop = f.propagation(g);
                let rep = f.prefix(g, prop)?;
                let anchor = match gaussian {
                    Some(src) => Some(sample_training_anchors(src, g.num_nodes(), anchor_rng)?),
                    None => None,
                };
                push(f.suffix(prop, rep, anchor.as_ref())?, g)?;
            }
        }
        AnchorVariant::HiddenLayer(_) => {
            let mut props = Vec::with_capacity(batch.len());
            let mut reps = Vec::with_capacity(batch.len());
            for g in batch {
                let prop = f.propagation(g);
                reps.push(f.prefix(g, prop)?);
                props.push(prop);
            }
            let values: Vec<Matrix> = reps.iter().map(|&r| tape.value(r)).collect();
            let stacked = Matrix::vstack(&values.iter().collect::<Vec<_>>())?;
            let shuffled = shuffle_anchor_batch(&stacked, anchor_rng);
            let mut start = 0;
            for ((g, &prop), &rep) in batch.iter().zip(&props).zip(&reps) {
                let end = start + rep.rows();
                let anchor = shuffled.slice_rows(start, end);
                start = end;
                push(f.suffix(prop, rep, Some(&anchor))?, g)?;
            }
        }
        AnchorVariant::Readout => {
            let mut pooled = Vec::with_capacity(batch.len());
            for g in batch {
                let prop = f.propagation(g);
                pooled.push(f.prefix(g, prop)?);
            }
            let stacked = tape.concat_rows(&pooled)?;
            let anchors = shuffle_anchor_batch(&tape.value(stacked), anchor_rng);
            let logits = f.head(f.anchor_concat(stacked, &anchors, false)?)?;
            for (r, g) in batch.iter().enumerate() {
                push(tape.select_rows(logits, &[r])?, g)?;
            }
        }
    }
    let logits = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_rows(&outputs)?
    };
    Ok((logits, labels))
}

/// Trains a model from scratch, or (with `pretrained_frozen_backbone`) a
/// vanilla backbone followed by an anchored head on the frozen backbone.
///
/// Batch order and training anchors use separate streams derived from
/// `cfg.seed`, so an unanchored run draws exactly the batch order of a plain
/// training loop.
pub fn train(spec: &ModelSpec, splits: &DatasetSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_splits(spec, splits)?;
    if spec.anchoring.pretrained_frozen_backbone {
        let pre = train(&spec.unanchored(), splits, cfg)?;
        let mut out = train_head(spec, &pre.model.params, splits, cfg)?;
        let mut losses = pre.step_losses;
        losses.extend(out.step_losses);
        out.step_losses = losses;
        return Ok(out);
    }

    let gaussian = match spec.anchoring.variant {
        AnchorVariant::NodeFeature => Some(fit_node_feature_gaussian(&splits.train)?),
        _ => None,
    };
    let mut params = init_params(spec, cfg.seed)?;
    let adam = cfg.adam();
    let mut state = AdamState::new();
    let mut order_rng = rng::stream(cfg.seed, "train-order");
    let mut anchor_rng = rng::stream(cfg.seed, "train-anchors");
    let mut losses = Vec::new();

    for _ in 0..cfg.epochs {
        let order = rng::permutation(splits.train.len(), &mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Graph> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let tape = Tape::new();
            let bound = params.bind(&tape, |_| true);
            let f = Forward::new(spec, &tape, &bound);
            let (logits, labels) = batch_forward(&f, &tape, spec, &batch, gaussian.as_ref(), &mut anchor_rng)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            losses.push(tape.value(loss).item());
            let grads = bound.collect_grads(&tape.backward(loss)?);
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
    }
    check_finite(&losses)?;
    Ok(TrainOutcome {
        model: Model::new(*spec, params),
        anchor_source: gaussian,
        step_losses: losses,
    })
}

fn check_finite(losses: &[f64]) -> Result<()> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(Error::Divergence(format!("non-finite training loss at step {}", i + 1))),
        None => Ok(()),
    }
}

/// Trains a freshly initialized readout-anchored head on top of the frozen
/// backbone in `backbone`. Pooled representations are computed once; the
/// backbone never enters the optimizer.
pub fn train_head(
    spec: &ModelSpec,
    backbone: &Params,
    splits: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_splits(spec, splits)?;
    if spec.anchoring.variant != AnchorVariant::Readout || !spec.anchoring.pretrained_frozen_backbone {
        return Err(Error::config(
            "head-only training needs readout anchoring with a frozen backbone",
        ));
    }
    let frozen = backbone.filter(is_backbone_param);
    let digest = backbone_digest(&frozen);
    let encoder = Model::new(*spec, frozen.clone());
    let pooled: Vec<Matrix> = splits
        .train
        .iter()
        .map(|g| encoder.representation(g))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = splits
        .train
        .iter()
        .map(|g| {
            g.graph_label()
                .ok_or_else(|| Error::input("readout anchoring needs graph labels"))
        })
        .collect::<Result<_>>()?;

    let mut head = init_head(spec, &mut rng::stream(cfg.seed, "head-init"));
    let adam = cfg.adam();
    let mut state = AdamState::new();
    let mut order_rng = rng::stream(cfg.seed, "train-order");
    let mut anchor_rng = rng::stream(cfg.seed, "train-anchors");
    let mut losses = Vec::new();

    for _ in 0..cfg.epochs {
        let order = rng::permutation(pooled.len(), &mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&Matrix> = chunk.iter().map(|&i| &pooled[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let g = Matrix::vstack(&rows)?;
            let anchors = shuffle_anchor_batch(&g, &mut anchor_rng);
            let tape = Tape::new();
            let bound = head.bind(&tape, |_| true);
            let f = Forward::new(spec, &tape, &bound);
            let z = f.anchor_concat(tape.constant(g), &anchors, false)?;
            let loss = tape.softmax_cross_entropy(f.head(z)?, &batch_labels)?;
            losses.push(tape.value(loss).item());
            let grads = bound.collect_grads(&tape.backward(loss)?);
            adam_step(&mut head, &grads, &mut state, &adam)?;
        }
    }
    check_finite(&losses)?;

    let mut params = frozen;
    for (k, v) in head.iter().filter(|(k, _)| is_head_param(k)) {
        params.insert(k, v.clone());
    }
    Ok(TrainOutcome {
        model: Model {
            spec: *spec,
            params,
            frozen_backbone: Some(digest),
        },
        anchor_source: None,
        step_losses: losses,
    })
}
