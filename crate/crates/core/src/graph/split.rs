use super::{DatasetSplits, Graph, ShiftKind, TaskKind};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Nearest-rank empirical quantile of an ascending slice: the element at
/// 1-based rank `ceil(q * n)`, clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[usize], q: f64) -> usize {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Size-shift protocol: train on graphs no larger than the `train_q` size
/// quantile, test OOD on graphs at least as large as the `test_q` quantile.
/// The graphs in between are shuffled with `seed` and halved into
/// `id_val` / `id_test`.
pub fn make_size_shift_splits(graphs: Vec<Graph>, train_q: f64, test_q: f64, seed: u64) -> Result<DatasetSplits> {
    if graphs.len() < 10 {
        return Err(Error::input(format!(
            "size-shift splitting needs at least 10 graphs, got {}",
            graphs.len()
        )));
    }
    if !(0.0 < train_q && train_q < test_q && test_q < 1.0) {
        return Err(Error::input(format!(
            "quantiles must satisfy 0 < train_q < test_q < 1, got {train_q} and {test_q}"
        )));
    }
    let task = graphs[0].task();
    if task != TaskKind::GraphClassification {
        return Err(Error::input("size-shift splits apply to graph classification"));
    }
    let mut sizes: Vec<usize> = graphs.iter().map(Graph::num_nodes).collect();
    sizes.sort_unstable();
    let lo = nearest_rank(&sizes, train_q);
    let hi = nearest_rank(&sizes, test_q);
    if lo >= hi {
        return Err(Error::input(format!(
            "train size threshold {lo} does not lie below the test threshold {hi}; \
             ood_test would overlap train"
        )));
    }

    let mut train = Vec::new();
    let mut ood = Vec::new();
    let mut rest = Vec::new();
    for g in graphs {
        let n = g.num_nodes();
        if n <= lo {
            train.push(g);
        } else if n >= hi {
            ood.push(g);
        } else {
            rest.push(g);
        }
    }
    if train.is_empty() || ood.is_empty() {
        return Err(Error::input("size-shift split left train or ood_test empty"));
    }
    let mut rng = rng::stream(seed, "size-split");
    rng::fisher_yates(&mut rest, &mut rng);
    let half = rest.len() / 2;
    let id_test = rest.split_off(half);
    let num_classes = train
        .iter()
        .chain(&ood)
        .chain(&rest)
        .chain(&id_test)
        .filter_map(Graph::graph_label)
        .max()
        .map_or(0, |m| m + 1);
    Ok(DatasetSplits {
        train,
        id_val: rest,
        id_test,
        ood_test: ood,
        shift: ShiftKind::Size,
        num_classes,
        task,
    })
}

/// Shuffles and cuts `items` into consecutive chunks with the given
/// fractions; rounding residue goes to the first chunk.
pub(crate) fn partition<const K: usize>(
    mut items: Vec<Graph>,
    fractions: &[f64; K],
    rng: &mut StreamRng,
) -> [Vec<Graph>; K] {
    rng::fisher_yates(&mut items, rng);
    let n = items.len();
    let mut counts = fractions.map(|f| (f * n as f64).floor() as usize);
    let assigned: usize = counts.iter().sum();
    counts[0] += n - assigned;
    let mut out: [Vec<Graph>; K] = std::array::from_fn(|_| Vec::new());
    let mut iter = items.into_iter();
    for (slot, &c) in out.iter_mut().zip(&counts) {
        slot.extend(iter.by_ref().take(c));
    }
    out
}

pub(crate) fn assemble(
    train: Vec<Graph>,
    id_val: Vec<Graph>,
    id_test: Vec<Graph>,
    ood_test: Vec<Graph>,
    shift: ShiftKind,
) -> DatasetSplits {
    DatasetSplits {
        train,
        id_val,
        id_test,
        ood_test,
        shift,
        num_classes: 0,
        task: TaskKind::GraphClassification,
    }
}
