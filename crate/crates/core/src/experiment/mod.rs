//! Experiment driver behind the `gduq` binary: dataset generation,
//! per-`(method, seed)` training into checkpoints, evaluation reports and
//! the anchoring-layer sweep.
//!
//! Each cell derives its training seed from `(method, seed)` alone, so
//! cells can run on any number of worker threads and the output is the
//! same as a serial run.

mod checkpoint;
mod config;
mod report;

pub use checkpoint::{
    cell_dir, load_cell, load_checkpoint, save_cell, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use config::{DatasetSection, EvalSection, ExperimentConfig, Method, ModelSection, TrainSection};
pub use report::{
    read_csv, summarize, validate_report, write_csv_rows, CellSeeds, CsvRow, MeanStd, Report, ReportHeader, ReportRow,
    SummaryRow, CSV_COLUMNS, REPORT_SPLITS, REPORT_VERSION,
};

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchoring::{self, build_frozen_anchor_set, infer, AnchorSource};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::graph::{gen_motif_dataset, gen_node_dataset, load_dataset, save_dataset, DatasetSplits, Graph, TaskKind};
use crate::metrics::{self, PredictionRecord};
use crate::model::AnchorVariant;
use crate::posthoc::Scaler;
use crate::rng;

/// Floor applied to probabilities before taking logs for post-hoc fitting.
const PROB_FLOOR: f64 = 1e-300;

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Runs `f` over `items` on `jobs` worker threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Generates the dataset described by `cfg` and writes it to `out`.
pub fn generate(cfg: &ExperimentConfig) -> Result<DatasetSplits> {
    let g = cfg.generator()?;
    match g.task {
        TaskKind::GraphClassification => gen_motif_dataset(g),
        TaskKind::NodeClassification => gen_node_dataset(g),
    }
}

pub fn cmd_gen(config_path: &Path, out_path: &Path) -> Result<DatasetSplits> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = generate(&cfg)?;
    save_dataset(&data, out_path)?;
    Ok(data)
}

/// Loads a dataset file, reporting an unreadable path as a data error.
pub fn load_data(path: &Path) -> Result<DatasetSplits> {
    if !path.is_file() {
        return Err(Error::input(format!("cannot read dataset {}", path.display())));
    }
    load_dataset(path)
}

/// Training seeds of the members of `(method, seed)`.
pub fn member_seeds(method: Method, seed: u64) -> Vec<u64> {
    let cell = rng::stream_id(seed, &method.to_string());
    match method {
        Method::DeepEnsemble(m) => (0..m).map(|i| rng::stream_id(cell, &format!("member-{i}"))).collect(),
        _ => vec![cell],
    }
}

/// Trains every member of one cell and prepares its inference anchors.
pub fn train_cell(cfg: &ExperimentConfig, data: &DatasetSplits, method: Method, seed: u64) -> Result<Vec<Checkpoint>> {
    let spec = cfg.model_spec(method, data)?;
    member_seeds(method, seed)
        .into_iter()
        .enumerate()
        .map(|(member, train_seed)| {
            if method.members() > 1 {
                log::info!("training {method} seed {seed} member {member}");
            } else {
                log::info!("training {method} seed {seed}");
            }
            let out = anchoring::train(&spec, data, &cfg.train_config(train_seed))?;
            let anchor_source = match spec.anchoring.variant {
                AnchorVariant::None => None,
                AnchorVariant::NodeFeature => {
                    let src = out
                        .anchor_source
                        .ok_or_else(|| Error::input("node-feature training produced no anchor distribution"))?
                        .with_inference_anchors(cfg.eval.k, train_seed)?;
                    Some(match src {
                        AnchorSource::Gaussian {
                            mean,
                            std,
                            inference,
                            rng_seed,
                            ..
                        } => AnchorSource::Gaussian {
                            mean,
                            std,
                            inference,
                            rng_seed,
                            per_node_inference: cfg.eval.per_node_inference_draws,
                        },
                        other => other,
                    })
                }
                AnchorVariant::HiddenLayer(_) | AnchorVariant::Readout => Some(build_frozen_anchor_set(
                    &out.model,
                    &data.id_val,
                    cfg.eval.k,
                    &mut rng::stream(train_seed, "frozen-anchors"),
                )?),
            };
            Ok(Checkpoint {
                method,
                seed,
                train_seed,
                model: out.model,
                anchor_source,
            })
        })
        .collect()
}

fn cells(cfg: &ExperimentConfig) -> Vec<(Method, u64)> {
    cfg.methods
        .iter()
        .flat_map(|&m| cfg.train.seeds.iter().map(move |&s| (m, s)))
        .collect()
}

/// Trains all `(method, seed)` cells and writes their checkpoints.
pub fn train_all(cfg: &ExperimentConfig, data: &DatasetSplits, out_dir: &Path, jobs: usize) -> Result<Vec<PathBuf>> {
    let cells = cells(cfg);
    let trained = parallel_map(jobs, &cells, |&(m, s)| train_cell(cfg, data, m, s))?;
    trained.iter().map(|members| save_cell(out_dir, members)).collect()
}

pub fn cmd_train(config_path: &Path, dataset_path: &Path, out_dir: &Path, jobs: usize) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = load_data(dataset_path)?;
    train_all(&cfg, &data, out_dir, jobs)
}

/// Predictive distributions and labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPredictions {
    pub probs: Matrix,
    pub labels: Vec<usize>,
}

/// Mean over members of each member's predictive distribution: `mu_calib`
/// for anchored members, plain softmax otherwise.
pub fn predict_split(members: &[Checkpoint], graphs: &[Graph], k: usize) -> Result<SplitPredictions> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for g in graphs {
        let (active, y) = anchoring::supervised_rows(g);
        let mut acc: Vec<Vec<f64>> = Vec::new();
        for c in members {
            let anchored = c.model.spec.anchoring.is_anchored();
            let preds = infer(&c.model, g, c.anchor_source.as_ref(), k)?;
            for (i, p) in preds.into_iter().enumerate() {
                let dist = if anchored { p.mu_calib } else { p.mu };
                match acc.get_mut(i) {
                    Some(sum) => sum.iter_mut().zip(&dist).for_each(|(s, v)| *s += v),
                    None => acc.push(dist),
                }
            }
        }
        let m = members.len() as f64;
        debug_assert_eq!(acc.len(), active.len());
        for mut row in acc {
            if members.len() > 1 {
                row.iter_mut().for_each(|v| *v /= m);
            }
            rows.push(row);
        }
        labels.extend(y);
    }
    if rows.is_empty() {
        return Err(Error::input("split has no labelled rows"));
    }
    Ok(SplitPredictions {
        probs: Matrix::from_rows(&rows)?,
        labels,
    })
}

fn log_probs(p: &Matrix) -> Matrix {
    p.map(|v| v.max(PROB_FLOOR).ln())
}

fn records(probs: &Matrix, labels: &[usize]) -> Result<Vec<PredictionRecord>> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| PredictionRecord::new(probs.row(r).to_vec(), y))
        .collect()
}

/// Metric rows of one cell for every post-hoc method and report split.
pub fn evaluate_cell(cfg: &ExperimentConfig, data: &DatasetSplits, members: &[Checkpoint]) -> Result<Vec<ReportRow>> {
    let first = members.first().ok_or_else(|| Error::input("cell has no members"))?;
    let (method, seed) = (first.method, first.seed);
    let k = cfg.eval.k;
    let val = predict_split(members, &data.id_val, k)?;
    let id = predict_split(members, &data.id_test, k)?;
    let ood = predict_split(members, &data.ood_test, k)?;

    let mut rows = Vec::new();
    for &kind in &cfg.posthoc {
        let scaler = Scaler::fit(kind, &log_probs(&val.probs), &val.labels)
            .map_err(|e| annotate(e, &format!("{method} seed {seed}: fitting {} scaling", kind.as_str())))?;
        let calibrated = |s: &SplitPredictions| -> Result<Vec<PredictionRecord>> {
            records(&scaler.apply(&log_probs(&s.probs))?, &s.labels)
        };
        let val_rec = calibrated(&val)?;
        let id_rec = calibrated(&id)?;
        let ood_rec = calibrated(&ood)?;
        let tau = metrics::tune_gep_threshold(&val_rec)?;
        let conf = |r: &[PredictionRecord]| r.iter().map(|x| x.confidence).collect::<Vec<_>>();
        let auroc = metrics::auroc(&conf(&id_rec), &conf(&ood_rec))?;
        for (split, recs) in REPORT_SPLITS.iter().zip([&id_rec, &ood_rec]) {
            let accuracy = metrics::accuracy(recs)?;
            rows.push(ReportRow {
                method,
                seed,
                posthoc: scaler.clone(),
                split: split.to_string(),
                accuracy,
                ece: metrics::ece(recs, cfg.eval.n_bins)?,
                auroc_ood: auroc,
                gep_error: metrics::gep_error(recs, accuracy, tau)?,
                n: recs.len(),
                n_bins: cfg.eval.n_bins,
                tau,
            });
        }
    }
    Ok(rows)
}

fn annotate(e: Error, context: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{context}: {m}")),
        Error::InvalidInput(m) => Error::InvalidInput(format!("{context}: {m}")),
        Error::Divergence(m) => Error::Divergence(format!("{context}: {m}")),
        other => other,
    }
}

/// Evaluates every configured cell from checkpoints under `ckpt_dir`.
pub fn evaluate_all(
    cfg: &ExperimentConfig,
    data: &DatasetSplits,
    ckpt_dir: &Path,
    jobs: usize,
    hashes: (String, String),
) -> Result<Report> {
    let cells = cells(cfg);
    // load everything up front so a missing artifact fails before any work
    let loaded: Vec<Vec<Checkpoint>> = cells
        .iter()
        .map(|&(m, s)| load_cell(ckpt_dir, m, s))
        .collect::<Result<_>>()?;
    let per_cell = parallel_map(jobs, &loaded, |members| evaluate_cell(cfg, data, members))?;
    let header = ReportHeader {
        command: "eval".into(),
        config_sha256: hashes.0,
        dataset_sha256: hashes.1,
        methods: cfg.methods.clone(),
        posthoc: cfg.posthoc.clone(),
        seeds: cfg.train.seeds.clone(),
        cells: loaded
            .iter()
            .zip(&cells)
            .map(|(members, &(method, seed))| CellSeeds {
                method,
                seed,
                member_seeds: members.iter().map(|c| c.train_seed).collect(),
            })
            .collect(),
        k: cfg.eval.k,
        n_bins: cfg.eval.n_bins,
        per_node_inference_draws: cfg.eval.per_node_inference_draws,
    };
    Ok(Report::new(header, per_cell.into_iter().flatten().collect()))
}

/// Writes `<out>` (JSON) and the same path with a `.csv` extension.
pub fn write_report(report: &Report, out_path: &Path) -> Result<PathBuf> {
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out_path, report.to_json()?)?;
    let csv_path = out_path.with_extension("csv");
    report.write_csv(fs::File::create(&csv_path)?)?;
    Ok(csv_path)
}

pub fn cmd_eval(
    config_path: &Path,
    dataset_path: &Path,
    ckpt_dir: &Path,
    out_path: &Path,
    jobs: usize,
) -> Result<Report> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = load_data(dataset_path)?;
    let hashes = (sha256_file(config_path)?, sha256_file(dataset_path)?);
    let report = evaluate_all(&cfg, &data, ckpt_dir, jobs, hashes)?;
    write_report(&report, out_path)?;
    Ok(report)
}

/// One line of the anchoring-layer sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    /// Anchored layer index, `readout`, or `none` for the vanilla model.
    pub anchor_layer: String,
    pub seed: u64,
    pub id_accuracy: f64,
    pub id_ece: f64,
    pub ood_accuracy: f64,
    pub ood_ece: f64,
}

/// Methods compared by the sweep: vanilla, every hidden layer, readout.
pub fn sweep_methods(num_mp_layers: usize) -> Vec<Method> {
    if num_mp_layers < 2 {
        log::warn!("with {num_mp_layers} message-passing layer(s) no hidden layer can be anchored; sweeping readout and vanilla only");
    }
    let mut out = vec![Method::Vanilla];
    out.extend((2..=num_mp_layers).map(Method::GduqHidden));
    out.push(Method::GduqReadout);
    out
}

pub fn sweep_anchor_layer(cfg: &ExperimentConfig, data: &DatasetSplits, jobs: usize) -> Result<Vec<SweepRow>> {
    let mut sweep_cfg = cfg.clone();
    sweep_cfg.methods = sweep_methods(cfg.model.num_mp_layers);
    sweep_cfg.posthoc = vec![crate::posthoc::PosthocKind::None];
    let cells = cells(&sweep_cfg);
    let rows = parallel_map(jobs, &cells, |&(method, seed)| {
        let members = train_cell(&sweep_cfg, data, method, seed)?;
        let rows = evaluate_cell(&sweep_cfg, data, &members)?;
        let pick = |split: &str| rows.iter().find(|r| r.split == split).expect("both splits evaluated");
        let (id, ood) = (pick("id_test"), pick("ood_test"));
        Ok(SweepRow {
            method: method.to_string(),
            anchor_layer: match method {
                Method::GduqHidden(r) => r.to_string(),
                Method::GduqReadout => "readout".into(),
                _ => "none".into(),
            },
            seed,
            id_accuracy: id.accuracy,
            id_ece: id.ece,
            ood_accuracy: ood.accuracy,
            ood_ece: ood.ece,
        })
    })?;
    Ok(rows)
}

pub fn cmd_sweep_anchor_layer(
    config_path: &Path,
    dataset_path: &Path,
    out_path: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = load_data(dataset_path)?;
    let rows = sweep_anchor_layer(&cfg, &data, jobs)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv_rows(&rows, fs::File::create(out_path)?)?;
    Ok(rows)
}
