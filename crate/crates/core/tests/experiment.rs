mod common;

use std::fs;
use std::path::Path;

use gduq_core::experiment::{
    cell_dir, evaluate_all, evaluate_cell, generate, load_cell, member_seeds, read_csv, save_cell, sweep_anchor_layer,
    train_all, train_cell, validate_report, write_report, CsvRow, ExperimentConfig, Method, SweepRow,
};
use gduq_core::graph::save_dataset;
use gduq_core::posthoc::PosthocKind;
use gduq_core::Error;

const CONFIG: &str = r#"
methods = ["vanilla", "gduq_nfa", "gduq_hidden:2", "gduq_readout", "gduq_readout_pretrained", "deep_ensemble:2"]
posthoc = ["none", "temperature", "vector"]

[dataset.generator]
task = "graph_classification"
shift = "size"
num_graphs = 90
size_range = [8, 18]
feature_dim = 4
spurious_feature_strength = 0.8
ood_spurious_strength = 0.2
seed = 7

[model]
backbone = "gin"
num_mp_layers = 2
hidden_dim = 8

[train]
epochs = 3
batch_size = 16
lr = 0.01
seeds = [0, 1]

[eval]
k = 4
n_bins = 10
"#;

fn config() -> ExperimentConfig {
    ExperimentConfig::from_toml(CONFIG).unwrap()
}

fn hashes() -> (String, String) {
    ("c".repeat(64), "d".repeat(64))
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = config();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn config_errors_name_the_field() {
    let broken = CONFIG.replace("hidden_dim = 8\n", "");
    let err = ExperimentConfig::from_toml(&broken).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("hidden_dim"), "{err}");

    let bad_type = CONFIG.replace("epochs = 3", "epochs = \"three\"");
    let err = ExperimentConfig::from_toml(&bad_type).unwrap_err();
    assert!(err.to_string().contains("train.epochs"), "{err}");

    let lone_member = CONFIG.replace("deep_ensemble:2", "deep_ensemble:1");
    assert!(matches!(
        ExperimentConfig::from_toml(&lone_member),
        Err(Error::Config(_))
    ));

    let no_seeds = CONFIG.replace("seeds = [0, 1]", "seeds = []");
    assert!(matches!(ExperimentConfig::from_toml(&no_seeds), Err(Error::Config(_))));
}

#[test]
fn generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_dataset(&generate(&cfg).unwrap(), &a).unwrap();
    save_dataset(&generate(&cfg).unwrap(), &b).unwrap();
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn member_seeds_depend_only_on_method_and_seed() {
    let a = member_seeds(Method::DeepEnsemble(3), 5);
    assert_eq!(a, member_seeds(Method::DeepEnsemble(3), 5));
    assert_eq!(a.len(), 3);
    assert_ne!(a[0], a[1]);
    assert_ne!(member_seeds(Method::Vanilla, 5), member_seeds(Method::GduqReadout, 5));
    assert_ne!(member_seeds(Method::Vanilla, 5), member_seeds(Method::Vanilla, 6));
}

fn same_params(a: &gduq_core::model::Model, b: &gduq_core::model::Model) -> bool {
    a.params
        .iter()
        .zip(b.params.iter())
        .all(|((na, ma), (nb, mb))| na == nb && ma == mb)
}

#[test]
fn checkpoints_round_trip() {
    let cfg = config();
    let data = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for method in [
        Method::GduqNfa,
        Method::GduqHidden(2),
        Method::GduqReadoutPretrained,
        Method::DeepEnsemble(2),
    ] {
        let members = train_cell(&cfg, &data, method, 3).unwrap();
        assert_eq!(members.len(), method.members());
        let path = save_cell(dir.path(), &members).unwrap();
        assert_eq!(path, cell_dir(dir.path(), method, 3));
        let back = load_cell(dir.path(), method, 3).unwrap();
        assert_eq!(back.len(), members.len());
        for (a, b) in members.iter().zip(&back) {
            assert_eq!(a.anchor_source, b.anchor_source);
            assert_eq!(a.model.frozen_backbone, b.model.frozen_backbone);
            assert_eq!(a.train_seed, b.train_seed);
            assert!(same_params(&a.model, &b.model));
        }
    }
}

#[test]
fn missing_checkpoint_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cell(dir.path(), Method::GduqReadout, 9).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)));
    let msg = err.to_string();
    assert!(msg.contains("gduq_readout") && msg.contains("seed 9"), "{msg}");
}

fn train_to(dir: &Path, cfg: &ExperimentConfig) {
    let data = generate(cfg).unwrap();
    train_all(cfg, &data, dir, 1).unwrap();
}

#[test]
fn report_is_complete_valid_and_deterministic() {
    let cfg = config();
    let data = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train_to(dir.path(), &cfg);

    let serial = evaluate_all(&cfg, &data, dir.path(), 1, hashes()).unwrap();
    let parallel = evaluate_all(&cfg, &data, dir.path(), 4, hashes()).unwrap();
    let text = serial.to_json().unwrap();
    assert_eq!(text, parallel.to_json().unwrap());

    let expected = cfg.methods.len() * cfg.train.seeds.len() * cfg.posthoc.len() * 2;
    assert_eq!(serial.rows.len(), expected);
    assert_eq!(validate_report(&text).unwrap(), serial);
    assert_eq!(serial.header.cells.len(), cfg.methods.len() * cfg.train.seeds.len());

    // CSV parses back to the same numbers
    let out = dir.path().join("report.json");
    let csv_path = write_report(&serial, &out).unwrap();
    let rows: Vec<CsvRow> = read_csv(fs::File::open(csv_path).unwrap()).unwrap();
    let direct: Vec<CsvRow> = serial.rows.iter().map(CsvRow::from).collect();
    assert_eq!(rows, direct);
}

#[test]
fn validator_rejects_tampered_reports() {
    let mut cfg = config();
    cfg.methods = vec![Method::Vanilla];
    cfg.train.seeds = vec![0];
    let data = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train_to(dir.path(), &cfg);
    let report = evaluate_all(&cfg, &data, dir.path(), 1, hashes()).unwrap();
    let text = report.to_json().unwrap();

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = "v2".into();
    assert!(validate_report(&v.to_string()).is_err());

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["rows"][0]["ece"] = 1.5.into();
    assert!(validate_report(&v.to_string()).is_err());

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["rows"].as_array_mut().unwrap().pop();
    assert!(validate_report(&v.to_string()).is_err());

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["summary"][0]["accuracy"]["mean"] = 0.123.into();
    assert!(validate_report(&v.to_string()).is_err());

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["rows"][0]["extra"] = 1.into();
    assert!(validate_report(&v.to_string()).is_err());
}

#[test]
fn ensemble_of_one_matches_single_model() {
    let mut cfg = config();
    cfg.posthoc = vec![PosthocKind::None, PosthocKind::Temperature];
    let data = generate(&cfg).unwrap();
    let single = train_cell(&cfg, &data, Method::Vanilla, 0).unwrap();
    let mut as_member = single.clone();
    as_member[0].method = Method::DeepEnsemble(2);
    let a = evaluate_cell(&cfg, &data, &single).unwrap();
    let b = evaluate_cell(&cfg, &data, &as_member).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            (x.accuracy, x.ece, x.auroc_ood, x.gep_error, x.tau, &x.posthoc),
            (y.accuracy, y.ece, y.auroc_ood, y.gep_error, y.tau, &y.posthoc)
        );
    }
}

#[test]
fn sweep_has_one_row_per_layer_choice() {
    let mut cfg = config();
    cfg.model.num_mp_layers = 3;
    cfg.train.seeds = vec![0];
    cfg.train.epochs = 1;
    let data = generate(&cfg).unwrap();
    let rows = sweep_anchor_layer(&cfg, &data, 2).unwrap();
    // vanilla, hidden 2..=3, readout
    assert_eq!(rows.len(), (3 - 1) + 2);
    let layers: Vec<&str> = rows.iter().map(|r| r.anchor_layer.as_str()).collect();
    assert_eq!(layers, ["none", "2", "3", "readout"]);

    let mut buf = Vec::new();
    gduq_core::experiment::write_csv_rows(&rows, &mut buf).unwrap();
    let back: Vec<SweepRow> = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, rows);

    cfg.model.num_mp_layers = 1;
    let rows = sweep_anchor_layer(&cfg, &data, 1).unwrap();
    assert_eq!(rows.len(), 2);
}
