//! Evaluation reports: versioned JSON, tidy CSV and a validator for both.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::config::Method;
use crate::error::{Error, Result};
use crate::posthoc::{PosthocKind, Scaler};

pub const REPORT_VERSION: &str = "v1";

/// Splits that receive metric rows.
pub const REPORT_SPLITS: [&str; 2] = ["id_test", "ood_test"];

/// Column order of the per-row CSV.
pub const CSV_COLUMNS: [&str; 11] = [
    "method",
    "seed",
    "posthoc",
    "split",
    "accuracy",
    "ece",
    "auroc_ood",
    "gep_error",
    "tau",
    "n",
    "n_bins",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSeeds {
    pub method: Method,
    pub seed: u64,
    /// Training seed of each member, derived from `(method, seed)`.
    pub member_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportHeader {
    pub command: String,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub methods: Vec<Method>,
    pub posthoc: Vec<PosthocKind>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSeeds>,
    pub k: usize,
    pub n_bins: usize,
    pub per_node_inference_draws: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub method: Method,
    pub seed: u64,
    pub posthoc: Scaler,
    pub split: String,
    pub accuracy: f64,
    pub ece: f64,
    /// AUROC of id_test vs ood_test maximum softmax probabilities.
    pub auroc_ood: f64,
    /// GEP error on this split with `tau` tuned on id_val.
    pub gep_error: f64,
    pub n: usize,
    pub n_bins: usize,
    pub tau: f64,
}

impl ReportRow {
    pub fn posthoc_kind(&self) -> PosthocKind {
        match self.posthoc {
            Scaler::None => PosthocKind::None,
            Scaler::Temperature(_) => PosthocKind::Temperature,
            Scaler::Vector(_) => PosthocKind::Vector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub method: Method,
    pub posthoc: PosthocKind,
    pub split: String,
    pub n_seeds: usize,
    pub accuracy: MeanStd,
    pub ece: MeanStd,
    pub auroc_ood: MeanStd,
    pub gep_error: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub version: String,
    pub header: ReportHeader,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

/// Summary rows in `methods x posthoc x split` order.
pub fn summarize(header: &ReportHeader, rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &method in &header.methods {
        for &posthoc in &header.posthoc {
            for split in REPORT_SPLITS {
                let sel: Vec<&ReportRow> = rows
                    .iter()
                    .filter(|r| r.method == method && r.posthoc_kind() == posthoc && r.split == split)
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let stat = |f: fn(&ReportRow) -> f64| MeanStd::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
                out.push(SummaryRow {
                    method,
                    posthoc,
                    split: split.to_string(),
                    n_seeds: sel.len(),
                    accuracy: stat(|r| r.accuracy),
                    ece: stat(|r| r.ece),
                    auroc_ood: stat(|r| r.auroc_ood),
                    gep_error: stat(|r| r.gep_error),
                });
            }
        }
    }
    out
}

impl Report {
    pub fn new(header: ReportHeader, rows: Vec<ReportRow>) -> Report {
        let summary = summarize(&header, &rows);
        Report {
            version: REPORT_VERSION.into(),
            header,
            rows,
            summary,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Tidy CSV, one line per row, columns as in [`CSV_COLUMNS`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow::from(r)).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::input(format!("csv: {e}"))
}

/// Flat CSV form of a [`ReportRow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub seed: u64,
    pub posthoc: String,
    pub split: String,
    pub accuracy: f64,
    pub ece: f64,
    pub auroc_ood: f64,
    pub gep_error: f64,
    pub tau: f64,
    pub n: usize,
    pub n_bins: usize,
}

impl From<&ReportRow> for CsvRow {
    fn from(r: &ReportRow) -> Self {
        CsvRow {
            method: r.method.to_string(),
            seed: r.seed,
            posthoc: r.posthoc_kind().as_str().to_string(),
            split: r.split.clone(),
            accuracy: r.accuracy,
            ece: r.ece,
            auroc_ood: r.auroc_ood,
            gep_error: r.gep_error,
            tau: r.tau,
            n: r.n,
            n_bins: r.n_bins,
        }
    }
}

pub fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(csv_error)
}

pub fn write_csv_rows<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::input(format!("report schema: {}", msg.into()))
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {v} is outside [0, 1]")))
    }
}

/// Parses and checks a report: field set and types, version, one row per
/// `(method, seed, posthoc, split)`, metric ranges and summary consistency.
pub fn validate_report(text: &str) -> Result<Report> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("version").and_then(|v| v.as_str()) {
        Some(REPORT_VERSION) => {}
        Some(other) => return Err(invalid(format!("unsupported version `{other}`"))),
        None => return Err(invalid("missing string field `version`")),
    }
    let report: Report = serde_json::from_value(value).map_err(|e| invalid(e.to_string()))?;
    let h = &report.header;

    let mut seen = BTreeSet::new();
    for r in &report.rows {
        if !REPORT_SPLITS.contains(&r.split.as_str()) {
            return Err(invalid(format!("unknown split `{}`", r.split)));
        }
        if !h.methods.contains(&r.method) || !h.seeds.contains(&r.seed) || !h.posthoc.contains(&r.posthoc_kind()) {
            return Err(invalid(format!(
                "row {} / {} is not declared in the header",
                r.method, r.seed
            )));
        }
        if !seen.insert((r.method, r.seed, r.posthoc_kind(), r.split.clone())) {
            return Err(invalid(format!(
                "duplicate row {} seed {} {}",
                r.method, r.seed, r.split
            )));
        }
        for (name, v) in [
            ("accuracy", r.accuracy),
            ("ece", r.ece),
            ("auroc_ood", r.auroc_ood),
            ("gep_error", r.gep_error),
            ("tau", r.tau),
        ] {
            unit_interval(name, v)?;
        }
        if r.n == 0 || r.n_bins != h.n_bins {
            return Err(invalid("row counts disagree with the header"));
        }
    }
    let expected = h.methods.len() * h.seeds.len() * h.posthoc.len() * REPORT_SPLITS.len();
    if report.rows.len() != expected {
        return Err(invalid(format!("{} rows, expected {expected}", report.rows.len())));
    }
    if report.summary != summarize(h, &report.rows) {
        return Err(invalid("summary does not match the rows"));
    }
    Ok(report)
}
