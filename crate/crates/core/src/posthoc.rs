//! Post-hoc calibration fitted on validation logits: temperature scaling
//! (golden-section search over `log T`) and vector scaling (Adam on
//! per-class scale and bias).

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, softmax, AdamConfig, AdamState, Matrix, Params, Tape};
use crate::error::{Error, Result};

/// Search interval for `log T`.
pub const LOG_T_RANGE: (f64, f64) = (-3.0, 3.0);
pub const LOG_T_TOL: f64 = 1e-5;
pub const VECTOR_STEPS: usize = 500;
pub const VECTOR_LR: f64 = 0.01;
/// Scales are projected back to at least this value after every step.
pub const MIN_SCALE: f64 = 1e-6;
/// Consecutive NLL increases treated as divergence.
pub const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosthocKind {
    None,
    Temperature,
    Vector,
}

impl PosthocKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PosthocKind::None => "none",
            PosthocKind::Temperature => "temperature",
            PosthocKind::Vector => "vector",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScaler {
    #[serde(rename = "T")]
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorScaler {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// A fitted scaler as stored in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scaler {
    None,
    Temperature(TemperatureScaler),
    Vector(VectorScaler),
}

impl Scaler {
    pub fn fit(kind: PosthocKind, logits: &Matrix, labels: &[usize]) -> Result<Scaler> {
        Ok(match kind {
            PosthocKind::None => Scaler::None,
            PosthocKind::Temperature => Scaler::Temperature(fit_temperature(logits, labels)?),
            PosthocKind::Vector => Scaler::Vector(fit_vector_scaling(logits, labels)?),
        })
    }

    pub fn apply(&self, logits: &Matrix) -> Result<Matrix> {
        match self {
            Scaler::None => Ok(softmax(logits)),
            Scaler::Temperature(s) => Ok(apply_temperature(s, logits)),
            Scaler::Vector(s) => apply_vector_scaling(s, logits),
        }
    }
}

fn check_fit_inputs(logits: &Matrix, labels: &[usize], min_rows: usize) -> Result<()> {
    let (n, q) = logits.shape();
    if labels.len() != n {
        return Err(Error::input(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= q) {
        return Err(Error::LabelOutOfRange { label: bad, classes: q });
    }
    if n < min_rows {
        return Err(Error::input(format!(
            "need at least {min_rows} validation rows, got {n}"
        )));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::input("validation labels contain a single class"));
    }
    Ok(())
}

/// Mean negative log-likelihood of `softmax(logits / t)`.
pub fn nll_at_temperature(logits: &Matrix, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v / t).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Mean negative log-likelihood of probability rows.
pub fn nll(probs: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.get(r, y).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureFit {
    pub scaler: TemperatureScaler,
    pub nll: f64,
    pub nll_at_one: f64,
    /// The optimum lies on the edge of the search interval.
    pub hit_bound: bool,
}

/// Temperature fit with diagnostics. The result is the best of every
/// evaluated candidate, which always includes `T = 1` and both interval
/// ends.
pub fn fit_temperature_report(logits: &Matrix, labels: &[usize]) -> Result<TemperatureFit> {
    check_fit_inputs(logits, labels, logits.cols())?;
    let f = |u: f64| nll_at_temperature(logits, labels, u.exp());
    let (lo, hi) = LOG_T_RANGE;
    let mut best = (f(0.0), 0.0);
    let nll_at_one = best.0;
    let consider = |u: f64, v: f64, best: &mut (f64, f64)| {
        if v < best.0 {
            *best = (v, u);
        }
    };
    for u in [lo, hi] {
        let v = f(u);
        consider(u, v, &mut best);
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    consider(c, fc, &mut best);
    consider(d, fd, &mut best);
    while b - a > LOG_T_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
            consider(c, fc, &mut best);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
            consider(d, fd, &mut best);
        }
    }

    let hit_bound = best.1 == lo || best.1 == hi;
    if hit_bound {
        log::warn!("temperature search hit the bound T = {:.4}", best.1.exp());
    }
    Ok(TemperatureFit {
        scaler: TemperatureScaler { t: best.1.exp() },
        nll: best.0,
        nll_at_one,
        hit_bound,
    })
}

pub fn fit_temperature(logits: &Matrix, labels: &[usize]) -> Result<TemperatureScaler> {
    Ok(fit_temperature_report(logits, labels)?.scaler)
}

pub fn apply_temperature(scaler: &TemperatureScaler, logits: &Matrix) -> Matrix {
    softmax(&logits.map(|v| v / scaler.t))
}

/// Fits `softmax(w * logits + b)` by full-batch Adam from `w = 1, b = 0`
/// and returns the parameters with the lowest NLL seen.
pub fn fit_vector_scaling(logits: &Matrix, labels: &[usize]) -> Result<VectorScaler> {
    let q = logits.cols();
    check_fit_inputs(logits, labels, 2 * q)?;
    let mut params = Params::new();
    params.insert("w", Matrix::filled(1, q, 1.0));
    params.insert("b", Matrix::zeros(1, q));
    let cfg = AdamConfig {
        lr: VECTOR_LR,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut best: Option<(f64, Params)> = None;
    let mut prev = f64::INFINITY;
    let mut rising = 0;

    for step in 0..=VECTOR_STEPS {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| true);
        let l = tape.constant(logits.clone());
        let z = tape.add(tape.mul_row(l, bound.get("w")?)?, bound.get("b")?)?;
        let loss = tape.softmax_cross_entropy(z, labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "vector scaling NLL is not finite at step {step}"
            )));
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, params.clone()));
        }
        rising = if value > prev { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence(format!(
                "vector scaling NLL rose for {DIVERGENCE_PATIENCE} consecutive steps"
            )));
        }
        prev = value;
        if step == VECTOR_STEPS {
            break;
        }
        let grads = bound.collect_grads(&tape.backward(loss)?);
        adam_step(&mut params, &grads, &mut state, &cfg)?;
        for w in params.get_mut("w").expect("inserted").data_mut() {
            *w = w.max(MIN_SCALE);
        }
    }
    let (_, p) = best.expect("at least one evaluation");
    Ok(VectorScaler {
        w: p.get("w").expect("inserted").data().to_vec(),
        b: p.get("b").expect("inserted").data().to_vec(),
    })
}

pub fn apply_vector_scaling(scaler: &VectorScaler, logits: &Matrix) -> Result<Matrix> {
    let q = logits.cols();
    if scaler.w.len() != q || scaler.b.len() != q {
        return Err(Error::shape(
            "apply_vector_scaling",
            logits.shape(),
            (1, scaler.w.len()),
        ));
    }
    let mut z = logits.clone();
    for r in 0..z.rows() {
        for c in 0..q {
            z.set(r, c, scaler.w[c] * logits.get(r, c) + scaler.b[c]);
        }
    }
    Ok(softmax(&z))
}
