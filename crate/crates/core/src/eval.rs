//! Test-session metrics: RMSE on covered segments and Pearson correlation
//! against a natural-spline interpolation of the measured RTs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::ActionSpace;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::numerics::Scalar;
use crate::preproc::PreparedSession;
use crate::trainer::{greedy_rollout, predict_segments};

pub fn rmse(measured: &[f64], predicted: &[f64]) -> Result<f64> {
    if measured.is_empty() {
        return Err(Error::InvalidArgument("RMSE needs at least one pair".into()));
    }
    if measured.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "RMSE inputs differ in length: {} vs {}",
            measured.len(),
            predicted.len()
        )));
    }
    let mse = measured
        .iter()
        .zip(predicted)
        .map(|(m, p)| (m - p) * (m - p))
        .sum::<f64>()
        / measured.len() as f64;
    Ok(mse.sqrt())
}

pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs two equal-length inputs of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined {
            what: "correlation",
            why: "an input has zero variance".into(),
        });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Natural cubic spline through `knots` (strictly increasing x), held
/// constant at the boundary values outside the knot range.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(knots: &[(f64, f64)]) -> Result<Self> {
        let n = knots.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("spline needs at least 2 knots, got {n}")));
        }
        if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidArgument("spline knots must be strictly increasing".into()));
        }
        let xs: Vec<f64> = knots.iter().map(|k| k.0).collect();
        let ys: Vec<f64> = knots.iter().map(|k| k.1).collect();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations
            // h[i-1] m[i-1] + 2 (h[i-1] + h[i]) m[i] + h[i] m[i+1] = rhs[i].
            let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                diag[j] = 2.0 * (h[i - 1] + h[i]);
                rhs[j] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
            }
            for j in 1..k {
                let w = h[j] / diag[j - 1];
                diag[j] -= w * h[j];
                rhs[j] -= w * rhs[j - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for j in (0..k - 1).rev() {
                m[j + 1] = (rhs[j] - h[j + 1] * m[j + 2]) / diag[j];
            }
        }
        Ok(NaturalSpline { xs, ys, m })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.xs.partition_point(|&k| k <= x) - 1;
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Spline through `(index, value)` knots evaluated at every query index.
pub fn spline_interpolate(knots: &[(f64, f64)], queries: &[f64]) -> Result<Vec<f64>> {
    let spline = NaturalSpline::new(knots)?;
    Ok(queries.iter().map(|&q| spline.eval(q)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Rl,
    Sl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Rl => "rl",
            Mode::Sl => "sl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rl" => Ok(Mode::Rl),
            "sl" => Ok(Mode::Sl),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?} (expected rl or sl)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub t_start_s: f64,
    pub predicted_rt_s: f64,
    pub measured_rt_s: Option<f64>,
    pub spline_rt_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub subject_id: String,
    pub segments: usize,
    pub covered: usize,
    pub rmse: Option<f64>,
    pub correlation: Option<f64>,
    /// Correlation with the per-segment ground-truth RT, for synthetic data.
    pub latent_correlation: Option<f64>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub records: Vec<SegmentRecord>,
}

/// Assemble a report from per-segment predictions.
pub fn build_report(
    mode: Mode,
    session: &PreparedSession,
    predictions: &[f64],
) -> Result<EvalReport> {
    let n = session.segments.len();
    if predictions.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {n} segments",
            predictions.len()
        )));
    }
    let mut warnings = Vec::new();
    let knots: Vec<(f64, f64)> = session
        .segments
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.measured_rt.map(|m| (i as f64, m)))
        .collect();
    let measured: Vec<f64> = knots.iter().map(|k| k.1).collect();
    let at_knots: Vec<f64> = knots.iter().map(|k| predictions[k.0 as usize]).collect();
    let rmse = match rmse(&measured, &at_knots) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("rmse undefined: {e}"));
            None
        }
    };
    let indices: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let spline = match spline_interpolate(&knots, &indices) {
        Ok(curve) => Some(curve),
        Err(e) => {
            warnings.push(format!("spline undefined: {e}"));
            None
        }
    };
    let correlation = match &spline {
        Some(curve) => match pearson_correlation(predictions, curve) {
            Ok(r) => Some(r),
            Err(e) => {
                warnings.push(e.to_string());
                None
            }
        },
        None => None,
    };
    let latent_correlation = match &session.latent_rt {
        Some(latent) => match pearson_correlation(predictions, latent) {
            Ok(r) => Some(r),
            Err(e) => {
                warnings.push(format!("latent {e}"));
                None
            }
        },
        None => None,
    };
    let records = session
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| SegmentRecord {
            t_start_s: s.t_start_s,
            predicted_rt_s: predictions[i],
            measured_rt_s: s.measured_rt,
            spline_rt_s: spline.as_ref().map(|c| c[i]),
        })
        .collect();
    Ok(EvalReport {
        mode,
        subject_id: session.subject_id.clone(),
        segments: n,
        covered: knots.len(),
        rmse,
        correlation,
        latent_correlation,
        warnings,
        records,
    })
}

/// Run a trained network over a test session: traced RT of the greedy
/// policy in RL mode, clipped regression output in SL mode.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    session: &PreparedSession,
    mode: Mode,
    actions: &ActionSpace,
    beta: f64,
    initial_trt: f64,
) -> Result<EvalReport> {
    let predictions = match mode {
        Mode::Rl => {
            if !net.variant().is_rl() {
                return Err(Error::InvalidArgument(format!(
                    "rl evaluation needs an RL checkpoint, got {}",
                    net.variant()
                )));
            }
            greedy_rollout(net, &session.segments, actions, beta, initial_trt)?
        }
        Mode::Sl => {
            if net.variant().is_rl() {
                return Err(Error::InvalidArgument(format!(
                    "sl evaluation needs a supervised checkpoint, got {}",
                    net.variant()
                )));
            }
            predict_segments(net, &session.segments)?
        }
    };
    build_report(mode, session, &predictions)
}

#[derive(Serialize, Deserialize)]
struct RecordRow {
    t_start_s: f64,
    predicted_rt_s: f64,
    measured_rt_s: Option<f64>,
    spline_rt_s: Option<f64>,
}

impl EvalReport {
    /// Write `<stem>.json` (summary) and `<stem>.csv` (per segment) for a
    /// report path `<stem>.json`.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        if let Some(parent) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: json_path.to_path_buf(),
            source: e,
        })?;
        fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))?;
        write_records(&self.records, &json_path.with_extension("csv"))
    }
}

pub fn write_records(records: &[SegmentRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        w.serialize(RecordRow {
            t_start_s: r.t_start_s,
            predicted_rt_s: r.predicted_rt_s,
            measured_rt_s: r.measured_rt_s,
            spline_rt_s: r.spline_rt_s,
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<SegmentRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize::<RecordRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            Ok(SegmentRecord {
                t_start_s: row.t_start_s,
                predicted_rt_s: row.predicted_rt_s,
                measured_rt_s: row.measured_rt_s,
                spline_rt_s: row.spline_rt_s,
            })
        })
        .collect()
}
