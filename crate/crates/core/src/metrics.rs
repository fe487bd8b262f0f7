//! Evaluation, inequality measures and run records.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_accuracy, Dataset, ModelSpec};
use crate::params::ParamVector;

/// Loss and accuracy on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Pooled over all datasets (sample-weighted).
    pub global: Score,
    pub per_client: Vec<Score>,
}

/// Full-batch scores on each dataset and on their union.
pub fn evaluate(spec: &ModelSpec, theta: &ParamVector, datasets: &[Dataset]) -> Result<Evaluation> {
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate on".into()));
    }
    let mut per_client = Vec::with_capacity(datasets.len());
    let (mut loss, mut correct, mut n) = (0.0, 0.0, 0usize);
    for d in datasets {
        let (l, a) = loss_and_accuracy(spec, theta, d)?;
        per_client.push(Score { loss: l, acc: a });
        let m = d.n_samples();
        loss += l * m as f64;
        correct += a * m as f64;
        n += m;
    }
    let global =
        if datasets.len() == 1 { per_client[0] } else { Score { loss: loss / n as f64, acc: correct / n as f64 } };
    Ok(Evaluation { global, per_client })
}

/// One evaluated point of the global trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub version: u64,
    pub loss: f64,
    pub acc: f64,
    /// Staleness of the update that produced this version (0 for the
    /// initial model).
    pub staleness: u64,
    pub s_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub arrivals: u64,
    pub applied: u64,
    pub dropped: u64,
    pub step_clamps: u64,
    pub scale_clamps: u64,
    pub arc_fallbacks: u64,
    pub max_applied_staleness: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub seed: u64,
    /// Full configuration the run was produced from.
    pub config: serde_json::Value,
    pub rounds: Vec<RoundRecord>,
    pub final_score: Score,
    pub per_client_final: Vec<Score>,
    /// Version of the best global model by pooled validation accuracy
    /// (earliest on ties) and the per-client scores at that version.
    pub best_version: u64,
    pub best_score: Score,
    pub per_client_best: Vec<Score>,
    pub swa_score: Option<Score>,
    pub counters: Counters,
    /// Global model at the end of the run.
    pub final_model: ParamVector,
    /// Set when the run stopped early; the record then covers the prefix.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn final_version(&self) -> u64 {
        self.rounds.last().map_or(0, |r| r.version)
    }

    pub fn best_client_accuracies(&self) -> Vec<f64> {
        self.per_client_best.iter().map(|s| s.acc).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// `version,loss,acc,staleness,s_factor` rows.
    pub fn write_rounds_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["version", "loss", "acc", "staleness", "s_factor"]).map_err(csv_err)?;
        for r in &self.rounds {
            out.write_record([
                r.version.to_string(),
                format!("{:.8}", r.loss),
                format!("{:.8}", r.acc),
                r.staleness.to_string(),
                format!("{:.8}", r.s_factor),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv { line: e.position().map_or(0, |p| p.line()), msg: e.to_string() }
}

/// First version whose error `1 − acc` is at most `e`.
pub fn rounds_to_error(rounds: &[RoundRecord], e: f64) -> Option<u64> {
    rounds.iter().find(|r| 1.0 - r.acc <= e).map(|r| r.version)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `Σ_i Σ_j |x_i − x_j| / (2 N² x̄)`.
pub fn gini(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("gini of an empty sample".into()));
    }
    if x.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("gini needs finite non-negative values".into()));
    }
    let m = mean(x);
    if m == 0.0 {
        return Err(Error::InvalidArgument("gini of an all-zero sample".into()));
    }
    let mut s = 0.0;
    for a in x {
        for b in x {
            s += (a - b).abs();
        }
    }
    let n = x.len() as f64;
    Ok(s / (2.0 * n * n * m))
}

/// `Σ_i x_i ln(x_i / x̄) / (N x̄)`.
pub fn theil(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("theil of an empty sample".into()));
    }
    if x.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("theil needs finite positive values".into()));
    }
    let m = mean(x);
    let s: f64 = x.iter().map(|&v| v * (v / m).ln()).sum();
    Ok(s / (x.len() as f64 * m))
}

/// Mean and sample standard deviation (0 for a single value). NaN entries
/// are skipped; an all-NaN input gives NaN for both.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = x.iter().copied().filter(|v| !v.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(&v);
    if v.len() == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// One row of the across-seed summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub n_runs: usize,
    pub n_failed: usize,
    pub final_acc: (f64, f64),
    pub final_loss: (f64, f64),
    pub best_acc: (f64, f64),
    pub gini: (f64, f64),
    pub theil: (f64, f64),
    pub rounds_to_error: (f64, f64),
}

impl SummaryRow {
    /// Aggregates the runs of one group. `error_threshold` selects the `T_e`
    /// column; runs that never reach it are left out of that column.
    pub fn from_runs(group: impl Into<String>, runs: &[&RunRecord], error_threshold: Option<f64>) -> Self {
        let col = |f: &dyn Fn(&RunRecord) -> f64| mean_std(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
        SummaryRow {
            group: group.into(),
            n_runs: runs.len(),
            n_failed: runs.iter().filter(|r| r.failed()).count(),
            final_acc: col(&|r| r.final_score.acc),
            final_loss: col(&|r| r.final_score.loss),
            best_acc: col(&|r| r.best_score.acc),
            gini: col(&|r| gini(&r.best_client_accuracies()).unwrap_or(f64::NAN)),
            theil: col(&|r| theil(&r.best_client_accuracies()).unwrap_or(f64::NAN)),
            rounds_to_error: col(&|r| {
                error_threshold.and_then(|e| rounds_to_error(&r.rounds, e)).map_or(f64::NAN, |v| v as f64)
            }),
        }
    }
}

const SUMMARY_HEADER: [&str; 17] = [
    "group",
    "n_runs",
    "n_failed",
    "final_acc_mean",
    "final_acc_std",
    "final_loss_mean",
    "final_loss_std",
    "best_acc_mean",
    "best_acc_std",
    "gini_mean",
    "gini_std",
    "theil_mean",
    "theil_std",
    "rounds_to_error_mean",
    "rounds_to_error_std",
    "error_threshold",
    "note",
];

fn fixed(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Writes summary rows with fixed six-digit precision so reruns compare
/// byte for byte.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], error_threshold: Option<f64>, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for r in rows {
        let pairs = [r.final_acc, r.final_loss, r.best_acc, r.gini, r.theil, r.rounds_to_error];
        let mut rec = vec![r.group.clone(), r.n_runs.to_string(), r.n_failed.to_string()];
        for (m, s) in pairs {
            rec.push(fixed(m));
            rec.push(fixed(s));
        }
        rec.push(error_threshold.map_or_else(String::new, fixed));
        rec.push(if r.n_failed > 0 { "partial".into() } else { String::new() });
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
