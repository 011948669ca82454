//! Error metrics, forward timing, Pareto frontiers and routing summaries.

use crate::error::{M2mError, Result};
use ndarray::{Array2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use std::time::Instant;

fn check_shapes(pred: &ArrayView4<'_, f64>, truth: &ArrayView4<'_, f64>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(M2mError::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

/// Per-sample relative L2 errors `‖pred - truth‖ / ‖truth‖`.
pub fn relative_l2_per_sample(pred: ArrayView4<'_, f64>, truth: ArrayView4<'_, f64>) -> Result<Vec<f64>> {
    check_shapes(&pred, &truth)?;
    pred.axis_iter(Axis(0))
        .zip(truth.axis_iter(Axis(0)))
        .map(|(p, t)| {
            let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if tn == 0.0 {
                return Err(M2mError::ZeroNormTruth);
            }
            let dn = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            Ok(dn / tn)
        })
        .collect()
}

/// Batch mean of per-sample relative L2 errors.
pub fn relative_l2(pred: ArrayView4<'_, f64>, truth: ArrayView4<'_, f64>) -> Result<f64> {
    let errs = relative_l2_per_sample(pred, truth)?;
    if errs.is_empty() {
        return Err(M2mError::ShapeMismatch("empty batch".into()));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

pub fn rmse(pred: ArrayView4<'_, f64>, truth: ArrayView4<'_, f64>) -> Result<f64> {
    check_shapes(&pred, &truth)?;
    let n = pred.len().max(1) as f64;
    Ok((pred.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt())
}

pub fn mae(pred: ArrayView4<'_, f64>, truth: ArrayView4<'_, f64>) -> Result<f64> {
    check_shapes(&pred, &truth)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(truth.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Wall-clock timing summary in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub warmups: usize,
    pub repeats: usize,
    pub device: String,
}

pub const MIN_BENCH_REPEATS: usize = 20;
pub const MIN_BENCH_WARMUPS: usize = 3;

/// Runs `f` `warmups` times untimed, then `repeats` timed times, and reports the median.
pub fn time_forward<F: FnMut() -> Result<()>>(mut f: F, warmups: usize, repeats: usize) -> Result<Timing> {
    for _ in 0..warmups {
        f()?;
    }
    let repeats = repeats.max(1);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok(Timing {
        median_ms: median,
        min_ms: times[0],
        max_ms: times[times.len() - 1],
        warmups,
        repeats,
        device: "cpu".into(),
    })
}

/// One row of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub model_name: String,
    pub parameter_count: usize,
    pub forward_ms: f64,
    pub rel_l2: f64,
    pub rmse: f64,
    pub mae: f64,
}

fn dominates(a: &BenchRecord, b: &BenchRecord) -> bool {
    a.forward_ms <= b.forward_ms
        && a.rel_l2 <= b.rel_l2
        && (a.forward_ms < b.forward_ms || a.rel_l2 < b.rel_l2)
}

/// `true` for records no other record dominates in (forward_ms, rel_l2).
pub fn pareto_flags(records: &[BenchRecord]) -> Vec<bool> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| !records.iter().enumerate().any(|(j, o)| j != i && dominates(o, r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    #[serde(flatten)]
    pub record: BenchRecord,
    pub efficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub protocol: String,
    pub rows: Vec<ParetoRow>,
}

pub fn pareto_report(records: &[BenchRecord], protocol: impl Into<String>) -> Result<ParetoReport> {
    if records.is_empty() {
        return Err(M2mError::Missing("no benchmark records".into()));
    }
    let flags = pareto_flags(records);
    Ok(ParetoReport {
        protocol: protocol.into(),
        rows: records
            .iter()
            .zip(flags)
            .map(|(r, efficient)| ParetoRow {
                record: r.clone(),
                efficient,
            })
            .collect(),
    })
}

impl ParetoReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_name,parameter_count,forward_ms,rel_l2,rmse,mae,pareto_efficient\n");
        for row in &self.rows {
            let r = &row.record;
            out.push_str(&format!(
                "{},{},{:.6},{:.6e},{:.6e},{:.6e},{}\n",
                r.model_name, r.parameter_count, r.forward_ms, r.rel_l2, r.rmse, r.mae, row.efficient
            ));
        }
        out
    }
}

/// Mean router probabilities per patch position `[S², M]` recorded at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSnapshot {
    pub epoch: usize,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingSummary {
    pub epochs: Vec<usize>,
    /// `[epochs][S²][M]`
    pub weights: Vec<Array2<f64>>,
    /// Argmax expert per patch for each epoch.
    pub argmax: Vec<Vec<usize>>,
}

pub fn routing_summary(snapshots: &[RouterSnapshot]) -> Result<RoutingSummary> {
    if snapshots.is_empty() {
        return Err(M2mError::Missing("run log has no router snapshots".into()));
    }
    let rows = snapshots[0].probs.len();
    let m = snapshots[0].probs.first().map_or(0, Vec::len);
    let mut weights = Vec::with_capacity(snapshots.len());
    let mut argmax = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        if snap.probs.len() != rows || snap.probs.iter().any(|r| r.len() != m) {
            return Err(M2mError::ShapeMismatch(format!(
                "router snapshot at epoch {} is not [{rows}, {m}]",
                snap.epoch
            )));
        }
        let w = Array2::from_shape_fn((rows, m), |(p, j)| snap.probs[p][j]);
        argmax.push(
            w.outer_iter()
                .map(|row| {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect(),
        );
        weights.push(w);
    }
    Ok(RoutingSummary {
        epochs: snapshots.iter().map(|s| s.epoch).collect(),
        weights,
        argmax,
    })
}
