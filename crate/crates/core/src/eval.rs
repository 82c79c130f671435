//! Depth error and accuracy metrics with optional median scaling.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{param, Error, Result};
use crate::imaging::DepthMap;

/// Standard depth metrics over jointly valid pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

/// Column headers in table order.
pub const TABLE_COLUMNS: [&str; 7] = ["Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d<1.25", "d<1.25^2", "d<1.25^3"];

impl MetricReport {
    pub fn values(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3]
    }

    pub fn table_header() -> String {
        TABLE_COLUMNS.iter().map(|c| format!("{c:>9}")).collect::<Vec<_>>().join(" |")
    }

    /// Fixed-width row, three decimals per column.
    pub fn table_row(&self) -> String {
        self.values().iter().map(|v| format!("{v:>9.3}")).collect::<Vec<_>>().join(" |")
    }

    /// Per-image average, as reported over a test set.
    pub fn mean_of(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 7];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v / n;
            }
        }
        Some(MetricReport {
            abs_rel: acc[0],
            sq_rel: acc[1],
            rmse: acc[2],
            rmse_log: acc[3],
            delta1: acc[4],
            delta2: acc[5],
            delta3: acc[6],
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        write!(f, "{}", self.table_row())
    }
}

fn joint_indices(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<usize>> {
    pred.check_shape(gt.height(), gt.width(), "depth metrics")?;
    let idx: Vec<usize> = (0..gt.depth().len())
        .filter(|&i| pred.valid()[i] && gt.valid()[i] && pred.depth()[i] > 0.0 && gt.depth()[i] > 0.0)
        .collect();
    if idx.is_empty() {
        return param("no jointly valid pixels between prediction and ground truth");
    }
    Ok(idx)
}

/// Median with the even-length convention of averaging the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Multiplies `pred` by `median(gt) / median(pred)`, both medians taken over
/// jointly valid pixels.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMap> {
    let idx = joint_indices(pred, gt)?;
    let mp = median(&idx.iter().map(|&i| pred.depth()[i]).collect::<Vec<_>>()).unwrap_or(0.0);
    let mg = median(&idx.iter().map(|&i| gt.depth()[i]).collect::<Vec<_>>()).unwrap_or(0.0);
    if !(mp > 0.0) {
        return Err(Error::Degenerate("prediction median is zero".into()));
    }
    Ok(pred.scaled(mg / mp))
}

/// Error and accuracy metrics over pixels valid in both maps.
///
/// Accuracy thresholds use strict `<`.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport> {
    pred.check_shape(gt.height(), gt.width(), "depth metrics")?;
    for i in 0..gt.depth().len() {
        if pred.valid()[i] && gt.valid()[i] && (pred.depth()[i] <= 0.0 || gt.depth()[i] <= 0.0) {
            return param("non-positive depth at a valid pixel");
        }
    }
    let idx = joint_indices(pred, gt)?;
    let n = idx.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for &i in &idx {
        let (p, g) = (pred.depth()[i], gt.depth()[i]);
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (hit, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *hit += 1;
            }
        }
    }
    Ok(MetricReport {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        n_valid: idx.len(),
    })
}
