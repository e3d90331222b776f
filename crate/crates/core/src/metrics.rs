//! Forecasted-occupancy scores over line-of-sight cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CellMask;
use crate::grid::DynamicOccupancyGrid;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Occupied iff `w >= tau`.
pub fn binarize(grid: &DynamicOccupancyGrid, tau: f64) -> CellMask {
    CellMask::from_vec(grid.occupancy().iter().map(|&w| w >= tau).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub n_los: u64,
    pub horizon: f64,
}

impl EvalReport {
    /// Scores from confusion counts. Zero denominators score 0, except when
    /// neither side has a positive cell, which counts as perfect agreement.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, horizon: f64) -> Result<Self> {
        let n_los = tp + fp + fn_ + tn;
        if n_los == 0 {
            return Err(Error::NoLosCells);
        }
        let accuracy = (tp + tn) as f64 / n_los as f64;
        let (precision, recall, f1, iou) = if tp + fp + fn_ == 0 {
            (1.0, 1.0, 1.0, 1.0)
        } else {
            let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
            (ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(2 * tp, 2 * tp + fp + fn_), ratio(tp, tp + fp + fn_))
        };
        Ok(Self { accuracy, precision, recall, f1, iou, tp, fp, fn_, tn, n_los, horizon })
    }
}

/// Confusion counts of `pred` against `gt` restricted to `los`.
pub fn eval_forecast(pred: &CellMask, gt: &CellMask, los: &CellMask, horizon: f64) -> Result<EvalReport> {
    if pred.len() != gt.len() || gt.len() != los.len() {
        return Err(Error::GeometryMismatch);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in los.iter_set() {
        match (pred.get(i), gt.get(i)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    EvalReport::from_counts(tp, fp, fn_, tn, horizon)
}
