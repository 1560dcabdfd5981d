//! Grid statistics: error metrics, out-of-sample R², reciprocal-rank
//! scores with fractional ties, pairwise win counts, least-squares
//! diagnostics, and label-volatility indicators.

mod report;

pub use report::{
    compute_regressions, compute_win_tables, emit_report, parse_metrics_csv, FeatureWins,
    MethodWins, MetricKind, RankReport, RegressionEntry, RegressionReport, VolStat, VolatilityRow,
    WinTables, REPORT_SCHEMA_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::features::FeatureKind;
use crate::models::Arch;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{0} must be nonempty")]
    Empty(&'static str),
    #[error("benchmark error is zero: targets are all identical")]
    DegenerateBenchmark,
    #[error("explanatory values are all identical")]
    DegenerateRegressor,
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("test set {test_set} horizon {horizon} is missing combination {combo}")]
    IncompleteGrid {
        test_set: String,
        horizon: usize,
        combo: String,
    },
    #[error("test set {test_set} horizon {horizon} has duplicate records for {combo}")]
    DuplicateCell {
        test_set: String,
        horizon: usize,
        combo: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad metrics csv: {0}")]
    BadCsv(String),
}

/// Metrics for one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instrument: String,
    pub split: usize,
    pub arch: Arch,
    pub feature: FeatureKind,
    pub siamese: bool,
    pub horizon: usize,
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
}

/// A model-input combination: one column of the ranking table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComboKey {
    pub feature: FeatureKind,
    pub arch: Arch,
    pub siamese: bool,
}

impl std::fmt::Display for ComboKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.arch,
            self.feature,
            if self.siamese { "siamese" } else { "original" }
        )
    }
}

/// Mean absolute and mean squared prediction error.
pub fn mae_mse<T: Scalar>(preds: &[T], targets: &[T]) -> Result<(T, T), EvalError> {
    if preds.len() != targets.len() {
        return Err(EvalError::LengthMismatch {
            left: preds.len(),
            right: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty("metric input"));
    }
    let mut abs = T::zero();
    let mut sq = T::zero();
    for (&p, &t) in preds.iter().zip(targets) {
        let d = p - t;
        abs += d.abs();
        sq += d * d;
    }
    let n = T::from_usize(preds.len());
    Ok((abs / n, sq / n))
}

/// Out-of-sample R²: one minus the model error over the error of the
/// test-set-mean benchmark.
pub fn r2_os<T: Scalar>(preds: &[T], targets: &[T]) -> Result<T, EvalError> {
    let (_, mse_model) = mae_mse(preds, targets)?;
    let n = T::from_usize(targets.len());
    let mean = targets.iter().copied().sum::<T>() / n;
    let mse_bench = targets
        .iter()
        .map(|&t| (t - mean) * (t - mean))
        .sum::<T>()
        / n;
    if mse_bench == T::zero() {
        return Err(EvalError::DegenerateBenchmark);
    }
    Ok(T::one() - mse_model / mse_bench)
}

/// Reciprocal-rank scores. Within each (test set, horizon) the
/// combinations are ranked ascending by the metric, ties getting the
/// mean of their positions; a combination's score at a horizon is the
/// mean over test sets of 1/rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub metric: RankMetric,
    /// Test sets in canonical order, as `instrument/split`.
    pub test_sets: Vec<String>,
    pub entries: Vec<RankEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub arch: Arch,
    pub feature: FeatureKind,
    pub siamese: bool,
    pub horizon: usize,
    pub score: f64,
    /// Rank per test set, aligned with `test_sets`.
    pub ranks: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMetric {
    Mse,
}

impl RankMetric {
    fn of(self, r: &EvalRecord) -> f64 {
        match self {
            RankMetric::Mse => r.mse,
        }
    }
}

pub fn rank_scores(records: &[EvalRecord], metric: RankMetric) -> Result<RankTable, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("rank grid"));
    }
    let combos: BTreeSet<ComboKey> = records
        .iter()
        .map(|r| ComboKey {
            feature: r.feature,
            arch: r.arch,
            siamese: r.siamese,
        })
        .collect();
    let horizons: BTreeSet<usize> = records.iter().map(|r| r.horizon).collect();
    let test_sets: BTreeSet<(String, usize)> = records
        .iter()
        .map(|r| (r.instrument.clone(), r.split))
        .collect();

    let mut cells: BTreeMap<(String, usize, usize), BTreeMap<ComboKey, f64>> = BTreeMap::new();
    for r in records {
        let key = (r.instrument.clone(), r.split, r.horizon);
        let combo = ComboKey {
            feature: r.feature,
            arch: r.arch,
            siamese: r.siamese,
        };
        if cells
            .entry(key)
            .or_default()
            .insert(combo, metric.of(r))
            .is_some()
        {
            return Err(EvalError::DuplicateCell {
                test_set: format!("{}/{}", r.instrument, r.split),
                horizon: r.horizon,
                combo: combo.to_string(),
            });
        }
    }

    // every (test set, horizon) must hold every combination
    for (instrument, split) in &test_sets {
        for &h in &horizons {
            let cell = cells.get(&(instrument.clone(), *split, h));
            for combo in &combos {
                if cell.and_then(|c| c.get(combo)).is_none() {
                    return Err(EvalError::IncompleteGrid {
                        test_set: format!("{instrument}/{split}"),
                        horizon: h,
                        combo: combo.to_string(),
                    });
                }
            }
        }
    }

    let mut entries = Vec::new();
    for &h in &horizons {
        // fractional ranks per test set
        let mut per_combo_ranks: BTreeMap<ComboKey, Vec<f64>> =
            combos.iter().map(|c| (*c, Vec::new())).collect();
        for (instrument, split) in &test_sets {
            let cell = &cells[&(instrument.clone(), *split, h)];
            for combo in &combos {
                let own = cell[combo];
                let better = cell.values().filter(|&&v| v < own).count();
                let tied = cell.values().filter(|&&v| v == own).count();
                let rank = better as f64 + 1.0 + (tied as f64 - 1.0) / 2.0;
                per_combo_ranks.get_mut(combo).unwrap().push(rank);
            }
        }
        for combo in &combos {
            let ranks = per_combo_ranks.remove(combo).unwrap();
            let score = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / ranks.len() as f64;
            entries.push(RankEntry {
                arch: combo.arch,
                feature: combo.feature,
                siamese: combo.siamese,
                horizon: h,
                score,
                ranks,
            });
        }
    }

    Ok(RankTable {
        metric,
        test_sets: test_sets
            .iter()
            .map(|(i, s)| format!("{i}/{s}"))
            .collect(),
        entries,
    })
}

/// Strict pairwise wins over paired test sets; ties count for neither.
pub fn win_counts(a: &[f64], b: &[f64]) -> Result<(usize, usize), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let wins_a = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let wins_b = a.iter().zip(b).filter(|(x, y)| y < x).count();
    Ok((wins_a, wins_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult<T> {
    pub slope: T,
    pub intercept: T,
    pub points: usize,
}

/// Closed-form least squares: slope is cov(x, y)/var(x).
pub fn ols_fit<T: Scalar>(xs: &[T], ys: &[T]) -> Result<RegressionResult<T>, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewPoints(xs.len()));
    }
    let n = T::from_usize(xs.len());
    let mean_x = xs.iter().copied().sum::<T>() / n;
    let mean_y = ys.iter().copied().sum::<T>() / n;
    let mut cov = T::zero();
    let mut var = T::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mean_x) * (y - mean_y);
        var += (x - mean_x) * (x - mean_x);
    }
    if var == T::zero() {
        return Err(EvalError::DegenerateRegressor);
    }
    let slope = cov / var;
    Ok(RegressionResult {
        slope,
        intercept: mean_y - slope * mean_x,
        points: xs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolatilityStats<T> {
    /// Mean absolute deviation of the labels about their mean.
    pub ac: T,
    /// Population standard deviation of the labels.
    pub std: T,
}

pub fn volatility_stats<T: Scalar>(labels: &[T]) -> Result<VolatilityStats<T>, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty("labels"));
    }
    let n = T::from_usize(labels.len());
    let mean = labels.iter().copied().sum::<T>() / n;
    let mut abs = T::zero();
    let mut sq = T::zero();
    for &p in labels {
        let d = p - mean;
        abs += d.abs();
        sq += d * d;
    }
    Ok(VolatilityStats {
        ac: abs / n,
        std: (sq / n).sqrt(),
    })
}

#[cfg(test)]
mod tests;
