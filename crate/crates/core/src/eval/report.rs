//! Report materialization: metrics.csv, ranks.json, regressions.json,
//! volatility.csv, and per-horizon summary tables. Emission is
//! deterministic: the same inputs always produce the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::{ols_fit, win_counts, EvalError, EvalRecord, RankTable};
use crate::features::FeatureKind;
use crate::models::Arch;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const METRICS_HEADER: &str = "instrument,split,arch,feature,siamese,horizon,mae,mse,r2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mae,
    R2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolStat {
    Ac,
    Std,
}

/// Label volatility of one test set at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityRow {
    pub instrument: String,
    pub split: usize,
    pub horizon: usize,
    pub ac: f64,
    pub std: f64,
}

/// Win counts comparing the two input kinds at a fixed method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWins {
    pub arch: Arch,
    pub siamese: bool,
    pub horizon: usize,
    pub lob: usize,
    pub ofi: usize,
}

/// Win counts comparing shared-encoder against plain at a fixed input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodWins {
    pub arch: Arch,
    pub feature: FeatureKind,
    pub horizon: usize,
    pub original: usize,
    pub siamese: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WinTables {
    pub feature: Vec<FeatureWins>,
    pub method: Vec<MethodWins>,
}

/// ranks.json payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub schema_version: u32,
    pub table: RankTable,
    pub wins: WinTables,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionEntry {
    pub arch: Arch,
    pub horizon: usize,
    pub metric: MetricKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub siamese: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stat: Option<VolStat>,
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// regressions.json payload: slopes/intercepts of the three diagnostic
/// families, each fitted over per-test-set values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionReport {
    pub schema_version: u32,
    /// y = metric on flow inputs regressed on x = metric on raw book.
    pub feature_effect: Vec<RegressionEntry>,
    /// y = shared-encoder metric regressed on x = plain metric.
    pub method_effect: Vec<RegressionEntry>,
    /// y = metric regressed on x = label volatility of the test set.
    pub volatility_effect: Vec<RegressionEntry>,
}

type CellKey = (String, usize, usize); // instrument, split, horizon

fn metric_of(r: &EvalRecord, metric: MetricKind) -> f64 {
    match metric {
        MetricKind::Mae => r.mae,
        MetricKind::R2 => r.r2,
    }
}

fn index_records(
    records: &[EvalRecord],
) -> (
    BTreeMap<(CellKey, Arch, FeatureKind, bool), &EvalRecord>,
    BTreeSet<(String, usize)>,
    BTreeSet<usize>,
) {
    let mut map = BTreeMap::new();
    let mut sets = BTreeSet::new();
    let mut horizons = BTreeSet::new();
    for r in records {
        map.insert(
            (
                (r.instrument.clone(), r.split, r.horizon),
                r.arch,
                r.feature,
                r.siamese,
            ),
            r,
        );
        sets.insert((r.instrument.clone(), r.split));
        horizons.insert(r.horizon);
    }
    (map, sets, horizons)
}

/// Paired per-test-set metric vectors for two combinations; `None`
/// unless both sides are present on every test set.
fn paired_series(
    records: &[EvalRecord],
    metric: MetricKind,
    horizon: usize,
    a: (Arch, FeatureKind, bool),
    b: (Arch, FeatureKind, bool),
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (map, sets, _) = index_records(records);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (instrument, split) in sets {
        let key = (instrument, split, horizon);
        let ra = map.get(&(key.clone(), a.0, a.1, a.2))?;
        let rb = map.get(&(key, b.0, b.1, b.2))?;
        xs.push(metric_of(ra, metric));
        ys.push(metric_of(rb, metric));
    }
    Some((xs, ys))
}

/// Win tables for the two comparisons: inputs at fixed method, methods
/// at fixed input. Wins are strict comparisons of per-test-set MAE.
pub fn compute_win_tables(records: &[EvalRecord]) -> WinTables {
    let (_, _, horizons) = index_records(records);
    let archs: BTreeSet<Arch> = records.iter().map(|r| r.arch).collect();
    let mut tables = WinTables::default();
    for &h in &horizons {
        for &arch in &archs {
            for siamese in [false, true] {
                if let Some((lob, ofi)) = paired_series(
                    records,
                    MetricKind::Mae,
                    h,
                    (arch, FeatureKind::Lob, siamese),
                    (arch, FeatureKind::Ofi, siamese),
                ) {
                    let (lob_wins, ofi_wins) = win_counts(&lob, &ofi).expect("paired lengths");
                    tables.feature.push(FeatureWins {
                        arch,
                        siamese,
                        horizon: h,
                        lob: lob_wins,
                        ofi: ofi_wins,
                    });
                }
            }
            for feature in [FeatureKind::Lob, FeatureKind::Ofi] {
                if let Some((orig, siam)) = paired_series(
                    records,
                    MetricKind::Mae,
                    h,
                    (arch, feature, false),
                    (arch, feature, true),
                ) {
                    let (orig_wins, siam_wins) = win_counts(&orig, &siam).expect("paired lengths");
                    tables.method.push(MethodWins {
                        arch,
                        feature,
                        horizon: h,
                        original: orig_wins,
                        siamese: siam_wins,
                    });
                }
            }
        }
    }
    tables
}

/// All three regression families. Entries that cannot be fitted (fewer
/// than two test sets, or a constant explanatory series) are skipped.
pub fn compute_regressions(
    records: &[EvalRecord],
    volatility: &[VolatilityRow],
) -> RegressionReport {
    let (map, sets, horizons) = index_records(records);
    let archs: BTreeSet<Arch> = records.iter().map(|r| r.arch).collect();
    let mut report = RegressionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        ..RegressionReport::default()
    };

    let vol: BTreeMap<(String, usize, usize), &VolatilityRow> = volatility
        .iter()
        .map(|v| ((v.instrument.clone(), v.split, v.horizon), v))
        .collect();

    for &h in &horizons {
        for &arch in &archs {
            for metric in [MetricKind::Mae, MetricKind::R2] {
                for siamese in [false, true] {
                    if let Some((xs, ys)) = paired_series(
                        records,
                        metric,
                        h,
                        (arch, FeatureKind::Lob, siamese),
                        (arch, FeatureKind::Ofi, siamese),
                    ) {
                        if let Ok(fit) = ols_fit(&xs, &ys) {
                            report.feature_effect.push(RegressionEntry {
                                arch,
                                horizon: h,
                                metric,
                                siamese: Some(siamese),
                                feature: None,
                                stat: None,
                                slope: fit.slope,
                                intercept: fit.intercept,
                                points: fit.points,
                            });
                        }
                    }
                }
                for feature in [FeatureKind::Lob, FeatureKind::Ofi] {
                    if let Some((xs, ys)) = paired_series(
                        records,
                        metric,
                        h,
                        (arch, feature, false),
                        (arch, feature, true),
                    ) {
                        if let Ok(fit) = ols_fit(&xs, &ys) {
                            report.method_effect.push(RegressionEntry {
                                arch,
                                horizon: h,
                                metric,
                                siamese: None,
                                feature: Some(feature),
                                stat: None,
                                slope: fit.slope,
                                intercept: fit.intercept,
                                points: fit.points,
                            });
                        }
                    }
                }
                for feature in [FeatureKind::Lob, FeatureKind::Ofi] {
                    for siamese in [false, true] {
                        for stat in [VolStat::Ac, VolStat::Std] {
                            let mut xs = Vec::new();
                            let mut ys = Vec::new();
                            for (instrument, split) in &sets {
                                let rec = map.get(&(
                                    (instrument.clone(), *split, h),
                                    arch,
                                    feature,
                                    siamese,
                                ));
                                let v = vol.get(&(instrument.clone(), *split, h));
                                if let (Some(rec), Some(v)) = (rec, v) {
                                    xs.push(match stat {
                                        VolStat::Ac => v.ac,
                                        VolStat::Std => v.std,
                                    });
                                    ys.push(metric_of(rec, metric));
                                }
                            }
                            if let Ok(fit) = ols_fit(&xs, &ys) {
                                report.volatility_effect.push(RegressionEntry {
                                    arch,
                                    horizon: h,
                                    metric,
                                    siamese: Some(siamese),
                                    feature: Some(feature),
                                    stat: Some(stat),
                                    slope: fit.slope,
                                    intercept: fit.intercept,
                                    points: fit.points,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    report
}

fn canonical_order(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| {
        (
            &a.instrument,
            a.split,
            a.horizon,
            a.feature,
            a.arch,
            a.siamese,
        )
            .cmp(&(&b.instrument, b.split, b.horizon, b.feature, b.arch, b.siamese))
    });
}

fn metrics_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.instrument, r.split, r.arch, r.feature, r.siamese, r.horizon, r.mae, r.mse, r.r2
        ));
    }
    out
}

/// Parse a metrics.csv produced by [`emit_report`]; the round trip is
/// exact because floats are printed in shortest-roundtrip form.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EvalRecord>, EvalError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(EvalError::BadCsv(format!(
                "bad header {other:?}, expected {METRICS_HEADER:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(EvalError::BadCsv(format!(
                "line {}: expected 9 fields, found {}",
                i + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, EvalError> {
            s.parse()
                .map_err(|_| EvalError::BadCsv(format!("line {}: bad {what} {s:?}", i + 2)))
        };
        records.push(EvalRecord {
            instrument: fields[0].to_string(),
            split: fields[1]
                .parse()
                .map_err(|_| EvalError::BadCsv(format!("line {}: bad split", i + 2)))?,
            arch: fields[2]
                .parse()
                .map_err(|e| EvalError::BadCsv(format!("line {}: {e}", i + 2)))?,
            feature: fields[3]
                .parse()
                .map_err(|e| EvalError::BadCsv(format!("line {}: {e}", i + 2)))?,
            siamese: fields[4]
                .parse()
                .map_err(|_| EvalError::BadCsv(format!("line {}: bad siamese flag", i + 2)))?,
            horizon: fields[5]
                .parse()
                .map_err(|_| EvalError::BadCsv(format!("line {}: bad horizon", i + 2)))?,
            mae: parse_f(fields[6], "mae")?,
            mse: parse_f(fields[7], "mse")?,
            r2: parse_f(fields[8], "r2")?,
        });
    }
    Ok(records)
}

fn volatility_csv(rows: &[VolatilityRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| {
        (&a.instrument, a.split, a.horizon).cmp(&(&b.instrument, b.split, b.horizon))
    });
    let mut out = String::from("instrument,split,horizon,ac,std\n");
    for v in sorted {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            v.instrument, v.split, v.horizon, v.ac, v.std
        ));
    }
    out
}

fn horizon_summary(records: &[EvalRecord], horizon: usize) -> String {
    let mut acc: BTreeMap<(FeatureKind, Arch, bool), (f64, f64, f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.horizon == horizon) {
        let e = acc.entry((r.feature, r.arch, r.siamese)).or_insert((0.0, 0.0, 0.0, 0));
        e.0 += r.mae;
        e.1 += r.mse;
        e.2 += r.r2;
        e.3 += 1;
    }
    let mut out = String::from("arch,feature,siamese,mean_mae,mean_mse,mean_r2\n");
    for ((feature, arch, siamese), (mae, mse, r2, n)) in acc {
        let n = n as f64;
        out.push_str(&format!(
            "{arch},{feature},{siamese},{},{},{}\n",
            mae / n,
            mse / n,
            r2 / n
        ));
    }
    out
}

/// Write every report file under `dir`. Refuses an empty grid before
/// touching the filesystem; emission over equal inputs is
/// byte-identical.
pub fn emit_report(
    records: &[EvalRecord],
    ranks: &RankReport,
    regressions: &RegressionReport,
    volatility: &[VolatilityRow],
    dir: &Path,
) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("metrics grid"));
    }
    std::fs::create_dir_all(dir)?;
    let mut sorted = records.to_vec();
    canonical_order(&mut sorted);
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&sorted))?;

    let mut ranks_json = serde_json::to_vec_pretty(ranks)?;
    ranks_json.push(b'\n');
    std::fs::write(dir.join("ranks.json"), ranks_json)?;

    let mut reg_json = serde_json::to_vec_pretty(regressions)?;
    reg_json.push(b'\n');
    std::fs::write(dir.join("regressions.json"), reg_json)?;

    std::fs::write(dir.join("volatility.csv"), volatility_csv(volatility))?;

    let horizons: BTreeSet<usize> = sorted.iter().map(|r| r.horizon).collect();
    for h in horizons {
        std::fs::write(
            dir.join(format!("summary_h{h}.csv")),
            horizon_summary(&sorted, h),
        )?;
    }
    Ok(())
}
