//! Feature construction: order-flow vectors, previous-close price
//! normalization, capped labels, sliding windows, side splits, and
//! walk-forward split bookkeeping.

mod cache;
mod splits;

pub use cache::{load_dataset, save_dataset, DatasetManifest, SplitRole};
pub use splits::{rolling_splits, DatasetSplit, WEEK_DAYS};

use crate::autodiff::Array;
use crate::lob::{InstrumentSeries, LobSnapshot, TradingDay, TIERS};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("snapshots are not consecutive ticks (prev {prev}, curr {curr})")]
    NonConsecutiveTicks { prev: usize, curr: usize },
    #[error("label needs ticks {anchor}+1..={anchor}+{horizon} but the day has {len}")]
    LabelOutOfRange {
        anchor: usize,
        horizon: usize,
        len: usize,
    },
    #[error("horizon must be >= 1")]
    ZeroHorizon,
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset cache mismatch: {0}")]
    CacheMismatch(String),
}

/// Which per-tick representation feeds the models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Lob,
    Ofi,
}

impl FeatureKind {
    /// Per-tick input width.
    pub fn width(self) -> usize {
        match self {
            FeatureKind::Lob => 4 * TIERS,
            FeatureKind::Ofi => 2 * TIERS,
        }
    }

    /// Per-tick width of one side after the ask/bid split.
    pub fn side_width(self) -> usize {
        self.width() / 2
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Lob => "lob",
            FeatureKind::Ofi => "ofi",
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lob" => Ok(FeatureKind::Lob),
            "ofi" => Ok(FeatureKind::Ofi),
            other => Err(format!("unknown feature kind {other:?} (expected lob|ofi)")),
        }
    }
}

/// Per-tier signed order flow between two consecutive snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct OfiState {
    pub bof: [f64; TIERS],
    pub aof: [f64; TIERS],
}

impl OfiState {
    /// Row layout used everywhere: bid flows then ask flows.
    pub fn row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(2 * TIERS);
        row.extend_from_slice(&self.bof);
        row.extend_from_slice(&self.aof);
        row
    }

    pub fn is_zero(&self) -> bool {
        self.bof.iter().chain(self.aof.iter()).all(|&v| v == 0.0)
    }
}

/// Average of best ask and best bid.
pub fn mid_price(s: &LobSnapshot) -> f64 {
    (s.ask_prices[0] + s.bid_prices[0]) / 2.0
}

/// Bid/ask order flow between consecutive ticks of one day.
///
/// Per tier: the bid flow is the full volume when the price rose, the
/// volume delta when it held, and the negated volume when it fell; the
/// ask flow mirrors that with the signs flipped.
pub fn compute_of(prev: &LobSnapshot, curr: &LobSnapshot) -> Result<OfiState, FeatureError> {
    if curr.tick_index != prev.tick_index + 1 {
        return Err(FeatureError::NonConsecutiveTicks {
            prev: prev.tick_index,
            curr: curr.tick_index,
        });
    }
    let mut out = OfiState {
        bof: [0.0; TIERS],
        aof: [0.0; TIERS],
    };
    for k in 0..TIERS {
        out.bof[k] = if curr.bid_prices[k] > prev.bid_prices[k] {
            curr.bid_volumes[k]
        } else if curr.bid_prices[k] == prev.bid_prices[k] {
            curr.bid_volumes[k] - prev.bid_volumes[k]
        } else {
            -curr.bid_volumes[k]
        };
        out.aof[k] = if curr.ask_prices[k] > prev.ask_prices[k] {
            -curr.ask_volumes[k]
        } else if curr.ask_prices[k] == prev.ask_prices[k] {
            curr.ask_volumes[k] - prev.ask_volumes[k]
        } else {
            curr.ask_volumes[k]
        };
    }
    Ok(out)
}

/// Subtract the previous close from every price field; volumes and the
/// tick structure are untouched. The output is feature-space only and
/// no longer satisfies ingest-time price invariants.
pub fn normalize_day(day: &TradingDay) -> TradingDay {
    let pc = day.prev_close;
    let mut out = day.clone();
    for snap in &mut out.snapshots {
        for k in 0..TIERS {
            snap.ask_prices[k] -= pc;
            snap.bid_prices[k] -= pc;
        }
    }
    out
}

/// Mean mid-price change over the next `horizon` ticks, capped at
/// ±1 CNY.
pub fn make_label(mids: &[f64], anchor: usize, horizon: usize) -> Result<f64, FeatureError> {
    if horizon == 0 {
        return Err(FeatureError::ZeroHorizon);
    }
    if anchor + horizon >= mids.len() {
        return Err(FeatureError::LabelOutOfRange {
            anchor,
            horizon,
            len: mids.len(),
        });
    }
    let future: f64 = mids[anchor + 1..=anchor + horizon].iter().sum();
    let change = future / horizon as f64 - mids[anchor];
    Ok(change.clamp(-1.0, 1.0))
}

/// One supervised example: a `(delta+1) x width` input window plus its
/// capped target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub inputs: Array<T>,
    pub target: T,
    pub day_index: usize,
    pub anchor: usize,
    pub horizon: usize,
}

/// Samples for one (instrument, feature kind, horizon) slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub instrument_id: String,
    pub kind: FeatureKind,
    pub delta: usize,
    pub horizon: usize,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Window rows per sample.
    pub fn rows(&self) -> usize {
        self.delta + 1
    }

    pub fn cols(&self) -> usize {
        self.kind.width()
    }
}

/// Per-column standardization constants, fitted on training days only.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    fn apply(&self, row: &mut [f64]) {
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - self.mean[i]) / self.std[i];
        }
    }
}

/// Fit standardization constants over the ticks of the given days.
///
/// For raw-book inputs only the volume columns are standardized (the
/// price columns already sit near zero after the previous-close
/// subtraction). For flow inputs every column is standardized.
pub fn column_stats(series: &InstrumentSeries, kind: FeatureKind, days: &[usize]) -> ColumnStats {
    let width = kind.width();
    let mut count = 0usize;
    let mut sum = vec![0.0f64; width];
    let mut sumsq = vec![0.0f64; width];
    let mut push = |row: &[f64]| {
        count += 1;
        for (i, &v) in row.iter().enumerate() {
            sum[i] += v;
            sumsq[i] += v * v;
        }
    };
    for &d in days {
        let day = &series.days[d];
        match kind {
            FeatureKind::Lob => {
                for snap in &day.snapshots {
                    push(&lob_row(snap, day.prev_close));
                }
            }
            FeatureKind::Ofi => {
                for pair in day.snapshots.windows(2) {
                    let of = compute_of(&pair[0], &pair[1]).expect("day ticks are consecutive");
                    push(&of.row());
                }
            }
        }
    }
    let mut stats = ColumnStats::identity(width);
    if count == 0 {
        return stats;
    }
    let scaled_columns: Vec<usize> = match kind {
        // volume columns of the interleaved (a, va, b, vb) tier layout
        FeatureKind::Lob => (0..width).filter(|c| c % 2 == 1).collect(),
        FeatureKind::Ofi => (0..width).collect(),
    };
    let n = count as f64;
    for c in scaled_columns {
        let mean = sum[c] / n;
        let var = (sumsq[c] / n - mean * mean).max(0.0);
        let std = var.sqrt();
        stats.mean[c] = mean;
        stats.std[c] = if std > 0.0 { std } else { 1.0 };
    }
    stats
}

/// Window construction options. Defaults build every anchor of every
/// day with no standardization.
#[derive(Debug, Clone)]
pub struct WindowOptions {
    pub kind: FeatureKind,
    pub delta: usize,
    pub horizon: usize,
    pub stride: usize,
    pub days: Option<Vec<usize>>,
    pub scaling: Option<ColumnStats>,
}

impl WindowOptions {
    pub fn new(kind: FeatureKind, delta: usize, horizon: usize) -> Self {
        Self {
            kind,
            delta,
            horizon,
            stride: 1,
            days: None,
            scaling: None,
        }
    }
}

/// Raw-book input row: per tier (ask price, ask volume, bid price, bid
/// volume) with the previous close subtracted from the prices.
fn lob_row(snap: &LobSnapshot, prev_close: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(4 * TIERS);
    for k in 0..TIERS {
        row.push(snap.ask_prices[k] - prev_close);
        row.push(snap.ask_volumes[k]);
        row.push(snap.bid_prices[k] - prev_close);
        row.push(snap.bid_volumes[k]);
    }
    row
}

/// Build supervised windows day by day; no window crosses a day
/// boundary and every label stays inside its day. Days too short for
/// `delta + horizon` simply contribute nothing.
pub fn build_windows<T: Scalar>(
    series: &InstrumentSeries,
    opts: &WindowOptions,
) -> Result<Vec<Sample<T>>, FeatureError> {
    if opts.horizon == 0 {
        return Err(FeatureError::ZeroHorizon);
    }
    if opts.stride == 0 {
        return Err(FeatureError::ZeroStride);
    }
    let width = opts.kind.width();
    let rows = opts.delta + 1;
    let day_indices: Vec<usize> = match &opts.days {
        Some(days) => days.clone(),
        None => (0..series.days.len()).collect(),
    };
    let mut samples = Vec::new();
    for &di in &day_indices {
        let day = &series.days[di];
        let t_len = day.len();
        let mids: Vec<f64> = day.snapshots.iter().map(mid_price).collect();

        // per-tick rows; for flows, row index t holds the (t-1, t) flow
        let (tick_rows, first_anchor): (Vec<Vec<f64>>, usize) = match opts.kind {
            FeatureKind::Lob => (
                day.snapshots
                    .iter()
                    .map(|s| lob_row(s, day.prev_close))
                    .collect(),
                opts.delta,
            ),
            FeatureKind::Ofi => {
                let mut rows_v = vec![Vec::new()];
                for pair in day.snapshots.windows(2) {
                    let of = compute_of(&pair[0], &pair[1])?;
                    rows_v.push(of.row());
                }
                (rows_v, opts.delta + 1)
            }
        };
        if let Some(stats) = &opts.scaling {
            debug_assert_eq!(stats.mean.len(), width);
        }

        if t_len <= first_anchor + opts.horizon {
            continue;
        }
        let mut anchor = first_anchor;
        while anchor + opts.horizon < t_len {
            let target = make_label(&mids, anchor, opts.horizon)?;
            let mut data = Vec::with_capacity(rows * width);
            for t in anchor - opts.delta..=anchor {
                let mut row = tick_rows[t].clone();
                if let Some(stats) = &opts.scaling {
                    stats.apply(&mut row);
                }
                data.extend(row.into_iter().map(T::from_f64));
            }
            samples.push(Sample {
                inputs: Array::from_vec(&[rows, width], data),
                target: T::from_f64(target),
                day_index: di,
                anchor,
                horizon: opts.horizon,
            });
            anchor += opts.stride;
        }
    }
    Ok(samples)
}

/// Split a window into its ask-side and bid-side halves.
///
/// Raw book: ask half is per tier (ask price, ask volume), bid half is
/// per tier (bid price, bid volume), each `(delta+1) x 2*TIERS`. Flow:
/// ask half is the ask flows, bid half the bid flows, each
/// `(delta+1) x TIERS`.
pub fn split_sides<T: Scalar>(inputs: &Array<T>, kind: FeatureKind) -> (Array<T>, Array<T>) {
    let shape = inputs.shape();
    assert_eq!(shape.len(), 2, "split_sides: expected a matrix");
    let (rows, width) = (shape[0], shape[1]);
    assert_eq!(width, kind.width(), "split_sides: width {width} does not match {kind}");
    let half = kind.side_width();
    let mut ask = Vec::with_capacity(rows * half);
    let mut bid = Vec::with_capacity(rows * half);
    for r in 0..rows {
        let row = &inputs.data()[r * width..(r + 1) * width];
        match kind {
            FeatureKind::Lob => {
                for k in 0..TIERS {
                    ask.push(row[4 * k]);
                    ask.push(row[4 * k + 1]);
                    bid.push(row[4 * k + 2]);
                    bid.push(row[4 * k + 3]);
                }
            }
            FeatureKind::Ofi => {
                bid.extend_from_slice(&row[..TIERS]);
                ask.extend_from_slice(&row[TIERS..]);
            }
        }
    }
    (
        Array::from_vec(&[rows, half], ask),
        Array::from_vec(&[rows, half], bid),
    )
}

/// Inverse of [`split_sides`]: interleave (raw book) or concatenate
/// (flows) the halves back into the canonical row layout.
pub fn reassemble_sides<T: Scalar>(ask: &Array<T>, bid: &Array<T>, kind: FeatureKind) -> Array<T> {
    let rows = ask.shape()[0];
    let half = kind.side_width();
    assert_eq!(ask.shape(), bid.shape(), "reassemble_sides: halves disagree");
    assert_eq!(ask.shape()[1], half, "reassemble_sides: bad half width");
    let width = kind.width();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let arow = &ask.data()[r * half..(r + 1) * half];
        let brow = &bid.data()[r * half..(r + 1) * half];
        match kind {
            FeatureKind::Lob => {
                for k in 0..TIERS {
                    data.push(arow[2 * k]);
                    data.push(arow[2 * k + 1]);
                    data.push(brow[2 * k]);
                    data.push(brow[2 * k + 1]);
                }
            }
            FeatureKind::Ofi => {
                data.extend_from_slice(brow);
                data.extend_from_slice(arow);
            }
        }
    }
    Array::from_vec(&[rows, width], data)
}
