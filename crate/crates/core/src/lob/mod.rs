//! Level-II order book ingest: domain types, validation, CSV parsing
//! and serialization, and a deterministic synthetic generator.

mod csv;
mod synth;

use std::fmt;
use std::str::FromStr;

pub use csv::{parse_lob_csv, serialize_lob_csv};
pub use synth::{synth_generate, SynthConfig};

/// Book depth on each side.
pub const TIERS: usize = 10;

/// Price grid: 0.01 CNY.
pub const TICK_SIZE: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum LobError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: tick index {found} where {expected} was expected")]
    Sequencing {
        line: usize,
        found: i64,
        expected: i64,
    },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<LobError>,
    },
    #[error("tick {tick}: crossed book (bid1 {bid:.2} >= ask1 {ask:.2})")]
    CrossedBook { tick: usize, bid: f64, ask: f64 },
    #[error("tick {tick}: {side} prices not strictly {order} at tier {tier}")]
    NonMonotonePrices {
        tick: usize,
        side: Side,
        order: &'static str,
        tier: usize,
    },
    #[error("tick {tick}: negative {side} volume {volume} at tier {tier}")]
    NegativeVolume {
        tick: usize,
        side: Side,
        tier: usize,
        volume: f64,
    },
    #[error("tick {tick}: price {price} is not a positive multiple of 0.01")]
    OffGridPrice { tick: usize, price: f64 },
    #[error("day {date}: {msg}")]
    BadDay { date: Date, msg: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Ask,
    Bid,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Ask => write!(f, "ask"),
            Side::Bid => write!(f, "bid"),
        }
    }
}

/// Calendar day, ISO-ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Date {
    pub year: u16,
    pub month: u8,
    pub day: u8,
}

impl Date {
    pub fn new(year: u16, month: u8, day: u8) -> Self {
        let d = Self { year, month, day };
        assert!(
            month >= 1 && month <= 12 && day >= 1 && day <= d.days_in_month(),
            "invalid date {year:04}-{month:02}-{day:02}"
        );
        d
    }

    fn days_in_month(&self) -> u8 {
        match self.month {
            1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
            4 | 6 | 9 | 11 => 30,
            2 => {
                let y = self.year;
                if (y % 4 == 0 && y % 100 != 0) || y % 400 == 0 {
                    29
                } else {
                    28
                }
            }
            _ => unreachable!(),
        }
    }

    /// Next calendar day.
    pub fn next(self) -> Self {
        if self.day < self.days_in_month() {
            Self {
                day: self.day + 1,
                ..self
            }
        } else if self.month < 12 {
            Self {
                year: self.year,
                month: self.month + 1,
                day: 1,
            }
        } else {
            Self {
                year: self.year + 1,
                month: 1,
                day: 1,
            }
        }
    }
}

impl fmt::Display for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl FromStr for Date {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(format!("bad date {s:?}"));
        }
        let year: u16 = parts[0].parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month: u8 = parts[1].parse().map_err(|_| format!("bad month in {s:?}"))?;
        let day: u8 = parts[2].parse().map_err(|_| format!("bad day in {s:?}"))?;
        let d = Date { year, month, day };
        if month < 1 || month > 12 || day < 1 || day > d.days_in_month() {
            return Err(format!("date {s:?} out of range"));
        }
        Ok(d)
    }
}

/// One book state: ten ask and ten bid tiers of (price, volume).
#[derive(Debug, Clone, PartialEq)]
pub struct LobSnapshot {
    pub tick_index: usize,
    pub ask_prices: [f64; TIERS],
    pub ask_volumes: [f64; TIERS],
    pub bid_prices: [f64; TIERS],
    pub bid_volumes: [f64; TIERS],
}

impl LobSnapshot {
    pub fn validate(&self) -> Result<(), LobError> {
        let tick = self.tick_index;
        for (side, prices) in [(Side::Ask, &self.ask_prices), (Side::Bid, &self.bid_prices)] {
            for (tier, &p) in prices.iter().enumerate() {
                if !on_tick_grid(p) {
                    return Err(LobError::OffGridPrice { tick, price: p });
                }
                if tier > 0 {
                    let prev = prices[tier - 1];
                    let ok = match side {
                        Side::Ask => p > prev,
                        Side::Bid => p < prev,
                    };
                    if !ok {
                        return Err(LobError::NonMonotonePrices {
                            tick,
                            side,
                            order: match side {
                                Side::Ask => "increasing",
                                Side::Bid => "decreasing",
                            },
                            tier: tier + 1,
                        });
                    }
                }
            }
        }
        if self.bid_prices[0] >= self.ask_prices[0] {
            return Err(LobError::CrossedBook {
                tick,
                bid: self.bid_prices[0],
                ask: self.ask_prices[0],
            });
        }
        for (side, volumes) in [
            (Side::Ask, &self.ask_volumes),
            (Side::Bid, &self.bid_volumes),
        ] {
            for (tier, &v) in volumes.iter().enumerate() {
                if v < 0.0 || !v.is_finite() {
                    return Err(LobError::NegativeVolume {
                        tick,
                        side,
                        tier: tier + 1,
                        volume: v,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Checks every snapshot invariant and passes the value through.
pub fn validate_snapshot(s: LobSnapshot) -> Result<LobSnapshot, LobError> {
    s.validate()?;
    Ok(s)
}

/// Whether a price sits on the positive 0.01 grid.
pub fn on_tick_grid(price: f64) -> bool {
    if !(price.is_finite() && price > 0.0) {
        return false;
    }
    let ticks = price / TICK_SIZE;
    (ticks - ticks.round()).abs() < 1e-6
}

/// Nearest grid price.
pub fn round_to_tick(price: f64) -> f64 {
    (price / TICK_SIZE).round() * TICK_SIZE
}

/// One trading day: previous close plus an ordered, gap-free tick series.
#[derive(Debug, Clone, PartialEq)]
pub struct TradingDay {
    pub date: Date,
    pub prev_close: f64,
    pub snapshots: Vec<LobSnapshot>,
}

impl TradingDay {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Chronologically ordered days for one instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentSeries {
    pub instrument_id: String,
    pub days: Vec<TradingDay>,
}

impl InstrumentSeries {
    /// Total snapshot count across days.
    pub fn total_ticks(&self) -> usize {
        self.days.iter().map(|d| d.len()).sum()
    }
}

#[cfg(test)]
pub(crate) fn canonical_snapshot(tick_index: usize) -> LobSnapshot {
    let mut s = LobSnapshot {
        tick_index,
        ask_prices: [0.0; TIERS],
        ask_volumes: [100.0; TIERS],
        bid_prices: [0.0; TIERS],
        bid_volumes: [100.0; TIERS],
    };
    for k in 0..TIERS {
        s.ask_prices[k] = 10.01 + 0.01 * k as f64;
        s.bid_prices[k] = 10.00 - 0.01 * k as f64;
    }
    s
}
