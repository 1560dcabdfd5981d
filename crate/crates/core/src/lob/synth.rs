//! Deterministic synthetic level-II series.
//!
//! The mid walks the 0.01 CNY grid in single-tick steps. Move odds are
//! steered by an EMA of the recent signed order flow, so future drift
//! is (weakly) predictable from observable flow history; `ofi_drift`
//! scales that coupling and 0 turns it off. Tier volumes persist at
//! their price levels when the book shifts, which is what makes the
//! flow series behave like real per-tier deltas.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::lob::{
    round_to_tick, Date, InstrumentSeries, LobError, LobSnapshot, TradingDay, TIERS,
};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub instrument_id: String,
    pub days: usize,
    pub ticks_min: usize,
    pub ticks_max: usize,
    pub initial_mid: f64,
    /// Per-tick probability that the mid moves at all, in (0, 1].
    pub volatility: f64,
    /// Flow-to-drift coupling in [0, 1).
    pub ofi_drift: f64,
    pub start_date: Date,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            instrument_id: "SYN-000".to_string(),
            days: 35,
            ticks_min: 4500,
            ticks_max: 5000,
            initial_mid: 10.00,
            volatility: 0.4,
            ofi_drift: 0.8,
            start_date: Date::new(2021, 1, 4),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), LobError> {
        if self.days == 0 {
            return Err(LobError::InvalidConfig("days must be >= 1".to_string()));
        }
        if self.ticks_min < 4500 || self.ticks_max > 5000 || self.ticks_min > self.ticks_max {
            return Err(LobError::InvalidConfig(format!(
                "ticks range [{}, {}] must sit inside [4500, 5000]",
                self.ticks_min, self.ticks_max
            )));
        }
        if !(self.volatility > 0.0 && self.volatility <= 1.0) {
            return Err(LobError::InvalidConfig(format!(
                "volatility {} must be in (0, 1]",
                self.volatility
            )));
        }
        if !(0.0..1.0).contains(&self.ofi_drift) {
            return Err(LobError::InvalidConfig(format!(
                "ofi_drift {} must be in [0, 1)",
                self.ofi_drift
            )));
        }
        if self.initial_mid < 1.0 || (round_to_tick(self.initial_mid) - self.initial_mid).abs() > 1e-9 {
            return Err(LobError::InvalidConfig(format!(
                "initial_mid {} must be a grid price >= 1.00",
                self.initial_mid
            )));
        }
        Ok(())
    }
}

// flow EMA decay and normalization; keeps the move/flow feedback loop
// well inside the stable region for the default volume scale
const FLOW_DECAY: f64 = 0.95;
const FLOW_SCALE: f64 = 3000.0;
const SPREAD_FLIP_PROB: f64 = 0.02;
const VOLUME_JITTER_PROB: f64 = 0.25;
const MAX_VOLUME: f64 = 1_000_000.0;

struct BookState {
    bid1_ticks: i64,
    spread_ticks: i64,
    ask_volumes: [f64; TIERS],
    bid_volumes: [f64; TIERS],
    ema_flow: f64,
    floor_ticks: i64,
    cap_ticks: i64,
}

fn sample_volume(rng: &mut ChaCha8Rng) -> f64 {
    let dist = LogNormal::new(5.0, 1.0).expect("valid lognormal");
    let v: f64 = dist.sample(rng);
    v.ceil().clamp(1.0, MAX_VOLUME)
}

fn jitter_volume(rng: &mut ChaCha8Rng, v: f64) -> f64 {
    let noise: f64 = Normal::new(0.0, 1.0).expect("valid normal").sample(rng);
    (v + (noise * (0.12 * v + 5.0)).round()).clamp(1.0, MAX_VOLUME)
}

/// Shift a tier array toward the touch: the new best tier is resampled
/// and everything else moves one slot deeper.
fn shift_in(rng: &mut ChaCha8Rng, vols: &mut [f64; TIERS]) {
    for k in (1..TIERS).rev() {
        vols[k] = vols[k - 1];
    }
    vols[0] = sample_volume(rng);
}

/// Shift a tier array away from the touch: tier 1 is consumed and a
/// fresh deepest tier is resampled.
fn shift_out(rng: &mut ChaCha8Rng, vols: &mut [f64; TIERS]) {
    for k in 0..TIERS - 1 {
        vols[k] = vols[k + 1];
    }
    vols[TIERS - 1] = sample_volume(rng);
}

impl BookState {
    fn snapshot(&self, tick_index: usize) -> LobSnapshot {
        let mut s = LobSnapshot {
            tick_index,
            ask_prices: [0.0; TIERS],
            ask_volumes: self.ask_volumes,
            bid_prices: [0.0; TIERS],
            bid_volumes: self.bid_volumes,
        };
        for k in 0..TIERS {
            s.bid_prices[k] = (self.bid1_ticks - k as i64) as f64 / 100.0;
            s.ask_prices[k] = (self.bid1_ticks + self.spread_ticks + k as i64) as f64 / 100.0;
        }
        s
    }

    fn mid(&self) -> f64 {
        (2 * self.bid1_ticks + self.spread_ticks) as f64 / 200.0
    }

    fn evolve(&mut self, rng: &mut ChaCha8Rng, volatility: f64, drift: f64) {
        let signal = (self.ema_flow / FLOW_SCALE).clamp(-1.0, 1.0);
        let p_up = volatility * 0.5 * (1.0 + drift * signal);
        let u: f64 = rng.gen();
        let step: i64 = if u < p_up {
            1
        } else if u < volatility {
            -1
        } else {
            0
        };
        let next = (self.bid1_ticks + step).clamp(self.floor_ticks, self.cap_ticks);
        let bid_shift = next - self.bid1_ticks;
        self.bid1_ticks = next;

        let mut ask_shift = bid_shift;
        if rng.gen::<f64>() < SPREAD_FLIP_PROB {
            let new_spread = rng.gen_range(1..=3i64);
            ask_shift += new_spread - self.spread_ticks;
            self.spread_ticks = new_spread;
        }

        match bid_shift {
            1 => shift_in(rng, &mut self.bid_volumes),
            -1 => shift_out(rng, &mut self.bid_volumes),
            _ => {}
        }
        // ask prices move with bid1 + spread; rising asks expose deeper
        // tiers, falling asks put a fresh level at the touch
        let mut remaining = ask_shift;
        while remaining > 0 {
            shift_out(rng, &mut self.ask_volumes);
            remaining -= 1;
        }
        while remaining < 0 {
            shift_in(rng, &mut self.ask_volumes);
            remaining += 1;
        }

        for vols in [&mut self.bid_volumes, &mut self.ask_volumes] {
            for v in vols.iter_mut() {
                if rng.gen::<f64>() < VOLUME_JITTER_PROB {
                    *v = jitter_volume(rng, *v);
                }
            }
        }
    }

    /// Signed net flow between consecutive snapshots: per-tier bid flow
    /// minus ask flow, positive when pressure points up.
    fn net_flow(prev: &LobSnapshot, curr: &LobSnapshot) -> f64 {
        let mut net = 0.0;
        for k in 0..TIERS {
            net += if curr.bid_prices[k] > prev.bid_prices[k] {
                curr.bid_volumes[k]
            } else if curr.bid_prices[k] == prev.bid_prices[k] {
                curr.bid_volumes[k] - prev.bid_volumes[k]
            } else {
                -curr.bid_volumes[k]
            };
            net -= if curr.ask_prices[k] > prev.ask_prices[k] {
                -curr.ask_volumes[k]
            } else if curr.ask_prices[k] == prev.ask_prices[k] {
                curr.ask_volumes[k] - prev.ask_volumes[k]
            } else {
                curr.ask_volumes[k]
            };
        }
        net
    }
}

/// Generate a synthetic series; byte-identical output for equal
/// `(config, seed)`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<InstrumentSeries, LobError> {
    config.validate()?;
    let mut rng = stream(seed, &format!("synth/{}", config.instrument_id));

    let center = (config.initial_mid * 100.0).round() as i64;
    let mut state = BookState {
        bid1_ticks: center - 1,
        spread_ticks: 2,
        ask_volumes: [0.0; TIERS],
        bid_volumes: [0.0; TIERS],
        ema_flow: 0.0,
        floor_ticks: (center / 2).max(TIERS as i64 + 1),
        cap_ticks: center * 2,
    };
    for k in 0..TIERS {
        state.ask_volumes[k] = sample_volume(&mut rng);
        state.bid_volumes[k] = sample_volume(&mut rng);
    }

    let mut days = Vec::with_capacity(config.days);
    let mut date = config.start_date;
    let mut prev_close = round_to_tick(config.initial_mid);
    let mut last_snapshot: Option<LobSnapshot> = None;

    for _ in 0..config.days {
        let n_ticks = rng.gen_range(config.ticks_min..=config.ticks_max);
        let mut snapshots = Vec::with_capacity(n_ticks);
        for tick in 0..n_ticks {
            if last_snapshot.is_some() {
                state.evolve(&mut rng, config.volatility, config.ofi_drift);
            }
            let snap = state.snapshot(tick);
            if let Some(prev) = &last_snapshot {
                let flow = BookState::net_flow(prev, &snap);
                state.ema_flow = FLOW_DECAY * state.ema_flow + (1.0 - FLOW_DECAY) * flow;
            }
            last_snapshot = Some(snap.clone());
            snapshots.push(snap);
        }
        days.push(TradingDay {
            date,
            prev_close,
            snapshots,
        });
        prev_close = round_to_tick(state.mid());
        date = date.next();
    }

    Ok(InstrumentSeries {
        instrument_id: config.instrument_id.clone(),
        days,
    })
}
