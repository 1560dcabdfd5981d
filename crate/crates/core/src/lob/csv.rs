//! Tick CSV format, one file per instrument.
//!
//! `date,tick,a1,va1,b1,vb1,...,a10,va10,b10,vb10,prev_close`: prices
//! with two fraction digits, volumes as plain integers. The header row
//! is required and checked verbatim.

use std::io::{BufRead, BufReader, Read, Write};

use crate::lob::{Date, InstrumentSeries, LobError, LobSnapshot, TradingDay, TIERS};

pub(crate) const COLUMNS: usize = 2 + 4 * TIERS + 1;

fn header() -> String {
    let mut cols = vec!["date".to_string(), "tick".to_string()];
    for k in 1..=TIERS {
        cols.push(format!("a{k}"));
        cols.push(format!("va{k}"));
        cols.push(format!("b{k}"));
        cols.push(format!("vb{k}"));
    }
    cols.push("prev_close".to_string());
    cols.join(",")
}

/// Parse one instrument's tick file. Rows are grouped into days by the
/// date column; every snapshot is validated on the way in.
pub fn parse_lob_csv<R: Read>(instrument_id: &str, source: R) -> Result<InstrumentSeries, LobError> {
    let reader = BufReader::new(source);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines.next().ok_or_else(|| LobError::Parse {
        line: 1,
        msg: "empty input, expected header".to_string(),
    })?;
    let first = first?;
    if first.trim_end() != header() {
        return Err(LobError::Parse {
            line: 1,
            msg: format!("bad header, expected {:?}", header()),
        });
    }

    let mut days: Vec<TradingDay> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != COLUMNS {
            return Err(LobError::Parse {
                line: line_no,
                msg: format!("expected {COLUMNS} columns, found {}", fields.len()),
            });
        }
        let date: Date = fields[0].parse().map_err(|e| LobError::Parse {
            line: line_no,
            msg: e,
        })?;
        let tick: i64 = parse_num(fields[1], "tick", line_no)?;
        let prev_close: f64 = parse_num(fields[COLUMNS - 1], "prev_close", line_no)?;

        let mut snap = LobSnapshot {
            tick_index: 0,
            ask_prices: [0.0; TIERS],
            ask_volumes: [0.0; TIERS],
            bid_prices: [0.0; TIERS],
            bid_volumes: [0.0; TIERS],
        };
        for k in 0..TIERS {
            let base = 2 + 4 * k;
            snap.ask_prices[k] = parse_num(fields[base], "ask price", line_no)?;
            snap.ask_volumes[k] = parse_volume(fields[base + 1], "ask volume", line_no)?;
            snap.bid_prices[k] = parse_num(fields[base + 2], "bid price", line_no)?;
            snap.bid_volumes[k] = parse_volume(fields[base + 3], "bid volume", line_no)?;
        }

        let start_new_day = match days.last() {
            None => true,
            Some(day) => day.date != date,
        };
        if start_new_day {
            if let Some(prev) = days.last() {
                if date <= prev.date {
                    return Err(LobError::Parse {
                        line: line_no,
                        msg: format!("date {date} not after previous day {}", prev.date),
                    });
                }
            }
            if tick != 0 {
                return Err(LobError::Sequencing {
                    line: line_no,
                    found: tick,
                    expected: 0,
                });
            }
            days.push(TradingDay {
                date,
                prev_close,
                snapshots: Vec::new(),
            });
        }
        let day = days.last_mut().expect("day exists");
        let expected = day.snapshots.len() as i64;
        if tick != expected {
            return Err(LobError::Sequencing {
                line: line_no,
                found: tick,
                expected,
            });
        }
        if (day.prev_close - prev_close).abs() > 1e-9 {
            return Err(LobError::Parse {
                line: line_no,
                msg: format!(
                    "prev_close {prev_close} disagrees with {} earlier in the day",
                    day.prev_close
                ),
            });
        }
        snap.tick_index = tick as usize;
        snap.validate().map_err(|e| LobError::AtLine {
            line: line_no,
            source: Box::new(e),
        })?;
        day.snapshots.push(snap);
    }

    Ok(InstrumentSeries {
        instrument_id: instrument_id.to_string(),
        days,
    })
}

fn parse_num<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<T, LobError> {
    field.parse().map_err(|_| LobError::Parse {
        line,
        msg: format!("bad {what} {field:?}"),
    })
}

fn parse_volume(field: &str, what: &str, line: usize) -> Result<f64, LobError> {
    let v: i64 = parse_num(field, what, line)?;
    Ok(v as f64)
}

/// Write a series in the tick CSV format. `parse_lob_csv` of the output
/// reproduces the input field for field.
pub fn serialize_lob_csv<W: Write>(series: &InstrumentSeries, out: &mut W) -> Result<(), LobError> {
    writeln!(out, "{}", header())?;
    for day in &series.days {
        for snap in &day.snapshots {
            write!(out, "{},{}", day.date, snap.tick_index)?;
            for k in 0..TIERS {
                write!(
                    out,
                    ",{:.2},{},{:.2},{}",
                    snap.ask_prices[k],
                    snap.ask_volumes[k] as i64,
                    snap.bid_prices[k],
                    snap.bid_volumes[k] as i64
                )?;
            }
            writeln!(out, ",{:.2}", day.prev_close)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lob::canonical_snapshot;

    fn one_row_csv() -> String {
        let series = InstrumentSeries {
            instrument_id: "T1".to_string(),
            days: vec![TradingDay {
                date: Date::new(2021, 1, 6),
                prev_close: 10.00,
                snapshots: vec![canonical_snapshot(0)],
            }],
        };
        let mut buf = Vec::new();
        serialize_lob_csv(&series, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn header_plus_one_row_parses_to_one_day_one_snapshot() {
        let text = one_row_csv();
        let series = parse_lob_csv("T1", text.as_bytes()).unwrap();
        assert_eq!(series.days.len(), 1);
        assert_eq!(series.days[0].snapshots.len(), 1);
        assert_eq!(series.days[0].prev_close, 10.00);
    }

    #[test]
    fn short_row_is_a_parse_error_naming_line_two() {
        let text = one_row_csv();
        let mut lines: Vec<&str> = text.lines().collect();
        let truncated = lines[1].rsplit_once(',').unwrap().0.to_string();
        lines[1] = &truncated;
        let joined = lines.join("\n");
        match parse_lob_csv("T1", joined.as_bytes()) {
            Err(LobError::Parse { line: 2, msg }) => {
                assert!(msg.contains("columns"), "{msg}");
            }
            other => panic!("expected parse error on line 2, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_tick_index_is_a_sequencing_error() {
        let text = one_row_csv();
        let row = text.lines().nth(1).unwrap();
        let doubled = format!("{}{}\n", text, row);
        match parse_lob_csv("T1", doubled.as_bytes()) {
            Err(LobError::Sequencing {
                line: 3,
                found: 0,
                expected: 1,
            }) => {}
            other => panic!("expected sequencing error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_names_the_line() {
        let text = one_row_csv().replace("100", "10x");
        match parse_lob_csv("T1", text.as_bytes()) {
            Err(LobError::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_snapshot_is_reported_with_line_context() {
        // swap best bid above best ask
        let text = one_row_csv().replace("10.01,100,10.00,100", "10.01,100,10.50,100");
        match parse_lob_csv("T1", text.as_bytes()) {
            Err(LobError::AtLine { line: 2, .. }) => {}
            other => panic!("expected wrapped validation error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_series_round_trips_through_csv() {
        let cfg = crate::lob::SynthConfig {
            days: 1,
            ticks_min: 4500,
            ticks_max: 4500,
            ..crate::lob::SynthConfig::default()
        };
        let series = crate::lob::synth_generate(&cfg, 99).unwrap();
        let mut first = Vec::new();
        serialize_lob_csv(&series, &mut first).unwrap();
        let parsed = parse_lob_csv("SYN-000", first.as_slice()).unwrap();
        let mut second = Vec::new();
        serialize_lob_csv(&parsed, &mut second).unwrap();
        assert_eq!(first, second);
        assert_eq!(parsed.days[0].len(), series.days[0].len());
    }

    #[test]
    fn serialize_then_parse_round_trips() {
        let text = one_row_csv();
        let series = parse_lob_csv("T1", text.as_bytes()).unwrap();
        let mut buf = Vec::new();
        serialize_lob_csv(&series, &mut buf).unwrap();
        assert_eq!(text, String::from_utf8(buf).unwrap());
    }
}
