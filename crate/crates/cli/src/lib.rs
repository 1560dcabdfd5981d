//! Subcommand plumbing for the `lobnet` binary.
//!
//! Exit codes: 0 success, 1 usage, 2 data/validation, 3 numerical
//! failure (non-finite loss or a failed gradient check).

use std::path::PathBuf;

use lobnet::experiment::{
    collect_records, ensure_manifest, featurize_all, load_series, train_grid, write_report,
    ExperimentConfig, GridError,
};
use lobnet::models::{Arch, ModelSizes};
use lobnet::verification::{check_architectures, check_primitives};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const USAGE: &str = "\
usage: lobnet <subcommand> [options]

subcommands:
  synth       generate synthetic tick data under <out>/data
  featurize   build cached train/valid/test datasets
  train       train every missing grid cell (resumable)
  evaluate    collect or recompute per-cell test metrics
  report      aggregate metrics into the report files
  gradcheck   finite-difference check of primitives and architectures

options:
  --config <path>     experiment config (TOML); defaults apply if omitted
  --out <dir>         override the output directory
  --seed <n>          override the global seed
  --horizon <n>       restrict to one forecast horizon
  --arch <name>       restrict to one architecture (mlp|lstm|mlp-lstm|cnn-lstm|lstm-mha)
  --feature <kind>    restrict to one input kind (lob|ofi)
  --siamese <bool>    restrict to one method (true|false)
  --allow-partial     let report/grid runs tolerate missing cells
";

#[derive(Debug)]
struct Invocation {
    command: String,
    config: ExperimentConfig,
    allow_partial: bool,
}

fn usage_error(msg: &str) -> String {
    format!("error: {msg}\n\n{USAGE}")
}

fn parse_args(args: &[String]) -> Result<Invocation, String> {
    let command = args
        .first()
        .ok_or_else(|| usage_error("missing subcommand"))?
        .clone();
    if !matches!(
        command.as_str(),
        "synth" | "featurize" | "train" | "evaluate" | "report" | "gradcheck"
    ) {
        return Err(usage_error(&format!("unknown subcommand {command:?}")));
    }

    let mut config_path: Option<PathBuf> = None;
    let mut out: Option<PathBuf> = None;
    let mut seed: Option<u64> = None;
    let mut horizon: Option<usize> = None;
    let mut arch: Option<Arch> = None;
    let mut feature = None;
    let mut siamese: Option<bool> = None;
    let mut allow_partial = false;

    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| -> Result<&String, String> {
            it.next()
                .ok_or_else(|| usage_error(&format!("{name} requires a value")))
        };
        match flag.as_str() {
            "--config" => config_path = Some(PathBuf::from(value("--config")?)),
            "--out" => out = Some(PathBuf::from(value("--out")?)),
            "--seed" => {
                seed = Some(
                    value("--seed")?
                        .parse()
                        .map_err(|_| usage_error("--seed expects an unsigned integer"))?,
                )
            }
            "--horizon" => {
                horizon = Some(
                    value("--horizon")?
                        .parse()
                        .map_err(|_| usage_error("--horizon expects a positive integer"))?,
                )
            }
            "--arch" => {
                arch = Some(
                    value("--arch")?
                        .parse()
                        .map_err(|e: String| usage_error(&e))?,
                )
            }
            "--feature" => {
                feature = Some(
                    value("--feature")?
                        .parse()
                        .map_err(|e: String| usage_error(&e))?,
                )
            }
            "--siamese" => {
                siamese = Some(
                    value("--siamese")?
                        .parse()
                        .map_err(|_| usage_error("--siamese expects true or false"))?,
                )
            }
            "--allow-partial" => allow_partial = true,
            other => return Err(usage_error(&format!("unknown option {other:?}"))),
        }
    }

    let mut config = match config_path {
        Some(path) => ExperimentConfig::load(&path)
            .map_err(|e| format!("error: cannot load config: {e}"))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = out {
        config.out_dir = out;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(h) = horizon {
        config.horizons = vec![h];
    }
    if let Some(a) = arch {
        config.architectures = vec![a];
    }
    if let Some(f) = feature {
        config.features = vec![f];
    }
    if let Some(s) = siamese {
        config.siamese = vec![s];
    }
    config
        .validate()
        .map_err(|e| format!("error: invalid config: {e}"))?;

    Ok(Invocation {
        command,
        config,
        allow_partial,
    })
}

fn grid_exit(err: &GridError) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

fn run_gradcheck(config: &ExperimentConfig) -> i32 {
    const PRIMITIVE_TOL: f64 = 1e-6;
    const ARCH_TOL: f64 = 1e-4;

    let mut failed = false;
    for check in check_primitives(config.seed) {
        if check.max_rel_err >= PRIMITIVE_TOL {
            eprintln!(
                "primitive {} max_rel_err={:.3e} exceeds {PRIMITIVE_TOL:.0e}",
                check.name, check.max_rel_err
            );
            failed = true;
        }
    }

    let sizes = ModelSizes::reduced(16);
    let checks = check_architectures(&sizes, 8, 4, config.seed);
    for arch in Arch::ALL {
        let worst = checks
            .iter()
            .filter(|c| c.arch == arch)
            .map(|c| c.max_rel_err)
            .fold(0.0f64, f64::max);
        println!("{arch} max_rel_err={worst:.3e}");
        if worst >= ARCH_TOL {
            eprintln!("architecture {arch} exceeds {ARCH_TOL:.0e}");
            failed = true;
        }
    }
    if failed {
        EXIT_NUMERICAL
    } else {
        EXIT_OK
    }
}

/// Dispatch one invocation; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let invocation = match parse_args(args) {
        Ok(inv) => inv,
        Err(msg) => {
            eprintln!("{msg}");
            return EXIT_USAGE;
        }
    };
    let cfg = &invocation.config;

    let outcome: Result<String, GridError> = match invocation.command.as_str() {
        "synth" => ensure_manifest(cfg)
            .and_then(|_| load_series(cfg))
            .map(|series| {
                format!(
                    "generated {} instrument(s) under {}",
                    series.len(),
                    cfg.out_dir.join("data").display()
                )
            }),
        "featurize" => ensure_manifest(cfg)
            .and_then(|_| load_series(cfg))
            .and_then(|series| featurize_all(cfg, &series))
            .map(|_| format!("feature caches ready under {}", cfg.out_dir.join("features").display())),
        "train" => {
            if invocation.allow_partial {
                match train_grid(cfg) {
                    Ok(records) => Ok(format!("{} cells trained or reused", records.len())),
                    Err(GridError::CellsFailed(fails)) => {
                        for f in &fails {
                            eprintln!("failed {}: {}", f.cell, f.message);
                        }
                        Ok(format!("continued past {} failed cells", fails.len()))
                    }
                    Err(e) => Err(e),
                }
            } else {
                train_grid(cfg).map(|records| format!("{} cells trained or reused", records.len()))
            }
        }
        "evaluate" => collect_records(cfg).and_then(|(records, missing)| {
            if !missing.is_empty() && !invocation.allow_partial {
                return Err(GridError::MissingCells(
                    missing.iter().map(|c| c.id()).collect(),
                ));
            }
            Ok(format!(
                "{} cell records available, {} missing",
                records.len(),
                missing.len()
            ))
        }),
        "report" => write_report(cfg, invocation.allow_partial)
            .map(|dir| format!("report written to {}", dir.display())),
        "gradcheck" => return run_gradcheck(cfg),
        _ => unreachable!("subcommand validated"),
    };

    match outcome {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            grid_exit(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn missing_subcommand_is_usage() {
        assert!(parse_args(&[]).is_err());
    }

    #[test]
    fn unknown_subcommand_is_usage() {
        let err = parse_args(&args(&["frobnicate"])).unwrap_err();
        assert!(err.contains("unknown subcommand"));
        assert!(err.contains("usage:"));
    }

    #[test]
    fn overrides_apply() {
        let inv = parse_args(&args(&[
            "train",
            "--seed",
            "9",
            "--horizon",
            "20",
            "--arch",
            "lstm",
            "--feature",
            "ofi",
            "--siamese",
            "true",
            "--out",
            "/tmp/x",
        ]))
        .unwrap();
        assert_eq!(inv.config.seed, 9);
        assert_eq!(inv.config.horizons, vec![20]);
        assert_eq!(inv.config.architectures, vec![Arch::StackedLstm]);
        assert_eq!(inv.config.siamese, vec![true]);
        assert_eq!(inv.config.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn flag_without_value_is_usage() {
        assert!(parse_args(&args(&["synth", "--seed"])).is_err());
        assert!(parse_args(&args(&["synth", "--bogus"])).is_err());
    }
}
