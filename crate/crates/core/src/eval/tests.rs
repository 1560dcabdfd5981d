use super::*;
use crate::rng::stream;
use rand::Rng;

fn record(
    instrument: &str,
    split: usize,
    arch: Arch,
    feature: FeatureKind,
    siamese: bool,
    horizon: usize,
    mse: f64,
) -> EvalRecord {
    EvalRecord {
        instrument: instrument.to_string(),
        split,
        arch,
        feature,
        siamese,
        horizon,
        mae: mse.sqrt(),
        mse,
        r2: 1.0 - mse,
    }
}

fn all_combos() -> Vec<(Arch, FeatureKind, bool)> {
    let mut combos = Vec::new();
    for feature in [FeatureKind::Lob, FeatureKind::Ofi] {
        for arch in Arch::ALL {
            for siamese in [false, true] {
                combos.push((arch, feature, siamese));
            }
        }
    }
    combos
}

#[test]
fn error_metrics_match_hand_arithmetic() {
    let (mae, mse) = mae_mse(&[0.0f64, 0.0], &[0.0, 0.0]).unwrap();
    assert_eq!((mae, mse), (0.0, 0.0));
    let (mae, mse) = mae_mse(&[0.1f64, -0.1], &[0.0, 0.0]).unwrap();
    assert!((mae - 0.1).abs() < 1e-15);
    assert!((mse - 0.01).abs() < 1e-15);
    assert!(matches!(
        mae_mse(&[0.0], &[0.0, 1.0]),
        Err(EvalError::LengthMismatch { .. })
    ));
    assert!(matches!(
        mae_mse::<f64>(&[], &[]),
        Err(EvalError::Empty(_))
    ));
}

#[test]
fn squared_error_dominates_squared_absolute_error() {
    let mut rng = stream(5, "jensen");
    for _ in 0..50 {
        let n = rng.gen_range(1..30);
        let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mae, mse) = mae_mse(&preds, &targets).unwrap();
        assert!(mse >= mae * mae - 1e-15);
    }
}

#[test]
fn out_of_sample_r2_identities() {
    let targets = [0.3f64, -0.2, 0.5, 0.1];
    assert!((r2_os(&targets, &targets).unwrap() - 1.0).abs() < 1e-12);

    let mean = targets.iter().sum::<f64>() / 4.0;
    let mean_preds = [mean; 4];
    assert!(r2_os(&mean_preds, &targets).unwrap().abs() < 1e-12);

    // model error exactly half the benchmark error
    let targets = [0.0, 2.0];
    let half = 0.5f64.sqrt();
    let preds = [half, 2.0 - half];
    assert!((r2_os(&preds, &targets).unwrap() - 0.5).abs() < 1e-12);

    assert!(matches!(
        r2_os(&[1.0, 1.0], &[2.0, 2.0]),
        Err(EvalError::DegenerateBenchmark)
    ));
}

#[test]
fn mean_predictor_scores_zero_on_random_targets() {
    let mut rng = stream(17, "r2-mean");
    for _ in 0..50 {
        let n = rng.gen_range(2..60);
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = targets.iter().sum::<f64>() / n as f64;
        let preds = vec![mean; n];
        match r2_os(&preds, &targets) {
            Ok(r2) => assert!(r2.abs() < 1e-12, "{r2}"),
            Err(EvalError::DegenerateBenchmark) => {}
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn single_test_set_distinct_errors_rank_cleanly() {
    let combos = all_combos();
    let records: Vec<EvalRecord> = combos
        .iter()
        .enumerate()
        .map(|(i, &(arch, feature, siamese))| {
            record("A", 0, arch, feature, siamese, 10, (i + 1) as f64)
        })
        .collect();
    let table = rank_scores(&records, RankMetric::Mse).unwrap();
    assert_eq!(table.entries.len(), 20);
    for (i, &(arch, feature, siamese)) in combos.iter().enumerate() {
        let entry = table
            .entries
            .iter()
            .find(|e| e.arch == arch && e.feature == feature && e.siamese == siamese)
            .unwrap();
        assert_eq!(entry.score, 1.0 / (i + 1) as f64);
        assert_eq!(entry.ranks, vec![(i + 1) as f64]);
    }
}

#[test]
fn scores_average_reciprocal_ranks_across_test_sets() {
    // two combinations, two test sets; the first is ranked 1 then 2
    let mut records = Vec::new();
    for (split, (a, b)) in [(0usize, (1.0, 2.0)), (1, (2.0, 1.0))] {
        records.push(record("A", split, Arch::Mlp, FeatureKind::Lob, false, 10, a));
        records.push(record("A", split, Arch::StackedLstm, FeatureKind::Lob, false, 10, b));
    }
    let table = rank_scores(&records, RankMetric::Mse).unwrap();
    for e in &table.entries {
        assert!((e.score - (1.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    // ranks 1 and 4 over two test sets -> (1 + 1/4) / 2
    let mut records = Vec::new();
    for (i, &(arch, feature, siamese)) in all_combos().iter().enumerate() {
        records.push(record("A", 0, arch, feature, siamese, 10, (i + 1) as f64));
        // shuffle the target combo (index 0) to rank 4 on the second set
        let mse2 = if i == 0 {
            4.5
        } else if i <= 3 {
            i as f64
        } else {
            (i + 1) as f64
        };
        records.push(record("A", 1, arch, feature, siamese, 10, mse2));
    }
    let table = rank_scores(&records, RankMetric::Mse).unwrap();
    let first = all_combos()[0];
    let entry = table
        .entries
        .iter()
        .find(|e| e.arch == first.0 && e.feature == first.1 && e.siamese == first.2)
        .unwrap();
    assert!((entry.score - 0.625).abs() < 1e-15);
}

#[test]
fn full_tie_shares_the_middle_rank() {
    let records: Vec<EvalRecord> = all_combos()
        .iter()
        .map(|&(arch, feature, siamese)| record("A", 0, arch, feature, siamese, 10, 3.0))
        .collect();
    let table = rank_scores(&records, RankMetric::Mse).unwrap();
    for e in &table.entries {
        assert_eq!(e.ranks, vec![10.5]);
        assert!((e.score - 1.0 / 10.5).abs() < 1e-15);
    }
}

#[test]
fn missing_combination_is_named() {
    // second test set lacks the last combination of the first
    let mut records: Vec<EvalRecord> = all_combos()
        .iter()
        .flat_map(|&(arch, feature, siamese)| {
            [
                record("A", 0, arch, feature, siamese, 10, 1.0),
                record("A", 1, arch, feature, siamese, 10, 2.0),
            ]
        })
        .collect();
    records.pop();
    match rank_scores(&records, RankMetric::Mse) {
        Err(EvalError::IncompleteGrid {
            combo, test_set, ..
        }) => {
            assert!(combo.contains("siamese"), "{combo}");
            assert_eq!(test_set, "A/1");
        }
        other => panic!("expected incomplete grid, got {other:?}"),
    }
}

#[test]
fn fourteen_instruments_with_mixed_split_counts_give_149_test_sets() {
    // nine instruments contribute 11 walk-forward windows and five
    // contribute 10, matching a ~17-week span per instrument
    let mut records = Vec::new();
    for i in 0..14usize {
        let splits = if i < 9 { 11 } else { 10 };
        for split in 0..splits {
            records.push(record(&format!("I{i:02}"), split, Arch::Mlp, FeatureKind::Lob, false, 10, 1.0));
        }
    }
    let table = rank_scores(&records, RankMetric::Mse).unwrap();
    assert_eq!(table.test_sets.len(), 149);
    assert_eq!(table.entries[0].ranks.len(), 149);
}

#[test]
fn win_counting_is_strict() {
    assert_eq!(win_counts(&[0.1, 0.2], &[0.15, 0.15]).unwrap(), (1, 1));
    assert_eq!(win_counts(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), (0, 0));
    let mut rng = stream(2, "wins");
    for _ in 0..20 {
        let n = rng.gen_range(1..20);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (wa, wb) = win_counts(&a, &b).unwrap();
        assert!(wa + wb <= n);
    }
    assert!(win_counts(&[0.0], &[]).is_err());
}

#[test]
fn least_squares_closed_form() {
    let fit = ols_fit(&[0.0, 1.0], &[1.0, 3.0]).unwrap();
    assert_eq!(fit.slope, 2.0);
    assert_eq!(fit.intercept, 1.0);

    let xs = [0.5f64, 1.5, -2.0, 3.0];
    let fit = ols_fit(&xs, &xs).unwrap();
    assert!((fit.slope - 1.0).abs() < 1e-12);
    assert!(fit.intercept.abs() < 1e-12);

    // adding a constant to y moves only the intercept
    let ys: Vec<f64> = xs.iter().map(|x| 0.7 * x - 0.2).collect();
    let shifted: Vec<f64> = ys.iter().map(|y| y + 2.5).collect();
    let f1 = ols_fit(&xs, &ys).unwrap();
    let f2 = ols_fit(&xs, &shifted).unwrap();
    assert!((f1.slope - f2.slope).abs() < 1e-12);
    assert!((f2.intercept - f1.intercept - 2.5).abs() < 1e-12);

    assert!(matches!(
        ols_fit(&[1.0, 1.0], &[0.0, 5.0]),
        Err(EvalError::DegenerateRegressor)
    ));
    assert!(matches!(ols_fit(&[1.0], &[1.0]), Err(EvalError::TooFewPoints(1))));
}

#[test]
fn volatility_indicators() {
    let v = volatility_stats(&[1.0, -1.0]).unwrap();
    assert_eq!((v.ac, v.std), (1.0, 1.0));
    let v = volatility_stats(&[0.5, 0.5, 0.5]).unwrap();
    assert_eq!((v.ac, v.std), (0.0, 0.0));
    let mut rng = stream(8, "vol");
    for _ in 0..30 {
        let n = rng.gen_range(1..40);
        let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = volatility_stats(&labels).unwrap();
        assert!(v.ac <= v.std + 1e-15);
    }
}

#[test]
fn report_emission_is_deterministic_and_round_trips() {
    let records: Vec<EvalRecord> = all_combos()
        .iter()
        .enumerate()
        .flat_map(|(i, &(arch, feature, siamese))| {
            [10usize, 20].map(|h| {
                record("A", 0, arch, feature, siamese, h, 0.001 * (i + 1) as f64)
            })
        })
        .collect();
    let table = rank_scores(&records, RankMetric::Mse).unwrap();
    let wins = compute_win_tables(&records);
    let vol = vec![
        VolatilityRow {
            instrument: "A".into(),
            split: 0,
            horizon: 10,
            ac: 0.01,
            std: 0.013,
        },
        VolatilityRow {
            instrument: "A".into(),
            split: 0,
            horizon: 20,
            ac: 0.014,
            std: 0.019,
        },
    ];
    let regressions = compute_regressions(&records, &vol);
    let ranks = RankReport {
        schema_version: REPORT_SCHEMA_VERSION,
        table,
        wins,
    };

    let dir = tempfile::tempdir().unwrap();
    emit_report(&records, &ranks, &regressions, &vol, dir.path()).unwrap();
    let first = std::fs::read(dir.path().join("metrics.csv")).unwrap();
    emit_report(&records, &ranks, &regressions, &vol, dir.path()).unwrap();
    let second = std::fs::read(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(first, second);

    let parsed = parse_metrics_csv(std::str::from_utf8(&first).unwrap()).unwrap();
    assert_eq!(parsed.len(), records.len());
    for r in &records {
        assert!(parsed.contains(r), "missing {r:?}");
    }

    for name in ["ranks.json", "regressions.json", "volatility.csv", "summary_h10.csv", "summary_h20.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let ranks_back: RankReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("ranks.json")).unwrap()).unwrap();
    assert_eq!(ranks_back, ranks);
}

#[test]
fn empty_grid_refuses_to_emit() {
    let dir = tempfile::tempdir().unwrap();
    let ranks = RankReport {
        schema_version: REPORT_SCHEMA_VERSION,
        table: RankTable {
            metric: RankMetric::Mse,
            test_sets: Vec::new(),
            entries: Vec::new(),
        },
        wins: WinTables::default(),
    };
    let err = emit_report(&[], &ranks, &RegressionReport::default(), &[], dir.path());
    assert!(matches!(err, Err(EvalError::Empty(_))));
    assert!(!dir.path().join("metrics.csv").exists());
}
