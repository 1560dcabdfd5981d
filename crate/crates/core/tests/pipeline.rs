//! Cross-cutting pipeline properties at miniature scale: results are
//! independent of sibling cells and of the output directory.

use lobnet::experiment::{run_grid, train_grid, ExperimentConfig};

fn micro_config(out: &std::path::Path, architectures: &str) -> ExperimentConfig {
    let text = format!(
        r#"
out_dir = "{}"
delta = 9
horizons = [10]
features = ["ofi"]
architectures = [{architectures}]
siamese = [false]
stride = 300
instruments = ["T0"]

[synth]
days = 35
ticks_min = 4500
ticks_max = 4600

[train]
max_epochs = 2

[model]
hidden = 8
heads = 4
mlp_hidden = [16, 8, 8]
pre_hidden = 16
siamese_hidden = 4
"#,
        out.display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn cell_results_do_not_depend_on_sibling_cells() {
    let dir = tempfile::tempdir().unwrap();
    let solo = micro_config(&dir.path().join("solo"), r#""mlp""#);
    let pair = micro_config(&dir.path().join("pair"), r#""mlp", "lstm""#);

    let solo_records = train_grid(&solo).unwrap();
    let pair_records = train_grid(&pair).unwrap();
    assert_eq!(solo_records.len(), 1);
    assert_eq!(pair_records.len(), 2);

    let solo_mlp = &solo_records[0];
    let pair_mlp = pair_records
        .iter()
        .find(|r| r.arch == lobnet::models::Arch::Mlp)
        .unwrap();
    assert_eq!(solo_mlp.mae.to_bits(), pair_mlp.mae.to_bits());
    assert_eq!(solo_mlp.mse.to_bits(), pair_mlp.mse.to_bits());
    assert_eq!(solo_mlp.r2.to_bits(), pair_mlp.r2.to_bits());

    // the checkpoints themselves are identical
    let cell = "T0_s0_ofi_mlp_orig_h10";
    let a = std::fs::read(dir.path().join("solo/models").join(cell).join("params.bin")).unwrap();
    let b = std::fs::read(dir.path().join("pair/models").join(cell).join("params.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fresh_directories_reproduce_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let first = micro_config(&dir.path().join("a"), r#""mlp""#);
    let second = micro_config(&dir.path().join("b"), r#""mlp""#);

    let report_a = run_grid(&first, false).unwrap();
    let report_b = run_grid(&second, false).unwrap();

    for name in ["metrics.csv", "ranks.json", "regressions.json", "volatility.csv"] {
        let a = std::fs::read(report_a.join(name)).unwrap();
        let b = std::fs::read(report_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between fresh runs");
    }
}
