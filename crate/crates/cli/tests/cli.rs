//! End-to-end checks of the `lobnet` binary: exit codes, determinism,
//! and a miniature single-cell pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn lobnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lobnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn synth_config(out: &Path) -> String {
    format!(
        r#"
out_dir = "{}"
instruments = ["T0"]

[synth]
days = 1
ticks_min = 4500
ticks_max = 4600
"#,
        out.display()
    )
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = lobnet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("unknown subcommand"));
    assert!(stderr.contains("usage:"));
}

#[test]
fn missing_flag_value_exits_one() {
    let out = lobnet(&["synth", "--seed"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "not valid toml [");
    let out = lobnet(&["synth", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&out_a, &out_b] {
        let cfg = write_config(dir.path(), &synth_config(out));
        let run = lobnet(&["synth", "--config", &cfg, "--seed", "7"]);
        assert_eq!(run.status.code(), Some(0), "{:?}", String::from_utf8(run.stderr));
    }
    let a = std::fs::read(out_a.join("data/T0.csv")).unwrap();
    let b = std::fs::read(out_b.join("data/T0.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);

    // different seed, different bytes
    let out_c = dir.path().join("c");
    let cfg = write_config(dir.path(), &synth_config(&out_c));
    assert_eq!(lobnet(&["synth", "--config", &cfg, "--seed", "8"]).status.code(), Some(0));
    let c = std::fs::read(out_c.join("data/T0.csv")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn report_refuses_untrained_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
out_dir = "{}"
delta = 9
horizons = [10]
features = ["ofi"]
architectures = ["mlp"]
siamese = [false]
stride = 400
instruments = ["T0"]

[synth]
days = 35

[model]
hidden = 8
heads = 4
mlp_hidden = [16, 8, 8]
pre_hidden = 16
siamese_hidden = 4
"#,
            out.display()
        ),
    );
    let feat = lobnet(&["featurize", "--config", &cfg]);
    assert_eq!(feat.status.code(), Some(0), "{:?}", String::from_utf8(feat.stderr));
    let rep = lobnet(&["report", "--config", &cfg]);
    assert_eq!(rep.status.code(), Some(2));
    let stderr = String::from_utf8(rep.stderr).unwrap();
    assert!(stderr.contains("no results"), "{stderr}");
}

#[test]
fn single_cell_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
out_dir = "{}"
delta = 9
horizons = [10]
features = ["ofi"]
architectures = ["mlp"]
siamese = [false]
stride = 400
instruments = ["T0"]

[synth]
days = 35

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
        ),
    );

    let train = lobnet(&["train", "--config", &cfg]);
    assert_eq!(train.status.code(), Some(0), "{:?}", String::from_utf8(train.stderr));
    // one machine-parsable progress line per epoch on stderr
    let stderr = String::from_utf8(train.stderr).unwrap();
    let epoch_lines: Vec<&str> = stderr
        .lines()
        .filter(|l| !l.starts_with('#') && l.split(',').count() == 4)
        .collect();
    assert_eq!(epoch_lines.len(), 2, "{stderr}");

    let cell = "T0_s0_ofi_mlp_orig_h10";
    assert!(out.join(format!("models/{cell}/params.bin")).exists());
    assert!(out.join(format!("models/{cell}/history.json")).exists());
    assert!(out.join(format!("eval/{cell}.json")).exists());

    let eval = lobnet(&["evaluate", "--config", &cfg]);
    assert_eq!(eval.status.code(), Some(0));

    // a deleted result shard is recomputed from the checkpoint
    std::fs::remove_file(out.join(format!("eval/{cell}.json"))).unwrap();
    let eval = lobnet(&["evaluate", "--config", &cfg]);
    assert_eq!(eval.status.code(), Some(0));
    assert!(out.join(format!("eval/{cell}.json")).exists());

    let report = lobnet(&["report", "--config", &cfg]);
    assert_eq!(report.status.code(), Some(0), "{:?}", String::from_utf8(report.stderr));
    let metrics = std::fs::read_to_string(out.join("report/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "{metrics}");
    assert!(metrics.lines().nth(1).unwrap().starts_with("T0,0,mlp,ofi,false,10,"));
    assert!(out.join("report/ranks.json").exists());
    assert!(out.join("report/regressions.json").exists());
    assert!(out.join("report/volatility.csv").exists());

    // rerunning the whole chain is idempotent
    let again = lobnet(&["train", "--config", &cfg]);
    assert_eq!(again.status.code(), Some(0));
    let metrics_again = std::fs::read_to_string(out.join("report/metrics.csv")).unwrap();
    assert_eq!(metrics, metrics_again);
}

#[test]
fn reused_out_dir_with_other_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &synth_config(&out));
    assert_eq!(lobnet(&["synth", "--config", &cfg]).status.code(), Some(0));
    let run = lobnet(&["synth", "--config", &cfg, "--seed", "99"]);
    assert_eq!(run.status.code(), Some(2));
    let stderr = String::from_utf8(run.stderr).unwrap();
    assert!(stderr.contains("different config"), "{stderr}");
}

#[test]
fn gradcheck_prints_five_architecture_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &synth_config(&out));
    let run = lobnet(&["gradcheck", "--config", &cfg]);
    assert_eq!(run.status.code(), Some(0), "{:?}", String::from_utf8(run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5, "{stdout}");
    for arch in ["mlp", "lstm", "mlp-lstm", "cnn-lstm", "lstm-mha"] {
        let line = lines
            .iter()
            .find(|l| l.starts_with(&format!("{arch} ")))
            .unwrap_or_else(|| panic!("no line for {arch}: {stdout}"));
        let err: f64 = line
            .split("max_rel_err=")
            .nth(1)
            .unwrap()
            .parse()
            .unwrap();
        assert!(err < 1e-4, "{line}");
    }
}
