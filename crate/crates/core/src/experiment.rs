//! Experiment configuration and the walk-forward grid runner.
//!
//! One config file drives everything: data generation or ingest,
//! featurization, the (instrument × split × feature × architecture ×
//! method × horizon) training grid, and report emission. Every stage
//! is resumable (finished artifacts are recognized by presence and
//! skipped) and the whole run is deterministic for a fixed config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{CheckpointError, ParamSet};
use crate::eval::{
    compute_regressions, compute_win_tables, emit_report, mae_mse, r2_os, rank_scores, EvalError,
    EvalRecord, RankMetric, RankReport, VolatilityRow, WinTables, REPORT_SCHEMA_VERSION,
};
use crate::features::{
    build_windows, column_stats, load_dataset, rolling_splits, save_dataset, Dataset,
    DatasetSplit, FeatureError, FeatureKind, Sample, SplitRole, WindowOptions,
};
use crate::lob::{parse_lob_csv, serialize_lob_csv, synth_generate, InstrumentSeries, LobError, SynthConfig};
use crate::models::{build_model, Arch, Model, ModelSizes};
use crate::rng::{fnv1a64, mix};
use crate::eval::volatility_stats;
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Lob(#[from] LobError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(
        "output directory was produced by a different config (hash {found}, expected {expected}); \
         use a fresh --out or delete it"
    )]
    ManifestMismatch { found: String, expected: String },
    #[error("instrument {instrument} has {days} days, need at least 35 (7 five-day weeks)")]
    NotEnoughDays { instrument: String, days: usize },
    #[error("cell {cell}: {source}")]
    Train {
        cell: String,
        #[source]
        source: TrainError,
    },
    #[error("{} cells have no results (first: {})", .0.len(), .0[0])]
    MissingCells(Vec<String>),
    #[error("{} cells failed (first: {}: {})", .0.len(), .0[0].cell, .0[0].message)]
    CellsFailed(Vec<CellFailure>),
}

/// One cell's failure, with a flag separating numerical blowups from
/// data problems.
#[derive(Debug, Clone)]
pub struct CellFailure {
    pub cell: String,
    pub message: String,
    pub numerical: bool,
}

impl GridError {
    pub fn is_numerical(&self) -> bool {
        match self {
            GridError::Train {
                source: TrainError::NonFiniteLoss { .. },
                ..
            } => true,
            GridError::CellsFailed(fails) => fails.iter().any(|f| f.numerical),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub days: usize,
    pub ticks_min: usize,
    pub ticks_max: usize,
    pub initial_mid: f64,
    pub volatility: f64,
    pub ofi_drift: f64,
    pub start_date: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            days: 35,
            ticks_min: 4500,
            ticks_max: 5000,
            initial_mid: 10.0,
            volatility: 0.4,
            ofi_drift: 0.8,
            start_date: "2021-01-04".to_string(),
        }
    }
}

impl SynthSection {
    fn config_for(&self, instrument: &str) -> Result<SynthConfig, GridError> {
        Ok(SynthConfig {
            instrument_id: instrument.to_string(),
            days: self.days,
            ticks_min: self.ticks_min,
            ticks_max: self.ticks_max,
            initial_mid: self.initial_mid,
            volatility: self.volatility,
            ofi_drift: self.ofi_drift,
            start_date: self
                .start_date
                .parse()
                .map_err(|e: String| GridError::Config(e))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr: d.lr,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            patience: d.patience,
            max_epochs: d.max_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: [usize; 3],
    pub pre_hidden: usize,
    pub siamese_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelSizes::default();
        Self {
            hidden: d.hidden,
            heads: d.heads,
            mlp_hidden: d.mlp_hidden,
            pre_hidden: d.pre_hidden,
            siamese_hidden: d.siamese_hidden,
        }
    }
}

impl ModelSection {
    pub fn sizes(&self) -> ModelSizes {
        ModelSizes {
            hidden: self.hidden,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            pre_hidden: self.pre_hidden,
            siamese_hidden: self.siamese_hidden,
        }
    }
}

/// The whole experiment, with every knob defaulted to the production
/// setup so an empty file is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub delta: usize,
    pub horizons: Vec<usize>,
    pub features: Vec<FeatureKind>,
    pub architectures: Vec<Arch>,
    pub siamese: Vec<bool>,
    /// Anchor stride for window construction; 1 keeps every anchor.
    pub stride: usize,
    pub standardize_ofi: bool,
    pub parallelism: usize,
    /// Read per-instrument CSVs from here instead of generating.
    pub data_dir: Option<PathBuf>,
    pub instruments: Vec<String>,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub model: ModelSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            delta: 49,
            horizons: vec![10, 20, 50],
            features: vec![FeatureKind::Lob, FeatureKind::Ofi],
            architectures: Arch::ALL.to_vec(),
            siamese: vec![false, true],
            stride: 1,
            standardize_ofi: false,
            parallelism: 1,
            data_dir: None,
            instruments: vec!["SYN-000".to_string()],
            synth: SynthSection::default(),
            train: TrainSection::default(),
            model: ModelSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, GridError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.instruments.is_empty() {
            return Err(GridError::Config("at least one instrument".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h == 0) {
            return Err(GridError::Config("horizons must be nonempty and positive".into()));
        }
        if self.features.is_empty() || self.architectures.is_empty() || self.siamese.is_empty() {
            return Err(GridError::Config(
                "features, architectures and siamese flags must be nonempty".into(),
            ));
        }
        if self.stride == 0 {
            return Err(GridError::Config("stride must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(GridError::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical serialized config.
    pub fn config_hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            patience: self.train.patience,
            max_epochs: self.train.max_epochs,
            seed,
        }
    }

    pub fn data_path(&self, instrument: &str) -> PathBuf {
        match &self.data_dir {
            Some(dir) => dir.join(format!("{instrument}.csv")),
            None => self.out_dir.join("data").join(format!("{instrument}.csv")),
        }
    }

    pub fn feature_dir(&self, instrument: &str, split: usize, kind: FeatureKind, horizon: usize) -> PathBuf {
        self.out_dir
            .join("features")
            .join(instrument)
            .join(format!("s{split}"))
            .join(format!("{kind}_h{horizon}"))
    }

    pub fn model_dir(&self, cell: &CellKey) -> PathBuf {
        self.out_dir.join("models").join(cell.id())
    }

    pub fn record_path(&self, cell: &CellKey) -> PathBuf {
        self.out_dir.join("eval").join(format!("{}.json", cell.id()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub instrument: String,
    pub split: usize,
    pub feature: FeatureKind,
    pub horizon: usize,
    pub arch: Arch,
    pub siamese: bool,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!(
            "{}_s{}_{}_{}_{}_h{}",
            self.instrument,
            self.split,
            self.feature,
            self.arch,
            if self.siamese { "siam" } else { "orig" },
            self.horizon
        )
    }

    /// Per-cell stream seed; cells are independent of each other and of
    /// execution order.
    pub fn seed(&self, global: u64) -> u64 {
        mix(global, fnv1a64(self.id().as_bytes()))
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    version: String,
    config_hash: String,
    seed: u64,
}

/// Write the run manifest, or verify it if the output directory was
/// already used.
pub fn ensure_manifest(cfg: &ExperimentConfig) -> Result<(), GridError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("manifest.json");
    let expected = cfg.config_hash();
    if path.exists() {
        let found: RunManifest = serde_json::from_slice(&std::fs::read(&path)?)?;
        if found.config_hash != expected {
            return Err(GridError::ManifestMismatch {
                found: found.config_hash,
                expected,
            });
        }
        return Ok(());
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: expected,
        seed: cfg.seed,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Generate (if needed) and load every instrument series. Synthetic
/// data is written as CSV once and always read back from the file, so
/// downstream stages see exactly the serialized values.
pub fn load_series(cfg: &ExperimentConfig) -> Result<Vec<InstrumentSeries>, GridError> {
    let mut out = Vec::with_capacity(cfg.instruments.len());
    for instrument in &cfg.instruments {
        let path = cfg.data_path(instrument);
        if cfg.data_dir.is_none() && !path.exists() {
            std::fs::create_dir_all(path.parent().expect("data dir"))?;
            let series = synth_generate(&cfg.synth.config_for(instrument)?, cfg.seed)?;
            let mut buf = Vec::new();
            serialize_lob_csv(&series, &mut buf)?;
            std::fs::write(&path, buf)?;
        }
        let file = std::fs::File::open(&path)?;
        out.push(parse_lob_csv(instrument, file)?);
    }
    Ok(out)
}

fn splits_for(series: &InstrumentSeries) -> Result<Vec<DatasetSplit>, GridError> {
    let splits = rolling_splits(series.days.len());
    if splits.is_empty() {
        return Err(GridError::NotEnoughDays {
            instrument: series.instrument_id.clone(),
            days: series.days.len(),
        });
    }
    Ok(splits)
}

fn cache_is_fresh(cfg: &ExperimentConfig, dir: &Path, kind: FeatureKind, horizon: usize) -> bool {
    for role in [SplitRole::Train, SplitRole::Valid, SplitRole::Test] {
        let json = dir.join(format!("{role}.json"));
        let bin = dir.join(format!("{role}.bin"));
        if !json.exists() || !bin.exists() {
            return false;
        }
        let manifest: crate::features::DatasetManifest =
            match std::fs::read(&json).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
                Some(m) => m,
                None => return false,
            };
        if manifest.kind != kind
            || manifest.delta != cfg.delta
            || manifest.horizon != horizon
            || manifest.stride != cfg.stride
        {
            return false;
        }
    }
    true
}

/// Build and cache every (instrument, split, kind, horizon) dataset
/// that is missing or stale.
pub fn featurize_all(cfg: &ExperimentConfig, series_list: &[InstrumentSeries]) -> Result<(), GridError> {
    for series in series_list {
        let splits = splits_for(series)?;
        for split in &splits {
            for &kind in &cfg.features {
                let stale: Vec<usize> = cfg
                    .horizons
                    .iter()
                    .copied()
                    .filter(|&h| {
                        let dir = cfg.feature_dir(&series.instrument_id, split.ordinal, kind, h);
                        !cache_is_fresh(cfg, &dir, kind, h)
                    })
                    .collect();
                if stale.is_empty() {
                    continue;
                }
                // train-week statistics; raw-book volumes always, flow
                // inputs only when asked
                let scaling = match kind {
                    FeatureKind::Lob => Some(column_stats(series, kind, &split.train_days())),
                    FeatureKind::Ofi if cfg.standardize_ofi => {
                        Some(column_stats(series, kind, &split.train_days()))
                    }
                    FeatureKind::Ofi => None,
                };
                for horizon in stale {
                    let dir = cfg.feature_dir(&series.instrument_id, split.ordinal, kind, horizon);
                    for (role, days) in [
                        (SplitRole::Train, split.train_days()),
                        (SplitRole::Valid, split.valid_week.clone()),
                        (SplitRole::Test, split.test_week.clone()),
                    ] {
                        let mut opts = WindowOptions::new(kind, cfg.delta, horizon);
                        opts.stride = cfg.stride;
                        opts.days = Some(days);
                        opts.scaling = scaling.clone();
                        let samples = build_windows::<f64>(series, &opts)?;
                        let dataset = Dataset {
                            instrument_id: series.instrument_id.clone(),
                            kind,
                            delta: cfg.delta,
                            horizon,
                            samples,
                        };
                        save_dataset(&dir, split.ordinal, role, cfg.stride, &dataset)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Every cell of the grid in canonical order, grouped so cells sharing
/// a dataset are adjacent.
pub fn grid_cells(cfg: &ExperimentConfig, split_counts: &BTreeMap<String, usize>) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for instrument in &cfg.instruments {
        let n_splits = split_counts.get(instrument).copied().unwrap_or(0);
        for split in 0..n_splits {
            for &feature in &cfg.features {
                for &horizon in &cfg.horizons {
                    for &arch in &cfg.architectures {
                        for &siamese in &cfg.siamese {
                            cells.push(CellKey {
                                instrument: instrument.clone(),
                                split,
                                feature,
                                horizon,
                                arch,
                                siamese,
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

fn failure(cell: &CellKey, err: &GridError) -> CellFailure {
    CellFailure {
        cell: cell.id(),
        message: err.to_string(),
        numerical: err.is_numerical(),
    }
}

fn cell_done(cfg: &ExperimentConfig, cell: &CellKey) -> bool {
    cfg.model_dir(cell).join("params.bin").exists() && cfg.record_path(cell).exists()
}

fn read_record(cfg: &ExperimentConfig, cell: &CellKey) -> Result<EvalRecord, GridError> {
    let record: EvalRecord = serde_json::from_slice(&std::fs::read(cfg.record_path(cell))?)?;
    let matches = record.instrument == cell.instrument
        && record.split == cell.split
        && record.arch == cell.arch
        && record.feature == cell.feature
        && record.siamese == cell.siamese
        && record.horizon == cell.horizon;
    if !matches {
        return Err(GridError::Config(format!(
            "result shard {} does not describe its cell",
            cfg.record_path(cell).display()
        )));
    }
    Ok(record)
}

fn predictions(model: &Model<f64>, set: &Dataset<f64>) -> Vec<f64> {
    let mut preds = Vec::with_capacity(set.len());
    for chunk in set.samples.chunks(512) {
        let refs: Vec<&Sample<f64>> = chunk.iter().collect();
        preds.extend(model.predict(&refs));
    }
    preds
}

fn evaluate_cell(
    cell: &CellKey,
    model: &Model<f64>,
    test: &Dataset<f64>,
) -> Result<EvalRecord, GridError> {
    let preds = predictions(model, test);
    let targets: Vec<f64> = test.samples.iter().map(|s| s.target).collect();
    let (mae, mse) = mae_mse(&preds, &targets)?;
    let r2 = r2_os(&preds, &targets)?;
    Ok(EvalRecord {
        instrument: cell.instrument.clone(),
        split: cell.split,
        arch: cell.arch,
        feature: cell.feature,
        siamese: cell.siamese,
        horizon: cell.horizon,
        mae,
        mse,
        r2,
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    cell: &CellKey,
    datasets: &(Dataset<f64>, Dataset<f64>, Dataset<f64>),
) -> Result<EvalRecord, GridError> {
    if cell_done(cfg, cell) {
        return read_record(cfg, cell);
    }
    let (train_set, valid_set, test_set) = datasets;
    let seed = cell.seed(cfg.seed);
    let model = build_model::<f64>(
        cell.arch,
        cell.feature,
        cell.siamese,
        cfg.delta + 1,
        &cfg.model.sizes(),
        seed,
    );
    let train_cfg = cfg.train_config(seed);
    eprintln!("# cell {cell}");
    let (trained, history) = train(model, train_set, valid_set, &train_cfg).map_err(|e| {
        GridError::Train {
            cell: cell.id(),
            source: e,
        }
    })?;

    let model_dir = cfg.model_dir(cell);
    std::fs::create_dir_all(&model_dir)?;
    let mut history_bytes = serde_json::to_vec_pretty(&history)?;
    history_bytes.push(b'\n');
    std::fs::write(model_dir.join("history.json"), history_bytes)?;

    let record = evaluate_cell(cell, &trained, test_set)?;
    std::fs::create_dir_all(cfg.record_path(cell).parent().expect("eval dir"))?;
    let mut record_bytes = serde_json::to_vec_pretty(&record)?;
    record_bytes.push(b'\n');
    std::fs::write(cfg.record_path(cell), record_bytes)?;
    // checkpoint last: its presence marks the cell complete
    trained.params.save(&model_dir.join("params.bin"))?;
    Ok(record)
}

fn load_group_datasets(
    cfg: &ExperimentConfig,
    instrument: &str,
    split: usize,
    kind: FeatureKind,
    horizon: usize,
) -> Result<(Dataset<f64>, Dataset<f64>, Dataset<f64>), GridError> {
    let dir = cfg.feature_dir(instrument, split, kind, horizon);
    Ok((
        load_dataset(&dir, SplitRole::Train)?,
        load_dataset(&dir, SplitRole::Valid)?,
        load_dataset(&dir, SplitRole::Test)?,
    ))
}

/// Train every not-yet-done cell and write its result shard. Failures
/// are collected per cell; other cells keep going.
pub fn train_grid(cfg: &ExperimentConfig) -> Result<Vec<EvalRecord>, GridError> {
    ensure_manifest(cfg)?;
    let series_list = load_series(cfg)?;
    featurize_all(cfg, &series_list)?;
    let split_counts: BTreeMap<String, usize> = series_list
        .iter()
        .map(|s| Ok((s.instrument_id.clone(), splits_for(s)?.len())))
        .collect::<Result<_, GridError>>()?;
    drop(series_list);

    let cells = grid_cells(cfg, &split_counts);
    let mut records = Vec::with_capacity(cells.len());
    let mut failures: Vec<CellFailure> = Vec::new();

    let mut idx = 0;
    while idx < cells.len() {
        // cells sharing (instrument, split, feature, horizon) are contiguous
        let group_key = {
            let c = &cells[idx];
            (c.instrument.clone(), c.split, c.feature, c.horizon)
        };
        let mut end = idx;
        while end < cells.len() {
            let c = &cells[end];
            if (c.instrument.clone(), c.split, c.feature, c.horizon) != group_key {
                break;
            }
            end += 1;
        }
        let group = &cells[idx..end];
        idx = end;

        if group.iter().all(|c| cell_done(cfg, c)) {
            for cell in group {
                match read_record(cfg, cell) {
                    Ok(r) => records.push(r),
                    Err(e) => failures.push(failure(cell, &e)),
                }
            }
            continue;
        }
        let datasets = match load_group_datasets(cfg, &group_key.0, group_key.1, group_key.2, group_key.3) {
            Ok(d) => d,
            Err(e) => {
                for cell in group {
                    failures.push(failure(cell, &e));
                }
                continue;
            }
        };
        if cfg.parallelism <= 1 {
            for cell in group {
                match run_cell(cfg, cell, &datasets) {
                    Ok(r) => records.push(r),
                    Err(e) => failures.push(failure(cell, &e)),
                }
            }
        } else {
            for chunk in group.chunks(cfg.parallelism) {
                let results: Vec<Result<EvalRecord, GridError>> = std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|cell| scope.spawn(|| run_cell(cfg, cell, &datasets)))
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("cell thread")).collect()
                });
                for (cell, result) in chunk.iter().zip(results) {
                    match result {
                        Ok(r) => records.push(r),
                        Err(e) => failures.push(failure(cell, &e)),
                    }
                }
            }
        }
    }

    if !failures.is_empty() {
        return Err(GridError::CellsFailed(failures));
    }
    Ok(records)
}

/// Load every cell's result shard, recomputing from checkpoints where
/// the shard is missing. Returns records plus the cells with neither.
pub fn collect_records(
    cfg: &ExperimentConfig,
) -> Result<(Vec<EvalRecord>, Vec<CellKey>), GridError> {
    let series_list = load_series(cfg)?;
    let split_counts: BTreeMap<String, usize> = series_list
        .iter()
        .map(|s| Ok((s.instrument_id.clone(), splits_for(s)?.len())))
        .collect::<Result<_, GridError>>()?;
    drop(series_list);

    let cells = grid_cells(cfg, &split_counts);
    let mut records = Vec::new();
    let mut missing = Vec::new();
    for cell in cells {
        if cfg.record_path(&cell).exists() {
            records.push(read_record(cfg, &cell)?);
            continue;
        }
        let params_path = cfg.model_dir(&cell).join("params.bin");
        if params_path.exists() {
            let params = ParamSet::<f64>::load(&params_path)?;
            let mut model = build_model::<f64>(
                cell.arch,
                cell.feature,
                cell.siamese,
                cfg.delta + 1,
                &cfg.model.sizes(),
                cell.seed(cfg.seed),
            );
            model.params = params;
            let dir = cfg.feature_dir(&cell.instrument, cell.split, cell.feature, cell.horizon);
            let test = load_dataset::<f64>(&dir, SplitRole::Test)?;
            let record = evaluate_cell(&cell, &model, &test)?;
            let mut bytes = serde_json::to_vec_pretty(&record)?;
            bytes.push(b'\n');
            std::fs::create_dir_all(cfg.record_path(&cell).parent().expect("eval dir"))?;
            std::fs::write(cfg.record_path(&cell), bytes)?;
            records.push(record);
            continue;
        }
        missing.push(cell);
    }
    Ok((records, missing))
}

/// Label volatility per (instrument, split, horizon), computed on the
/// first configured feature kind's test split.
fn volatility_rows(
    cfg: &ExperimentConfig,
    records: &[EvalRecord],
) -> Result<Vec<VolatilityRow>, GridError> {
    let kind = cfg.features[0];
    let mut keys: Vec<(String, usize, usize)> = records
        .iter()
        .map(|r| (r.instrument.clone(), r.split, r.horizon))
        .collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::with_capacity(keys.len());
    for (instrument, split, horizon) in keys {
        let dir = cfg.feature_dir(&instrument, split, kind, horizon);
        let test = load_dataset::<f64>(&dir, SplitRole::Test)?;
        let labels: Vec<f64> = test.samples.iter().map(|s| s.target).collect();
        let v = volatility_stats(&labels)?;
        rows.push(VolatilityRow {
            instrument,
            split,
            horizon,
            ac: v.ac,
            std: v.std,
        });
    }
    Ok(rows)
}

/// Drop (instrument, split, horizon) groups that are missing any of the
/// configured combinations.
fn complete_groups(cfg: &ExperimentConfig, records: &[EvalRecord]) -> Vec<EvalRecord> {
    let expected = cfg.features.len() * cfg.architectures.len() * cfg.siamese.len();
    let mut counts: BTreeMap<(String, usize, usize), usize> = BTreeMap::new();
    for r in records {
        *counts.entry((r.instrument.clone(), r.split, r.horizon)).or_default() += 1;
    }
    records
        .iter()
        .filter(|r| counts[&(r.instrument.clone(), r.split, r.horizon)] == expected)
        .cloned()
        .collect()
}

/// Aggregate all cell results into the report files. A grid with holes
/// is refused unless `allow_partial`, in which case incomplete
/// (instrument, split, horizon) groups are dropped.
pub fn write_report(cfg: &ExperimentConfig, allow_partial: bool) -> Result<PathBuf, GridError> {
    let (records, missing) = collect_records(cfg)?;
    if !missing.is_empty() && !allow_partial {
        return Err(GridError::MissingCells(
            missing.iter().map(|c| c.id()).collect(),
        ));
    }
    let records = if allow_partial {
        complete_groups(cfg, &records)
    } else {
        records
    };
    if records.is_empty() {
        return Err(GridError::Eval(EvalError::Empty("metrics grid")));
    }
    let volatility = volatility_rows(cfg, &records)?;
    let table = rank_scores(&records, RankMetric::Mse)?;
    let wins: WinTables = compute_win_tables(&records);
    let regressions = compute_regressions(&records, &volatility);
    let ranks = RankReport {
        schema_version: REPORT_SCHEMA_VERSION,
        table,
        wins,
    };
    let dir = cfg.report_dir();
    emit_report(&records, &ranks, &regressions, &volatility, &dir)?;
    Ok(dir)
}

/// The whole pipeline: data, features, grid, report.
pub fn run_grid(cfg: &ExperimentConfig, allow_partial: bool) -> Result<PathBuf, GridError> {
    match train_grid(cfg) {
        Ok(_) => {}
        Err(GridError::CellsFailed(failures)) if allow_partial => {
            eprintln!("# continuing past {} failed cells", failures.len());
        }
        Err(e) => return Err(e),
    }
    write_report(cfg, allow_partial)
}
