//! Dataset cache: flat little-endian f64 records plus a JSON manifest,
//! so featurization runs once per (instrument, split, kind, horizon).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::features::{Dataset, FeatureError, FeatureKind, Sample};
use crate::scalar::Scalar;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Which leg of a walk-forward window a cached dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Valid,
    Test,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Valid => "valid",
            SplitRole::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sidecar metadata for one cached dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub instrument: String,
    pub split: usize,
    pub role: SplitRole,
    pub kind: FeatureKind,
    pub delta: usize,
    pub horizon: usize,
    pub stride: usize,
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub days: Vec<usize>,
    pub anchors: Vec<usize>,
}

/// Write `<role>.bin` (row-major inputs then the target, per sample)
/// and `<role>.json` under `dir`.
pub fn save_dataset<T: Scalar>(
    dir: &Path,
    split: usize,
    role: SplitRole,
    stride: usize,
    dataset: &Dataset<T>,
) -> Result<(), FeatureError> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        instrument: dataset.instrument_id.clone(),
        split,
        role,
        kind: dataset.kind,
        delta: dataset.delta,
        horizon: dataset.horizon,
        stride,
        count: dataset.samples.len(),
        rows: dataset.rows(),
        cols: dataset.cols(),
        days: dataset.samples.iter().map(|s| s.day_index).collect(),
        anchors: dataset.samples.iter().map(|s| s.anchor).collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join(format!("{role}.json")), json)?;

    let file = std::fs::File::create(dir.join(format!("{role}.bin")))?;
    let mut out = BufWriter::new(file);
    for sample in &dataset.samples {
        for &v in sample.inputs.iter() {
            out.write_all(&v.to_f64().to_le_bytes())?;
        }
        out.write_all(&sample.target.to_f64().to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Load a dataset previously written by [`save_dataset`].
pub fn load_dataset<T: Scalar>(dir: &Path, role: SplitRole) -> Result<Dataset<T>, FeatureError> {
    let json = std::fs::read(dir.join(format!("{role}.json")))?;
    let manifest: DatasetManifest = serde_json::from_slice(&json)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(FeatureError::CacheMismatch(format!(
            "manifest schema {} (expected {})",
            manifest.schema_version, MANIFEST_SCHEMA_VERSION
        )));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(format!("{role}.bin")))?.read_to_end(&mut bytes)?;
    let per_sample = (manifest.rows * manifest.cols + 1) * 8;
    if bytes.len() != per_sample * manifest.count {
        return Err(FeatureError::CacheMismatch(format!(
            "{role}.bin holds {} bytes, manifest implies {}",
            bytes.len(),
            per_sample * manifest.count
        )));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let base = i * per_sample;
        let mut data = Vec::with_capacity(manifest.rows * manifest.cols);
        for j in 0..manifest.rows * manifest.cols {
            let off = base + j * 8;
            data.push(T::from_f64(f64::from_le_bytes(
                bytes[off..off + 8].try_into().unwrap(),
            )));
        }
        let toff = base + manifest.rows * manifest.cols * 8;
        let target = T::from_f64(f64::from_le_bytes(bytes[toff..toff + 8].try_into().unwrap()));
        samples.push(Sample {
            inputs: Array::from_vec(&[manifest.rows, manifest.cols], data),
            target,
            day_index: manifest.days[i],
            anchor: manifest.anchors[i],
            horizon: manifest.horizon,
        });
    }
    Ok(Dataset {
        instrument_id: manifest.instrument,
        kind: manifest.kind,
        delta: manifest.delta,
        horizon: manifest.horizon,
        samples,
    })
}
