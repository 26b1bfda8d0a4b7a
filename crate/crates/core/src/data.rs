//! Sensor recordings on disk: a JSON manifest plus one raw little-endian
//! `f32` file per record, row-major `[length, channels]`.
//!
//! Every modality (pose joints, IMU axes, pressure cells) arrives already
//! flattened to channels; nothing here interprets joint layout.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Raw samples whose fraction of non-finite values exceeds this are rejected.
pub const MAX_MISSING_FRACTION: f64 = 0.10;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("non-positive sampling rate {0}")]
    NonPositiveRate(f64),
    #[error("record {record}: data file {path} is missing")]
    MissingFile { record: String, path: PathBuf },
    #[error("length mismatch, record {record}: expected {expected} bytes, file has {actual}")]
    LengthMismatch {
        record: String,
        expected: u64,
        actual: u64,
    },
    #[error("record {record}: {message}")]
    InvalidRecord { record: String, message: String },
    #[error("no record with id {0:?}")]
    UnknownRecord(String),
    #[error("record unusable: {record} has {missing} of {total} values missing")]
    Unusable {
        record: String,
        missing: usize,
        total: usize,
    },
    #[error("invalid resampling rate {0}")]
    InvalidRate(f64),
    #[error("normalization needs at least one training record")]
    EmptyTrainingSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Modality {
    Pose3d,
    Imu,
    Pressure,
    Smpl,
    Other,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Pose3d => "pose3d",
            Modality::Imu => "imu",
            Modality::Pressure => "pressure",
            Modality::Smpl => "smpl",
            Modality::Other => "other",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "pose3d" => Modality::Pose3d,
            "imu" => Modality::Imu,
            "pressure" => Modality::Pressure,
            "smpl" => Modality::Smpl,
            "other" => Modality::Other,
            _ => return Err(DataError::UnknownModality(s.to_string())),
        })
    }
}

impl From<Modality> for String {
    fn from(m: Modality) -> String {
        m.as_str().to_string()
    }
}

impl TryFrom<String> for Modality {
    type Error = DataError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// One recording, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSequence {
    pub id: String,
    pub class_id: Option<String>,
    pub modality: Modality,
    pub rate_hz: f64,
    /// `[length, channels]`
    pub samples: Tensor,
}

impl SensorSequence {
    pub fn new(
        id: impl Into<String>,
        class_id: Option<String>,
        modality: Modality,
        rate_hz: f64,
        samples: Tensor,
    ) -> Result<Self, DataError> {
        let id = id.into();
        if !(rate_hz > 0.0) {
            return Err(DataError::NonPositiveRate(rate_hz));
        }
        if samples.rank() != 2 {
            return Err(DataError::InvalidRecord {
                record: id,
                message: format!("samples must be [length, channels], got {:?}", samples.shape()),
            });
        }
        Ok(Self {
            id,
            class_id,
            modality,
            rate_hz,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn duration_seconds(&self) -> f64 {
        (self.len() - 1) as f64 / self.rate_hz
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub class_id: Option<String>,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub modality: Modality,
    pub rate_hz: f64,
    pub channels: usize,
    pub normalization: Option<Normalization>,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl DatasetManifest {
    pub fn record(&self, id: &str) -> Result<&ManifestRecord, DataError> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| DataError::UnknownRecord(id.to_string()))
    }

    pub fn data_path(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    fn validate_header(&self) -> Result<(), DataError> {
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            return Err(DataError::NonPositiveRate(self.rate_hz));
        }
        if self.channels == 0 {
            return Err(DataError::InvalidRecord {
                record: self.name.clone(),
                message: "channels must be positive".into(),
            });
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != self.channels || n.std.len() != self.channels {
                return Err(DataError::InvalidRecord {
                    record: self.name.clone(),
                    message: format!("normalization must have {} channels", self.channels),
                });
            }
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::InvalidRecord {
                    record: r.id.clone(),
                    message: "duplicate record id".into(),
                });
            }
            if r.length == 0 {
                return Err(DataError::InvalidRecord {
                    record: r.id.clone(),
                    message: "length must be at least 1".into(),
                });
            }
        }
        Ok(())
    }

    /// Checks every record's data file exists and holds exactly
    /// `length · channels · 4` bytes.
    pub fn validate_files(&self) -> Result<(), DataError> {
        for r in &self.records {
            let path = self.data_path(r);
            let meta = std::fs::metadata(&path).map_err(|_| DataError::MissingFile {
                record: r.id.clone(),
                path: path.clone(),
            })?;
            let expected = (r.length * self.channels * 4) as u64;
            if meta.len() != expected {
                return Err(DataError::LengthMismatch {
                    record: r.id.clone(),
                    expected,
                    actual: meta.len(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| {
        // Surface our own modality error rather than serde's wrapper text.
        let message = e.to_string();
        DataError::Manifest {
            path: path.to_path_buf(),
            message,
        }
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate_header()?;
    manifest.validate_files()?;
    Ok(manifest)
}

/// Writes `[length, channels]` samples as little-endian `f32`.
pub fn write_samples(path: impl AsRef<Path>, samples: &Tensor) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(samples.len() * 4);
    for &v in samples.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_raw(manifest: &DatasetManifest, record: &ManifestRecord) -> Result<Vec<f32>, DataError> {
    let path = manifest.data_path(record);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let expected = record.length * manifest.channels * 4;
    if bytes.len() != expected {
        return Err(DataError::LengthMismatch {
            record: record.id.clone(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// A decoded record together with how many missing values were filled.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub sequence: SensorSequence,
    pub missing_replaced: usize,
}

/// Decodes a record, applies the manifest's normalization and replaces
/// missing (non-finite) values with 0.0, the post-normalization neutral
/// value.
pub fn read_sequence(manifest: &DatasetManifest, record_id: &str) -> Result<LoadedSequence, DataError> {
    let record = manifest.record(record_id)?;
    let raw = read_raw(manifest, record)?;
    let total = raw.len();
    let missing = raw.iter().filter(|v| !v.is_finite()).count();
    if missing as f64 > MAX_MISSING_FRACTION * total as f64 {
        return Err(DataError::Unusable {
            record: record.id.clone(),
            missing,
            total,
        });
    }
    let channels = manifest.channels;
    let mut data: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
    for (i, v) in data.iter_mut().enumerate() {
        if !v.is_finite() {
            *v = 0.0;
            continue;
        }
        if let Some(n) = &manifest.normalization {
            let c = i % channels;
            *v = (*v - n.mean[c]) / n.std[c];
        }
    }
    let samples = Tensor::from_vec(&[record.length, channels], data).expect("length validated");
    if missing > 0 {
        log::warn!("record {}: replaced {missing} missing values with 0.0", record.id);
    }
    Ok(LoadedSequence {
        sequence: SensorSequence {
            id: record.id.clone(),
            class_id: record.class_id.clone(),
            modality: manifest.modality,
            rate_hz: manifest.rate_hz,
            samples,
        },
        missing_replaced: missing,
    })
}

/// Per-channel mean and population standard deviation over the raw values
/// of the listed training records only. Missing values are skipped.
pub fn fit_normalization<S: AsRef<str>>(
    manifest: &DatasetManifest,
    train_ids: &[S],
) -> Result<Normalization, DataError> {
    if train_ids.is_empty() {
        return Err(DataError::EmptyTrainingSet);
    }
    let channels = manifest.channels;
    let mut count = vec![0usize; channels];
    let mut sum = vec![0.0f64; channels];
    let mut raws = Vec::with_capacity(train_ids.len());
    for id in train_ids {
        let raw = read_raw(manifest, manifest.record(id.as_ref())?)?;
        for (i, &v) in raw.iter().enumerate() {
            if v.is_finite() {
                count[i % channels] += 1;
                sum[i % channels] += f64::from(v);
            }
        }
        raws.push(raw);
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0f64; channels];
    for raw in &raws {
        for (i, &v) in raw.iter().enumerate() {
            if v.is_finite() {
                let d = f64::from(v) - mean[i % channels];
                sq[i % channels] += d * d;
            }
        }
    }
    let std = sq
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { (s / n as f64).sqrt() } else { 0.0 }.max(STD_FLOOR))
        .collect();
    Ok(Normalization { mean, std })
}

/// Linear interpolation onto timestamps `k / target_hz` spanning the
/// original duration. The first sample is kept exactly, and so is the last
/// whenever the duration is a whole number of output periods.
pub fn resample(seq: &SensorSequence, target_hz: f64) -> Result<SensorSequence, DataError> {
    if !(target_hz > 0.0) || !target_hz.is_finite() {
        return Err(DataError::InvalidRate(target_hz));
    }
    if target_hz == seq.rate_hz {
        return Ok(seq.clone());
    }
    let len = seq.len();
    let channels = seq.channels();
    if len == 1 {
        log::warn!(
            "record {}: single sample cannot be interpolated, extending it as a constant",
            seq.id
        );
        let mut out = seq.clone();
        out.rate_hz = target_hz;
        return Ok(out);
    }
    let span = (len - 1) as f64 * target_hz / seq.rate_hz;
    let out_len = (span + 1e-9).floor() as usize + 1;
    let mut data = Vec::with_capacity(out_len * channels);
    for k in 0..out_len {
        let pos = (k as f64 * seq.rate_hz) / target_hz;
        let i = (pos.floor() as usize).min(len - 1);
        let frac = pos - i as f64;
        let a = seq.samples.row(i);
        if i + 1 >= len || frac <= 0.0 {
            data.extend_from_slice(a);
            continue;
        }
        let b = seq.samples.row(i + 1);
        for c in 0..channels {
            let v = (1.0 - frac) * a[c] + frac * b[c];
            data.push(v.clamp(a[c].min(b[c]), a[c].max(b[c])));
        }
    }
    Ok(SensorSequence {
        id: seq.id.clone(),
        class_id: seq.class_id.clone(),
        modality: seq.modality,
        rate_hz: target_hz,
        samples: Tensor::from_vec(&[out_len, channels], data).expect("sized above"),
    })
}
