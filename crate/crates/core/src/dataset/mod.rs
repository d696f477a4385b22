//! Samples, manifests, temporal pooling and fold splitting.

mod feature_file;
mod folds;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;

pub use feature_file::{
    decode_features, encode_features, read_feature_file, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use folds::{stratified_kfold, Fold};
pub use synthetic::{gen_synthetic, gen_synthetic_test, gen_synthetic_videos, SyntheticSpec, VideoSpec};

/// Number of emotion classes.
pub const NUM_CLASSES: usize = 6;

/// Class names; the position of each name is its class index.
pub const LABEL_NAMES: [&str; NUM_CLASSES] = ["neutral", "anger", "happiness", "sadness", "worry", "surprise"];

pub fn label_index(name: &str) -> Option<usize> {
    LABEL_NAMES.iter().position(|l| *l == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "S")]
    Speech,
    #[serde(rename = "I")]
    Image,
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "V")]
    Video,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Speech, Modality::Image, Modality::Text, Modality::Video];

    /// Fixed slot index used by the fusion network.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Modality::Speech => "S",
            Modality::Image => "I",
            Modality::Text => "T",
            Modality::Video => "V",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("empty feature matrix: T = {frames}, C = {dim}")]
    EmptyDimension { frames: usize, dim: usize },
    #[error("non-finite value at frame {row}, dim {col}")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("unknown label {label:?}; legal labels are {}", LABEL_NAMES.join(", "))]
    UnknownLabel { label: String },
    #[error("sample {0:?} has no modality features")]
    NoFeatures(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("class {class} has {count} labeled samples, fewer than k = {k}")]
    TooFewSamples { class: usize, count: usize, k: usize },
    #[error("k-fold split needs k >= 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("malformed container: {0}")]
    InvalidContainer(String),
    #[error("container has no tensor named {0:?}")]
    MissingTensor(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            e @ (DatasetError::Io { .. } | DatasetError::InFile { .. }) => e,
            e => DatasetError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }
}

/// Frame-level features of one modality for one sample: a `T × C` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub modality: Modality,
    pub values: Matrix<f32>,
}

impl FrameFeatures {
    pub fn new(modality: Modality, values: Matrix<f32>) -> Result<Self, DatasetError> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(DatasetError::EmptyDimension {
                frames: values.rows(),
                dim: values.cols(),
            });
        }
        if let Some(i) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite {
                row: i / values.cols(),
                col: i % values.cols(),
            });
        }
        Ok(Self { modality, values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Option<usize>,
    /// True class of an unlabeled synthetic sample; never used for training.
    pub hidden_label: Option<usize>,
    pub features: BTreeMap<Modality, FrameFeatures>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl Dataset {
    pub fn label_names(&self) -> &'static [&'static str; NUM_CLASSES] {
        &LABEL_NAMES
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.labeled.len(), self.unlabeled.len())
    }

    /// Per-modality pooled dimension (`2C`), taken from the first sample carrying it.
    pub fn pooled_dims(&self) -> [usize; 4] {
        let mut dims = [0; 4];
        for s in self.labeled.iter().chain(&self.unlabeled) {
            for (m, f) in &s.features {
                if dims[m.index()] == 0 {
                    dims[m.index()] = 2 * f.dim();
                }
            }
        }
        dims
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for s in self.labeled.iter().chain(&self.unlabeled) {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateId(s.id.clone()));
            }
            if s.features.is_empty() {
                return Err(DatasetError::NoFeatures(s.id.clone()));
            }
        }
        Ok(())
    }
}

/// Concatenated per-dimension mean and population variance over frames.
pub fn temporal_pool(features: &FrameFeatures) -> Vec<f32> {
    let (t, c) = features.values.shape();
    let n = t as f64;
    let mut mean = vec![0.0f64; c];
    for r in 0..t {
        for (m, &v) in mean.iter_mut().zip(features.values.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for r in 0..t {
        for ((s, &v), &m) in var.iter_mut().zip(features.values.row(r)).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    mean.into_iter().chain(var).map(|v| v as f32).collect()
}

/// One line of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub label: Option<String>,
    pub features: BTreeMap<Modality, PathBuf>,
    /// Ground-truth class of an unlabeled synthetic sample, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_label: Option<String>,
}

fn parse_label(label: &str) -> Result<usize, DatasetError> {
    label_index(label).ok_or_else(|| DatasetError::UnknownLabel {
        label: label.to_string(),
    })
}

/// Loads a manifest; relative feature paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut dataset = Dataset::default();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| DatasetError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(row.id.clone()) {
            return Err(DatasetError::DuplicateId(row.id));
        }
        if row.features.is_empty() {
            return Err(DatasetError::NoFeatures(row.id));
        }
        let label = row.label.as_deref().map(parse_label).transpose()?;
        let hidden_label = row.hidden_label.as_deref().map(parse_label).transpose()?;
        let mut features = BTreeMap::new();
        for (&modality, rel) in &row.features {
            let full = if rel.is_absolute() { rel.clone() } else { base.join(rel) };
            features.insert(modality, read_feature_file(&full, modality)?);
        }
        let sample = Sample {
            id: row.id,
            label,
            hidden_label,
            features,
        };
        if sample.label.is_some() {
            dataset.labeled.push(sample);
        } else {
            dataset.unlabeled.push(sample);
        }
    }
    Ok(dataset)
}

/// Writes every sample's features under `dir/features/` and a `manifest.jsonl`
/// referencing them. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf, DatasetError> {
    dataset.validate()?;
    let dir = dir.as_ref();
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| DatasetError::io(&feat_dir, e))?;
    let mut lines = String::new();
    for s in dataset.labeled.iter().chain(&dataset.unlabeled) {
        let mut paths = BTreeMap::new();
        for (m, f) in &s.features {
            let rel = PathBuf::from("features").join(format!("{}.{}.mmf", s.id, m.code()));
            write_feature_file(dir.join(&rel), f)?;
            paths.insert(*m, rel);
        }
        let row = ManifestRow {
            id: s.id.clone(),
            label: s.label.map(|l| LABEL_NAMES[l].to_string()),
            features: paths,
            hidden_label: s.hidden_label.map(|l| LABEL_NAMES[l].to_string()),
        };
        lines.push_str(&serde_json::to_string(&row).expect("manifest row serializes"));
        lines.push('\n');
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines).map_err(|e| DatasetError::io(&manifest, e))?;
    Ok(manifest)
}
