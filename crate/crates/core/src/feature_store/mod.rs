//! Feature bundles on disk: NPY tensors plus a JSON manifest.
//!
//! A manifest lists named splits, each pointing at a features file (N×d,
//! `<f4` or `<f8`), an optional labels file (N, `<i4`) and an optional logits
//! file (N×C, float). Paths are resolved relative to the manifest's directory.
//! Everything is promoted to f64 on load.

pub mod npy;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use npy::Dtype;
use npy::{NpyArray, NpyData};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// A labeled matrix of feature vectors with optional logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub name: String,
    /// N×d, one sample per row.
    pub features: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    /// N×C.
    pub logits: Option<DMatrix<f64>>,
    pub num_classes: usize,
    /// Precision the values were (or will be) stored at.
    pub source_dtype: Dtype,
    /// Training splits must contain every class at least once.
    pub train_split: bool,
}

impl FeatureBundle {
    /// Builds and validates an in-memory bundle stored at f64 precision.
    pub fn new(
        name: impl Into<String>,
        features: DMatrix<f64>,
        labels: Option<Vec<usize>>,
        logits: Option<DMatrix<f64>>,
        num_classes: usize,
    ) -> Result<Self> {
        let bundle = FeatureBundle {
            name: name.into(),
            features,
            labels,
            logits,
            num_classes,
            source_dtype: Dtype::F64,
            train_split: false,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn with_train_split(mut self, train: bool) -> Result<Self> {
        self.train_split = train;
        self.validate()?;
        Ok(self)
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Result<Self> {
        if dtype == Dtype::I32 {
            return Err(Error::Invalid("features cannot be stored as <i4".into()));
        }
        self.source_dtype = dtype;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// New bundle of the given rows, in the given order. Keeps dtype; the
    /// result is not a training split.
    pub fn select_rows(&self, name: impl Into<String>, rows: &[usize]) -> Result<FeatureBundle> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::Invalid(format!("row {bad} out of range for {} rows", self.len())));
        }
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)]);
        Ok(FeatureBundle {
            name: name.into(),
            features: pick(&self.features),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
            logits: self.logits.as_ref().map(pick),
            num_classes: self.num_classes,
            source_dtype: self.source_dtype,
            train_split: false,
        })
    }

    /// Checks every bundle invariant, naming the first offending row.
    pub fn validate(&self) -> Result<()> {
        let path = PathBuf::from(&self.name);
        check_finite(&self.features, &path)?;
        let n = self.len();
        if let Some(labels) = &self.labels {
            check_labels(labels, n, self.num_classes, self.train_split, &path)?;
        }
        if let Some(logits) = &self.logits {
            check_logits(logits, n, self.num_classes, &path)?;
        }
        Ok(())
    }
}

fn check_finite(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    row: r,
                    col: c,
                });
            }
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize, num_classes: usize, train: bool, path: &Path) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape {
            path: path.to_path_buf(),
            reason: format!("{} labels for {} feature rows", labels.len(), n),
        });
    }
    let mut counts = vec![0usize; num_classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                path: path.to_path_buf(),
                row,
                label: label as i64,
                num_classes,
            });
        }
        counts[label] += 1;
    }
    if train {
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass {
                class,
                count: 0,
                required: 1,
            });
        }
    }
    Ok(())
}

fn check_logits(logits: &DMatrix<f64>, n: usize, num_classes: usize, path: &Path) -> Result<()> {
    if logits.nrows() != n || logits.ncols() != num_classes {
        return Err(Error::Shape {
            path: path.to_path_buf(),
            reason: format!(
                "logits are {}×{}, expected {}×{}",
                logits.nrows(),
                logits.ncols(),
                n,
                num_classes
            ),
        });
    }
    check_finite(logits, path)
}

/// File entry for one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub features_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_path: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub splits: BTreeMap<String, SplitEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                reason: format!(
                    "schema_version {} (expected {SCHEMA_VERSION})",
                    manifest.schema_version
                ),
            });
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, name: &str) -> Result<&SplitEntry> {
        self.splits.get(name).ok_or_else(|| Error::UnknownSplit {
            split: name.to_string(),
        })
    }

    /// Loads every split, checking that all referenced files exist and agree
    /// with the manifest's shapes.
    pub fn verify(manifest_path: &Path) -> Result<Vec<FeatureBundle>> {
        let manifest = Manifest::read(manifest_path)?;
        manifest
            .splits
            .keys()
            .map(|split| load_bundle(manifest_path, split))
            .collect()
    }
}

fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
    let rel = Path::new(rel);
    if rel.is_absolute() {
        return rel.to_path_buf();
    }
    manifest_path
        .parent()
        .map(|dir| dir.join(rel))
        .unwrap_or_else(|| rel.to_path_buf())
}

/// Reads a 2-D float tensor into a row-per-sample matrix.
pub fn read_matrix(path: &Path) -> Result<(DMatrix<f64>, Dtype)> {
    let array = npy::read(path)?;
    let dtype = array.dtype();
    if dtype == Dtype::I32 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 10,
            reason: "expected a float tensor, found <i4".into(),
        });
    }
    let (rows, cols) = match array.shape.as_slice() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::Shape {
                path: path.to_path_buf(),
                reason: format!("expected a 2-D tensor, found shape {other:?}"),
            })
        }
    };
    Ok((DMatrix::from_row_slice(rows, cols, &array.to_f64()), dtype))
}

/// Reads a 1-D float tensor.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let array = npy::read(path)?;
    if array.shape.len() != 1 || array.dtype() == Dtype::I32 {
        return Err(Error::Shape {
            path: path.to_path_buf(),
            reason: format!("expected a 1-D float tensor, found {:?} {}", array.shape, array.dtype().descr()),
        });
    }
    Ok(array.to_f64())
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, dtype: Dtype) -> Result<()> {
    let row_major: Vec<f64> = (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
        .map(|idx| m[idx])
        .collect();
    let data = match dtype {
        Dtype::F32 => NpyData::F32(row_major.iter().map(|&v| v as f32).collect()),
        Dtype::F64 => NpyData::F64(row_major),
        Dtype::I32 => return Err(Error::Invalid("matrices are stored as floats".into())),
    };
    npy::write(
        path,
        &NpyArray {
            shape: vec![m.nrows(), m.ncols()],
            data,
        },
    )
}

pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    npy::write(
        path,
        &NpyArray {
            shape: vec![v.len()],
            data: NpyData::F64(v.to_vec()),
        },
    )
}

fn read_labels(path: &Path) -> Result<Vec<i32>> {
    let array = npy::read(path)?;
    match (array.shape.as_slice(), array.data) {
        ([_], NpyData::I32(v)) => Ok(v),
        (shape, data) => Err(Error::Format {
            path: path.to_path_buf(),
            offset: 10,
            reason: format!(
                "labels must be a 1-D <i4 tensor, found shape {shape:?} {}",
                NpyArray { shape: vec![], data }.dtype().descr()
            ),
        }),
    }
}

/// Loads and validates one split of a manifest.
pub fn load_bundle(manifest_path: &Path, split: &str) -> Result<FeatureBundle> {
    let manifest = Manifest::read(manifest_path)?;
    let entry = manifest.split(split)?;
    let num_classes = manifest.num_classes;

    let features_path = resolve(manifest_path, &entry.features_path);
    let (features, source_dtype) = read_matrix(&features_path)?;
    if features.ncols() != manifest.feature_dim {
        return Err(Error::Shape {
            path: features_path,
            reason: format!(
                "feature_dim {} but manifest says {}",
                features.ncols(),
                manifest.feature_dim
            ),
        });
    }
    check_finite(&features, &features_path)?;
    let n = features.nrows();

    let labels = match &entry.labels_path {
        Some(rel) => {
            let path = resolve(manifest_path, rel);
            let raw = read_labels(&path)?;
            if let Some(row) = raw.iter().position(|&l| l < 0) {
                return Err(Error::LabelOutOfRange {
                    path,
                    row,
                    label: i64::from(raw[row]),
                    num_classes,
                });
            }
            let labels: Vec<usize> = raw.iter().map(|&l| l as usize).collect();
            check_labels(&labels, n, num_classes, entry.train, &path)?;
            Some(labels)
        }
        None => None,
    };

    let logits = match &entry.logits_path {
        Some(rel) => {
            let path = resolve(manifest_path, rel);
            let (logits, _) = read_matrix(&path)?;
            check_logits(&logits, n, num_classes, &path)?;
            Some(logits)
        }
        None => None,
    };

    Ok(FeatureBundle {
        name: split.to_string(),
        features,
        labels,
        logits,
        num_classes,
        source_dtype,
        train_split: entry.train,
    })
}

/// Writes a single bundle and a manifest describing it into `dir`.
pub fn save_bundle(bundle: &FeatureBundle, dir: &Path) -> Result<Manifest> {
    save_bundles(&[bundle], dir)
}

/// Writes several splits sharing C and d into `dir` under one manifest.
pub fn save_bundles(bundles: &[&FeatureBundle], dir: &Path) -> Result<Manifest> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Invalid("no bundles to save".into()))?;
    let (num_classes, feature_dim) = (first.num_classes, first.dim());
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut splits = BTreeMap::new();
    for bundle in bundles {
        bundle.validate()?;
        if bundle.num_classes != num_classes || bundle.dim() != feature_dim {
            return Err(Error::Invalid(format!(
                "split '{}' has C={}, d={} but the first split has C={num_classes}, d={feature_dim}",
                bundle.name,
                bundle.num_classes,
                bundle.dim()
            )));
        }
        let features_path = format!("{}.features.npy", bundle.name);
        write_matrix(&dir.join(&features_path), &bundle.features, bundle.source_dtype)?;

        let labels_path = match &bundle.labels {
            Some(labels) => {
                let rel = format!("{}.labels.npy", bundle.name);
                let data = labels
                    .iter()
                    .map(|&l| i32::try_from(l).map_err(|_| Error::Invalid(format!("label {l} exceeds int32"))))
                    .collect::<Result<Vec<_>>>()?;
                npy::write(
                    &dir.join(&rel),
                    &NpyArray {
                        shape: vec![labels.len()],
                        data: NpyData::I32(data),
                    },
                )?;
                Some(rel)
            }
            None => None,
        };

        let logits_path = match &bundle.logits {
            Some(logits) => {
                let rel = format!("{}.logits.npy", bundle.name);
                write_matrix(&dir.join(&rel), logits, bundle.source_dtype)?;
                Some(rel)
            }
            None => None,
        };

        splits.insert(
            bundle.name.clone(),
            SplitEntry {
                features_path,
                labels_path,
                logits_path,
                train: bundle.train_split,
            },
        );
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        num_classes,
        feature_dim,
        splits,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
