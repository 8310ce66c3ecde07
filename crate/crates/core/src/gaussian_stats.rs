//! Class means and a tied, ridge-regularized covariance over (optionally
//! L2-normalized) features.
//!
//! The pooled covariance divides by the total sample count N:
//!
//! ```text
//! Σ = (1/N) Σ_c Σ_{i: y_i = c} (x_i − μ_c)(x_i − μ_c)ᵀ
//! ```
//!
//! and the Cholesky factor of `Σ + λI` is kept for distance evaluation.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_store::{self, Dtype, FeatureBundle};

/// Ridge added to the pooled covariance unless configured otherwise.
pub const DEFAULT_REGULARIZER: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    None,
    #[default]
    L2,
    CenteredL2,
}

impl NormalizationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationMode::None => "none",
            NormalizationMode::L2 => "l2",
            NormalizationMode::CenteredL2 => "centered_l2",
        }
    }
}

impl std::str::FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormalizationMode::None),
            "l2" => Ok(NormalizationMode::L2),
            "centered_l2" => Ok(NormalizationMode::CenteredL2),
            other => Err(Error::Config(format!(
                "unknown normalization '{other}' (expected none, l2 or centered_l2)"
            ))),
        }
    }
}

/// Feature preprocessing applied before any statistics or distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mode: NormalizationMode,
    /// Global training mean, required for `centered_l2`.
    pub global_mean: Option<DVector<f64>>,
}

impl Normalization {
    pub fn none() -> Self {
        Normalization {
            mode: NormalizationMode::None,
            global_mean: None,
        }
    }

    pub fn l2() -> Self {
        Normalization {
            mode: NormalizationMode::L2,
            global_mean: None,
        }
    }

    pub fn centered_l2(global_mean: DVector<f64>) -> Result<Self> {
        let norm = Normalization {
            mode: NormalizationMode::CenteredL2,
            global_mean: Some(global_mean),
        };
        norm.validate()?;
        Ok(norm)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.mode, &self.global_mean) {
            (NormalizationMode::CenteredL2, None) => {
                Err(Error::Config("centered_l2 normalization needs a global mean".into()))
            }
            (NormalizationMode::CenteredL2, Some(mean)) if mean.iter().any(|v| !v.is_finite()) => {
                Err(Error::Config("global mean has non-finite entries".into()))
            }
            _ => Ok(()),
        }
    }

    /// Normalizes a single row vector; `row` is only used in error reports.
    pub fn apply_row(&self, x: &DVector<f64>, row: usize) -> Result<DVector<f64>> {
        let centered = match (&self.mode, &self.global_mean) {
            (NormalizationMode::None, _) => return Ok(x.clone()),
            (NormalizationMode::L2, _) => x.clone(),
            (NormalizationMode::CenteredL2, Some(mean)) => {
                if mean.len() != x.len() {
                    return Err(Error::Dimension {
                        expected: mean.len(),
                        actual: x.len(),
                    });
                }
                x - mean
            }
            (NormalizationMode::CenteredL2, None) => {
                return Err(Error::Config("centered_l2 normalization needs a global mean".into()))
            }
        };
        let norm = centered.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormRow { row });
        }
        Ok(centered / norm)
    }

    /// Row-wise normalization of an N×d matrix.
    pub fn apply(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        if self.mode == NormalizationMode::None {
            return Ok(features.clone());
        }
        let mut out = features.clone();
        for r in 0..features.nrows() {
            let row = features.row(r).transpose();
            let normalized = self.apply_row(&row, r)?;
            out.set_row(r, &normalized.transpose());
        }
        Ok(out)
    }
}

/// Free-function form of [`Normalization::apply`].
pub fn normalize(features: &DMatrix<f64>, normalization: &Normalization) -> Result<DMatrix<f64>> {
    normalization.apply(features)
}

/// Fitted class-conditional Gaussian model with a shared covariance.
#[derive(Debug, Clone)]
pub struct ClassStatistics {
    means: DMatrix<f64>,
    tied_covariance: DMatrix<f64>,
    precision_factor: DMatrix<f64>,
    regularizer: f64,
    normalization: Normalization,
    class_counts: Vec<usize>,
    total_count: usize,
    /// L⁻¹ μ_c as columns (d×C).
    whitened_means: DMatrix<f64>,
    id: String,
}

impl PartialEq for ClassStatistics {
    fn eq(&self, other: &Self) -> bool {
        self.means == other.means
            && self.tied_covariance == other.tied_covariance
            && self.precision_factor == other.precision_factor
            && self.regularizer == other.regularizer
            && self.normalization == other.normalization
            && self.class_counts == other.class_counts
            && self.total_count == other.total_count
    }
}

impl ClassStatistics {
    /// Assembles statistics from already-computed means (C×d) and covariance
    /// (d×d), factorizing `covariance + λI`.
    pub fn from_parts(
        means: DMatrix<f64>,
        tied_covariance: DMatrix<f64>,
        regularizer: f64,
        normalization: Normalization,
        class_counts: Vec<usize>,
    ) -> Result<Self> {
        let (c, d) = means.shape();
        if tied_covariance.shape() != (d, d) {
            return Err(Error::Dimension {
                expected: d,
                actual: tied_covariance.nrows(),
            });
        }
        if class_counts.len() != c {
            return Err(Error::Dimension {
                expected: c,
                actual: class_counts.len(),
            });
        }
        if !(regularizer > 0.0 && regularizer.is_finite()) {
            return Err(Error::Config(format!("regularizer must be positive, got {regularizer}")));
        }
        normalization.validate()?;
        if let Some(mean) = &normalization.global_mean {
            if mean.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: mean.len(),
                });
            }
        }

        let regularized = &tied_covariance + DMatrix::identity(d, d) * regularizer;
        let precision_factor = match Cholesky::new(regularized.clone()) {
            Some(chol) => chol.unpack(),
            None => {
                let min_eigenvalue = SymmetricEigen::new(regularized)
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                return Err(Error::Cholesky { min_eigenvalue });
            }
        };
        let whitened_means = solve_lower(&precision_factor, &means.transpose());
        let total_count = class_counts.iter().sum();
        let mut stats = ClassStatistics {
            means,
            tied_covariance,
            precision_factor,
            regularizer,
            normalization,
            class_counts,
            total_count,
            whitened_means,
            id: String::new(),
        };
        stats.id = stats.fingerprint();
        Ok(stats)
    }

    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// C×d, one class mean per row.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn tied_covariance(&self) -> &DMatrix<f64> {
        &self.tied_covariance
    }

    /// Lower-triangular L with L·Lᵀ = Σ + λI.
    pub fn precision_factor(&self) -> &DMatrix<f64> {
        &self.precision_factor
    }

    pub fn regularizer(&self) -> f64 {
        self.regularizer
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn total_count(&self) -> usize {
        self.total_count
    }

    /// Whitened class means L⁻¹μ_c as columns of a d×C matrix.
    pub fn whitened_means(&self) -> &DMatrix<f64> {
        &self.whitened_means
    }

    /// Stable content hash used to check that two distance matrices came from
    /// the same fit.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Solves L·y = v.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        solve_lower(&self.precision_factor, &m).column(0).into_owned()
    }

    /// Cheap condition number estimate of Σ + λI from the Cholesky diagonal:
    /// (max Lᵢᵢ / min Lᵢᵢ)², a lower bound on the true condition number.
    pub fn condition_estimate(&self) -> f64 {
        let diag = self.precision_factor.diagonal();
        let max = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        (max / min).powi(2)
    }

    /// Re-checks the structural invariants of a fitted model.
    pub fn check_invariants(&self) -> Result<()> {
        let sym_err = (&self.tied_covariance - self.tied_covariance.transpose()).norm();
        let scale = self.tied_covariance.norm().max(f64::MIN_POSITIVE);
        if sym_err > 1e-12 * scale {
            return Err(Error::Invalid(format!("covariance asymmetric: {sym_err:e}")));
        }
        if self.class_counts.iter().sum::<usize>() != self.total_count {
            return Err(Error::Invalid("class counts do not sum to total".into()));
        }
        let d = self.dim();
        let target = &self.tied_covariance + DMatrix::identity(d, d) * self.regularizer;
        let recon = &self.precision_factor * self.precision_factor.transpose();
        let rel = (&recon - &target).norm() / target.norm();
        if rel > 1e-9 {
            return Err(Error::Invalid(format!("L·Lᵀ reconstruction error {rel:e}")));
        }
        Ok(())
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let (c, d) = self.means.shape();
        hasher.update((c as u64).to_le_bytes());
        hasher.update((d as u64).to_le_bytes());
        for v in self.means.iter().chain(self.tied_covariance.iter()) {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(self.regularizer.to_le_bytes());
        hasher.update(self.normalization.mode.as_str().as_bytes());
        if let Some(mean) = &self.normalization.global_mean {
            for v in mean.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Persists the model as NPY tensors plus `stats.json` in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        feature_store::write_matrix(&dir.join(MEANS_FILE), &self.means, Dtype::F64)?;
        feature_store::write_matrix(&dir.join(COVARIANCE_FILE), &self.tied_covariance, Dtype::F64)?;
        let global_mean_path = match &self.normalization.global_mean {
            Some(mean) => {
                feature_store::write_vector(&dir.join(GLOBAL_MEAN_FILE), mean.as_slice())?;
                Some(GLOBAL_MEAN_FILE.to_string())
            }
            None => None,
        };
        let record = StatsRecord {
            schema_version: feature_store::SCHEMA_VERSION,
            num_classes: self.num_classes(),
            feature_dim: self.dim(),
            regularizer: self.regularizer,
            normalization: self.normalization.mode,
            class_counts: self.class_counts.clone(),
            total_count: self.total_count,
            means_path: MEANS_FILE.to_string(),
            covariance_path: COVARIANCE_FILE.to_string(),
            global_mean_path,
            statistics_id: self.id.clone(),
        };
        let path = dir.join(STATS_FILE);
        let mut text = serde_json::to_string_pretty(&record).expect("stats record serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: StatsRecord = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let (means, _) = feature_store::read_matrix(&dir.join(&record.means_path))?;
        let (covariance, _) = feature_store::read_matrix(&dir.join(&record.covariance_path))?;
        let normalization = match (record.normalization, &record.global_mean_path) {
            (NormalizationMode::CenteredL2, Some(rel)) => {
                Normalization::centered_l2(DVector::from_vec(feature_store::read_vector(&dir.join(rel))?))?
            }
            (NormalizationMode::CenteredL2, None) => {
                return Err(Error::Manifest {
                    path,
                    reason: "centered_l2 statistics without global_mean_path".into(),
                })
            }
            (mode, _) => Normalization {
                mode,
                global_mean: None,
            },
        };
        if means.shape() != (record.num_classes, record.feature_dim) {
            return Err(Error::Shape {
                path: dir.join(&record.means_path),
                reason: format!(
                    "means are {:?}, stats.json says {}×{}",
                    means.shape(),
                    record.num_classes,
                    record.feature_dim
                ),
            });
        }
        let stats = ClassStatistics::from_parts(
            means,
            covariance,
            record.regularizer,
            normalization,
            record.class_counts,
        )?;
        if stats.id != record.statistics_id {
            return Err(Error::Manifest {
                path,
                reason: format!(
                    "statistics_id {} does not match stored tensors ({})",
                    record.statistics_id, stats.id
                ),
            });
        }
        Ok(stats)
    }
}

pub const STATS_FILE: &str = "stats.json";
const MEANS_FILE: &str = "means.npy";
const COVARIANCE_FILE: &str = "covariance.npy";
const GLOBAL_MEAN_FILE: &str = "global_mean.npy";

#[derive(Debug, Serialize, Deserialize)]
struct StatsRecord {
    schema_version: u32,
    num_classes: usize,
    feature_dim: usize,
    regularizer: f64,
    normalization: NormalizationMode,
    class_counts: Vec<usize>,
    total_count: usize,
    means_path: String,
    covariance_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_mean_path: Option<String>,
    statistics_id: String,
}

/// Forward substitution L·Y = B for lower-triangular L.
pub(crate) fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

/// Fits per-class means and the pooled covariance.
pub fn fit(train: &FeatureBundle, mode: NormalizationMode, regularizer: f64) -> Result<ClassStatistics> {
    let labels = train.labels.as_ref().ok_or_else(|| Error::MissingLabels {
        split: train.name.clone(),
    })?;
    if !(regularizer > 0.0 && regularizer.is_finite()) {
        return Err(Error::Config(format!("regularizer must be positive, got {regularizer}")));
    }
    let num_classes = train.num_classes;
    let d = train.dim();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (row, &label) in labels.iter().enumerate() {
        members[label].push(row);
    }
    if let Some((class, rows)) = members.iter().enumerate().find(|(_, rows)| rows.len() < 2) {
        return Err(Error::MissingClass {
            class,
            count: rows.len(),
            required: 2,
        });
    }

    let normalization = match mode {
        NormalizationMode::None => Normalization::none(),
        NormalizationMode::L2 => Normalization::l2(),
        NormalizationMode::CenteredL2 => {
            let n = train.len() as f64;
            let mean = train.features.row_sum().transpose() / n;
            Normalization::centered_l2(mean)?
        }
    };
    let x = normalization.apply(&train.features)?;

    // Per-class mean and scatter, reduced in class order for determinism.
    let per_class: Vec<(DVector<f64>, DMatrix<f64>)> = members
        .par_iter()
        .map(|rows| {
            let n_c = rows.len() as f64;
            let mut mean = DVector::zeros(d);
            for &r in rows {
                mean += x.row(r).transpose();
            }
            mean /= n_c;
            let mut centered = DMatrix::zeros(rows.len(), d);
            for (i, &r) in rows.iter().enumerate() {
                centered.set_row(i, &(x.row(r) - mean.transpose()));
            }
            (mean, centered.transpose() * centered)
        })
        .collect();

    let mut means = DMatrix::zeros(num_classes, d);
    let mut scatter = DMatrix::zeros(d, d);
    for (c, (mean, s)) in per_class.into_iter().enumerate() {
        means.set_row(c, &mean.transpose());
        scatter += s;
    }
    let mut covariance = scatter / train.len() as f64;
    covariance = (&covariance + covariance.transpose()) * 0.5;

    let counts = members.iter().map(Vec::len).collect();
    ClassStatistics::from_parts(means, covariance, regularizer, normalization, counts)
}
