//! Class-wise distances and the OOD scores built on them.
//!
//! Every score follows the convention that higher means more in-distribution.
//! The MahaVar family combines the nearest-class distance with moments of the
//! whole row of class-wise distances:
//!
//! ```text
//! S(x) = −min_c d_c(x) + α·Var_c[d_c(x)] (+ β·Skew_c[d_c(x)])
//! ```
//!
//! Variance and skewness are population moments (divisor = number of classes
//! used).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{self, FeatureBundle};
use crate::gaussian_stats::{ClassStatistics, NormalizationMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Squared Mahalanobis distance under the regularized tied covariance.
    #[default]
    Mahalanobis,
    /// Squared Euclidean distance.
    L2,
    /// Plain (unsquared) L1 distance.
    L1,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(Metric::Mahalanobis),
            "l2" => Ok(Metric::L2),
            "l1" => Ok(Metric::L1),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mahalanobis,
    MahalanobisPp,
    #[default]
    Mahavar,
    MahavarSkew,
    Msp,
    Maxlogit,
    Energy,
}

impl Method {
    pub fn uses_logits(self) -> bool {
        matches!(self, Method::Msp | Method::Maxlogit | Method::Energy)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mahalanobis => "mahalanobis",
            Method::MahalanobisPp => "mahalanobis_pp",
            Method::Mahavar => "mahavar",
            Method::MahavarSkew => "mahavar_skew",
            Method::Msp => "msp",
            Method::Maxlogit => "maxlogit",
            Method::Energy => "energy",
        }
    }

    /// Feature normalization each distance method is defined with.
    pub fn default_normalization(self) -> NormalizationMode {
        match self {
            Method::Mahalanobis => NormalizationMode::None,
            _ => NormalizationMode::L2,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Mahalanobis,
            Method::MahalanobisPp,
            Method::Mahavar,
            Method::MahavarSkew,
            Method::Msp,
            Method::Maxlogit,
            Method::Energy,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown scoring method '{s}'")))
    }
}

/// Number of nearest classes entering the variance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopK {
    #[default]
    All,
    K(usize),
}

impl TopK {
    fn resolve(self, num_classes: usize) -> Result<usize> {
        match self {
            TopK::All => Ok(num_classes),
            TopK::K(k) if (2..=num_classes).contains(&k) => Ok(k),
            TopK::K(k) => Err(Error::Config(format!(
                "top_k {k} outside [2, {num_classes}]"
            ))),
        }
    }
}

impl Serialize for TopK {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TopK::All => s.serialize_str("all"),
            TopK::K(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(TopK::K(k)),
            Raw::Word(w) if w == "all" => Ok(TopK::All),
            Raw::Word(w) => w
                .parse()
                .map(TopK::K)
                .map_err(|_| serde::de::Error::custom(format!("top_k must be an integer or \"all\", got {w:?}"))),
        }
    }
}

impl std::str::FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(TopK::All);
        }
        s.parse()
            .map(TopK::K)
            .map_err(|_| Error::Config(format!("top_k must be an integer or 'all', got '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub top_k: TopK,
    pub metric: Metric,
    pub normalization: NormalizationMode,
    pub temperature: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            method: Method::Mahavar,
            alpha: 0.0,
            beta: 0.0,
            top_k: TopK::All,
            metric: Metric::Mahalanobis,
            normalization: NormalizationMode::L2,
            temperature: 1.0,
        }
    }
}

impl ScoreConfig {
    /// Config for `method` with its customary normalization and zero weights.
    pub fn for_method(method: Method) -> Self {
        ScoreConfig {
            method,
            normalization: method.default_normalization(),
            ..ScoreConfig::default()
        }
    }

    pub fn mahalanobis() -> Self {
        Self::for_method(Method::Mahalanobis)
    }

    pub fn mahalanobis_pp() -> Self {
        Self::for_method(Method::MahalanobisPp)
    }

    pub fn mahavar(alpha: f64) -> Self {
        ScoreConfig {
            alpha,
            ..Self::for_method(Method::Mahavar)
        }
    }

    pub fn mahavar_skew(alpha: f64, beta: f64) -> Self {
        ScoreConfig {
            alpha,
            beta,
            ..Self::for_method(Method::MahavarSkew)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and ≥ 0, got {}", self.alpha)));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite, got {}", self.beta)));
        }
        if let TopK::K(k) = self.top_k {
            if k < 2 {
                return Err(Error::Config(format!("top_k must be at least 2, got {k}")));
            }
        }
        if self.method == Method::Energy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "energy temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// N×C matrix of per-sample, per-class distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: DMatrix<f64>,
    metric: Metric,
    normalization: NormalizationMode,
    statistics_id: String,
}

impl DistanceMatrix {
    /// Wraps precomputed distances. Entries must be finite and non-negative.
    pub fn new(
        values: DMatrix<f64>,
        metric: Metric,
        normalization: NormalizationMode,
        statistics_id: impl Into<String>,
    ) -> Result<Self> {
        if let Some((idx, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            let (row, col) = (idx % values.nrows(), idx / values.nrows());
            return Err(Error::Invalid(format!(
                "distance at row {row}, class {col} is {v}; entries must be finite and ≥ 0"
            )));
        }
        Ok(DistanceMatrix {
            values,
            metric,
            normalization,
            statistics_id: statistics_id.into(),
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn normalization(&self) -> NormalizationMode {
        self.normalization
    }

    pub fn statistics_id(&self) -> &str {
        &self.statistics_id
    }

    pub fn num_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    /// Row-stacks matrices computed from the same statistics.
    pub fn stack(parts: &[DistanceMatrix]) -> Result<DistanceMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("nothing to stack".into()))?;
        for p in parts {
            if p.statistics_id != first.statistics_id || p.metric != first.metric || p.normalization != first.normalization {
                return Err(Error::Config("distance matrices come from different statistics".into()));
            }
        }
        let c = first.num_classes();
        let n = parts.iter().map(|p| p.num_samples()).sum();
        let mut values = DMatrix::zeros(n, c);
        let mut at = 0;
        for p in parts {
            values.view_mut((at, 0), (p.num_samples(), c)).copy_from(&p.values);
            at += p.num_samples();
        }
        Ok(DistanceMatrix {
            values,
            metric: first.metric,
            normalization: first.normalization,
            statistics_id: first.statistics_id.clone(),
        })
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    fn map_rows(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> Vec<f64> {
        (0..self.num_samples())
            .into_par_iter()
            .map(|i| f(&self.row(i)))
            .collect()
    }
}

/// Per-sample scores, higher = more in-distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub config: ScoreConfig,
}

#[derive(Serialize, Deserialize)]
struct ScoreEcho {
    schema_version: u32,
    num_samples: usize,
    scores_path: String,
    convention: String,
    config: ScoreConfig,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Writes `<name>.npy` (f64 scores) and `<name>.json` (config echo).
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let scores_path = format!("{name}.npy");
        feature_store::write_vector(&dir.join(&scores_path), &self.scores)?;
        let echo = ScoreEcho {
            schema_version: feature_store::SCHEMA_VERSION,
            num_samples: self.scores.len(),
            scores_path,
            convention: "higher_is_more_in_distribution".into(),
            config: self.config,
        };
        let path = dir.join(format!("{name}.json"));
        let mut text = serde_json::to_string_pretty(&echo).expect("score echo serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let echo: ScoreEcho = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        let scores = feature_store::read_vector(&dir.join(&echo.scores_path))?;
        if scores.len() != echo.num_samples {
            return Err(Error::Shape {
                path,
                reason: format!("{} scores but echo says {}", scores.len(), echo.num_samples),
            });
        }
        Ok(ScoreVector {
            scores,
            config: echo.config,
        })
    }
}

/// Distances from every (normalized) row of `bundle` to every class mean.
pub fn class_distances(bundle: &FeatureBundle, stats: &ClassStatistics, metric: Metric) -> Result<DistanceMatrix> {
    class_distances_for(&bundle.features, stats, metric)
}

/// As [`class_distances`], for a raw N×d feature matrix.
pub fn class_distances_for(features: &DMatrix<f64>, stats: &ClassStatistics, metric: Metric) -> Result<DistanceMatrix> {
    if features.ncols() != stats.dim() {
        return Err(Error::Dimension {
            expected: stats.dim(),
            actual: features.ncols(),
        });
    }
    let n = features.nrows();
    let c = stats.num_classes();
    let normalization = stats.normalization();
    let means = stats.means();
    let whitened = stats.whitened_means();

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let x = normalization.apply_row(&features.row(i).transpose(), i)?;
            let row = match metric {
                Metric::Mahalanobis => {
                    let w = stats.whiten(&x);
                    (0..c)
                        .map(|k| w.iter().zip(whitened.column(k).iter()).map(|(a, b)| (a - b) * (a - b)).sum())
                        .collect()
                }
                Metric::L2 => (0..c)
                    .map(|k| x.iter().zip(means.row(k).iter()).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect(),
                Metric::L1 => (0..c)
                    .map(|k| x.iter().zip(means.row(k).iter()).map(|(a, b)| (a - b).abs()).sum())
                    .collect(),
            };
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let values = DMatrix::from_row_iterator(n, c, rows.into_iter().flatten());
    DistanceMatrix::new(values, metric, normalization.mode, stats.id())
}

/// Single-sample Mahalanobis distance vector; used by oracles and tests.
pub fn mahalanobis_row(x: &DVector<f64>, stats: &ClassStatistics) -> Vec<f64> {
    let w = stats.whiten(x);
    let whitened = stats.whitened_means();
    (0..stats.num_classes())
        .map(|k| (&w - whitened.column(k)).norm_squared())
        .collect()
}

fn row_min(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::INFINITY, f64::min)
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn population_skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = var.sqrt();
    // Constant rows (up to rounding) have no defined skew; report 0.
    if sigma <= 1e-14 * scale || sigma == 0.0 {
        return 0.0;
    }
    values.iter().map(|v| ((v - mean) / sigma).powi(3)).sum::<f64>() / n
}

/// Variance of the `k` smallest entries of `row`. `k == row.len()` uses the
/// row as-is so that it matches the all-classes variance bit for bit.
fn top_k_variance(row: &[f64], k: usize) -> f64 {
    if k >= row.len() {
        return population_variance(row);
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    population_variance(&sorted[..k])
}

/// `−min_c d_c` per row: the Mahalanobis / Mahalanobis++ score.
pub fn min_distance_score(dm: &DistanceMatrix) -> ScoreVector {
    let method = match (dm.metric, dm.normalization) {
        (Metric::Mahalanobis, NormalizationMode::None) => Method::Mahalanobis,
        _ => Method::MahalanobisPp,
    };
    ScoreVector {
        scores: dm.map_rows(|row| -row_min(row)),
        config: ScoreConfig {
            method,
            metric: dm.metric,
            normalization: dm.normalization,
            ..ScoreConfig::default()
        },
    }
}

/// Population variance over the `top_k` smallest class distances of each row.
pub fn classwise_variance(dm: &DistanceMatrix, top_k: TopK) -> Result<Vec<f64>> {
    let k = top_k.resolve(dm.num_classes())?;
    Ok(dm.map_rows(|row| top_k_variance(row, k)))
}

/// Standardized population skewness of each row; constant rows give 0.
pub fn classwise_skewness(dm: &DistanceMatrix) -> Vec<f64> {
    dm.map_rows(population_skewness)
}

/// `−min + α·Var (+ β·Skew)` according to `config`.
pub fn composite_score(dm: &DistanceMatrix, config: &ScoreConfig) -> Result<ScoreVector> {
    config.validate()?;
    if config.method.uses_logits() {
        return Err(Error::Config(format!(
            "method {} is logit-based and cannot be computed from distances",
            config.method.as_str()
        )));
    }
    if config.metric != dm.metric {
        return Err(Error::Config(format!(
            "config metric {:?} does not match distance metric {:?}",
            config.metric, dm.metric
        )));
    }
    if config.normalization != dm.normalization {
        return Err(Error::Config(format!(
            "config normalization {} does not match statistics normalization {}",
            config.normalization.as_str(),
            dm.normalization.as_str()
        )));
    }
    let k = config.top_k.resolve(dm.num_classes())?;
    let (alpha, beta) = (config.alpha, config.beta);
    let scores = match config.method {
        Method::Mahalanobis | Method::MahalanobisPp => dm.map_rows(|row| -row_min(row)),
        Method::Mahavar => dm.map_rows(|row| -row_min(row) + alpha * top_k_variance(row, k)),
        Method::MahavarSkew => dm.map_rows(|row| {
            -row_min(row) + alpha * top_k_variance(row, k) + beta * population_skewness(row)
        }),
        Method::Msp | Method::Maxlogit | Method::Energy => unreachable!("rejected above"),
    };
    Ok(ScoreVector {
        scores,
        config: *config,
    })
}

/// MSP, MaxLogit or Energy from the bundle's logits.
pub fn logit_score(bundle: &FeatureBundle, config: &ScoreConfig) -> Result<ScoreVector> {
    config.validate()?;
    let logits = bundle.logits.as_ref().ok_or_else(|| Error::MissingLogits {
        split: bundle.name.clone(),
    })?;
    let t = config.temperature;
    let score_row = |row: &[f64]| -> f64 {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match config.method {
            Method::Msp => 1.0 / row.iter().map(|l| (l - max).exp()).sum::<f64>(),
            Method::Maxlogit => max,
            Method::Energy => max + t * row.iter().map(|l| ((l - max) / t).exp()).sum::<f64>().ln(),
            _ => unreachable!("checked below"),
        }
    };
    if !config.method.uses_logits() {
        return Err(Error::Config(format!(
            "method {} is distance-based, not logit-based",
            config.method.as_str()
        )));
    }
    let scores = (0..logits.nrows())
        .into_par_iter()
        .map(|i| score_row(&logits.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    Ok(ScoreVector {
        scores,
        config: *config,
    })
}

/// Each row sorted ascending; column 0 is the nearest class.
pub fn sorted_distance_profile(dm: &DistanceMatrix) -> DMatrix<f64> {
    let (n, c) = dm.values.shape();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = dm.row(i);
            row.sort_by(f64::total_cmp);
            row
        })
        .collect();
    DMatrix::from_row_iterator(n, c, rows.into_iter().flatten())
}

/// Per-rank mean and population standard deviation of the sorted profile.
pub fn rank_summary(profile: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let n = profile.nrows() as f64;
    profile
        .column_iter()
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Distances (when needed) and scores for one bundle in one call.
pub fn score_bundle(bundle: &FeatureBundle, stats: &ClassStatistics, config: &ScoreConfig) -> Result<ScoreVector> {
    if config.method.uses_logits() {
        return logit_score(bundle, config);
    }
    let dm = class_distances(bundle, stats, config.metric)?;
    composite_score(&dm, config)
}
