//! Validation-AUROC grid search for the MahaVar weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::scorers::{classwise_variance, composite_score, min_distance_score, DistanceMatrix, Method, ScoreConfig, TopK};

/// Values tried for α by default: the 19 published sensitivity columns plus
/// a coarse tail up to 10.
pub const DEFAULT_ALPHA_GRID: [f64; 26] = [
    0.0, 0.0001, 0.0003, 0.0005, 0.001, 0.002, 0.003, 0.005, 0.007, 0.01, 0.012, 0.015, 0.02, 0.03, 0.05, 0.07,
    0.1, 0.15, 0.2, 0.3, 0.5, 1.0, 2.0, 5.0, 7.0, 10.0,
];

pub fn default_grid() -> Vec<f64> {
    DEFAULT_ALPHA_GRID.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunedParameter {
    Alpha,
    Beta,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub parameter: TunedParameter,
    pub grid: Vec<f64>,
    pub auroc_per_candidate: Vec<f64>,
    pub best_value: f64,
    pub best_auroc: f64,
    /// Config with the best value filled in.
    pub best_config: ScoreConfig,
}

impl TuneResult {
    fn from_curve(parameter: TunedParameter, grid: Vec<f64>, curve: Vec<f64>, base: ScoreConfig) -> Result<Self> {
        // First occurrence of the maximum, i.e. the earliest grid point on ties.
        let mut best = 0;
        for (i, &v) in curve.iter().enumerate() {
            if v > curve[best] {
                best = i;
            }
        }
        let best_value = grid[best];
        let best_config = apply(base, parameter, best_value)?;
        Ok(TuneResult {
            parameter,
            best_auroc: curve[best],
            best_value,
            best_config,
            grid,
            auroc_per_candidate: curve,
        })
    }
}

fn apply(mut config: ScoreConfig, parameter: TunedParameter, value: f64) -> Result<ScoreConfig> {
    match parameter {
        TunedParameter::Alpha => config.alpha = value,
        TunedParameter::Beta => config.beta = value,
        TunedParameter::TopK => {
            if value.fract() != 0.0 || value < 2.0 {
                return Err(Error::Config(format!("top_k candidates must be integers ≥ 2, got {value}")));
            }
            config.top_k = TopK::K(value as usize);
        }
    }
    Ok(config)
}

fn check_pair(dm_id: &DistanceMatrix, dm_ood: &DistanceMatrix) -> Result<()> {
    if dm_id.statistics_id() != dm_ood.statistics_id() {
        return Err(Error::Config(format!(
            "ID and OOD distances come from different statistics ({} vs {})",
            dm_id.statistics_id(),
            dm_ood.statistics_id()
        )));
    }
    if dm_id.metric() != dm_ood.metric() || dm_id.normalization() != dm_ood.normalization() {
        return Err(Error::Config("ID and OOD distances use different metric or normalization".into()));
    }
    if dm_id.num_classes() != dm_ood.num_classes() {
        return Err(Error::Dimension {
            expected: dm_id.num_classes(),
            actual: dm_ood.num_classes(),
        });
    }
    Ok(())
}

fn check_grid(grid: &[f64], nonnegative: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("tuning grid is empty".into()));
    }
    for &v in grid {
        if !v.is_finite() || (nonnegative && v < 0.0) {
            return Err(Error::Config(format!("invalid grid value {v}")));
        }
    }
    Ok(())
}

/// MahaVar base config matching the distances' metric and normalization.
pub fn base_config(dm: &DistanceMatrix) -> ScoreConfig {
    ScoreConfig {
        metric: dm.metric(),
        normalization: dm.normalization(),
        ..ScoreConfig::mahavar(0.0)
    }
}

/// AUROC of `−min + α·Var` for every α in `grid`, with Var over all classes.
pub fn tune_alpha(dm_id: &DistanceMatrix, dm_ood: &DistanceMatrix, grid: &[f64]) -> Result<TuneResult> {
    check_pair(dm_id, dm_ood)?;
    check_grid(grid, true)?;
    let id_min = min_distance_score(dm_id).scores;
    let ood_min = min_distance_score(dm_ood).scores;
    let id_var = classwise_variance(dm_id, TopK::All)?;
    let ood_var = classwise_variance(dm_ood, TopK::All)?;
    let combine = |m: &[f64], v: &[f64], a: f64| -> Vec<f64> { m.iter().zip(v).map(|(s, var)| s + a * var).collect() };
    let curve: Vec<f64> = grid
        .par_iter()
        .map(|&a| auroc(&combine(&id_min, &id_var, a), &combine(&ood_min, &ood_var, a)))
        .collect::<Result<_>>()?;
    TuneResult::from_curve(TunedParameter::Alpha, grid.to_vec(), curve, base_config(dm_id))
}

/// Generic sweep of one parameter of `base` (α, β or top_k) through full
/// composite scoring.
pub fn tune_parameter(
    dm_id: &DistanceMatrix,
    dm_ood: &DistanceMatrix,
    base: &ScoreConfig,
    parameter: TunedParameter,
    grid: &[f64],
) -> Result<TuneResult> {
    check_pair(dm_id, dm_ood)?;
    check_grid(grid, parameter != TunedParameter::Beta)?;
    if parameter == TunedParameter::Beta && base.method != Method::MahavarSkew {
        return Err(Error::Config("β only affects the mahavar_skew method".into()));
    }
    let curve: Vec<f64> = grid
        .par_iter()
        .map(|&v| {
            let config = apply(*base, parameter, v)?;
            let id = composite_score(dm_id, &config)?;
            let ood = composite_score(dm_ood, &config)?;
            auroc(&id.scores, &ood.scores)
        })
        .collect::<Result<_>>()?;
    TuneResult::from_curve(parameter, grid.to_vec(), curve, *base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn dm(rows: &[[f64; 3]], id: &str) -> DistanceMatrix {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        DistanceMatrix::new(
            DMatrix::from_row_slice(rows.len(), 3, &flat),
            crate::scorers::Metric::Mahalanobis,
            crate::gaussian_stats::NormalizationMode::L2,
            id,
        )
        .unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 26);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 10.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        let published = [
            0.0, 0.0001, 0.0003, 0.0005, 0.001, 0.002, 0.003, 0.005, 0.007, 0.01, 0.012, 0.015, 0.02, 0.03, 0.05, 0.07,
            0.1, 0.15, 0.2,
        ];
        assert_eq!(&g[..19], &published);
        for selected in [0.01, 0.03, 0.05, 0.07, 0.1] {
            assert!(g.contains(&selected));
        }
    }

    #[test]
    fn single_zero_grid_matches_mahalanobis_pp() {
        let id = dm(&[[1.0, 5.0, 6.0], [0.5, 4.0, 9.0]], "s");
        let ood = dm(&[[2.0, 2.5, 3.0], [1.0, 1.1, 1.2]], "s");
        let r = tune_alpha(&id, &ood, &[0.0]).unwrap();
        let pp = auroc(&min_distance_score(&id).scores, &min_distance_score(&ood).scores).unwrap();
        assert_eq!(r.best_value, 0.0);
        assert_eq!(r.best_auroc, pp);
    }

    #[test]
    fn variance_rescues_min_distance_failure() {
        // Same nearest distance; ID has the sharp-minimum profile.
        let id = dm(&[[2.0, 20.0, 20.0], [2.0, 30.0, 31.0]], "s");
        let ood = dm(&[[1.9, 2.1, 2.2], [1.5, 1.6, 1.7]], "s");
        let r = tune_alpha(&id, &ood, &[0.0, 0.5]).unwrap();
        assert_eq!(r.auroc_per_candidate[0], 0.0);
        assert_eq!(r.best_value, 0.5);
        assert_eq!(r.best_auroc, 1.0);
        assert_eq!(r.best_config.alpha, 0.5);
    }

    #[test]
    fn ties_prefer_smallest_alpha() {
        let id = dm(&[[0.0, 10.0, 10.0]], "s");
        let ood = dm(&[[5.0, 5.0, 5.0]], "s");
        let r = tune_alpha(&id, &ood, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.auroc_per_candidate, vec![1.0; 3]);
        assert_eq!(r.best_value, 0.0);
    }

    #[test]
    fn fast_path_matches_composite_scoring() {
        let id = dm(&[[1.0, 5.0, 6.0], [0.5, 4.0, 9.0], [3.0, 3.1, 7.0]], "s");
        let ood = dm(&[[2.0, 2.5, 3.0], [1.0, 1.1, 1.2], [0.7, 8.0, 8.5]], "s");
        let grid = default_grid();
        let fast = tune_alpha(&id, &ood, &grid).unwrap();
        let slow = tune_parameter(&id, &ood, &base_config(&id), TunedParameter::Alpha, &grid).unwrap();
        assert_eq!(fast.auroc_per_candidate, slow.auroc_per_candidate);
        assert_eq!(fast.best_config, slow.best_config);
    }

    #[test]
    fn permuted_grid_permutes_curve() {
        let id = dm(&[[1.0, 5.0, 6.0], [0.5, 4.0, 9.0], [3.0, 3.1, 7.0]], "s");
        let ood = dm(&[[2.0, 2.5, 3.0], [1.0, 1.1, 1.2], [0.7, 8.0, 8.5]], "s");
        let grid = default_grid();
        let rev: Vec<f64> = grid.iter().rev().copied().collect();
        let a = tune_alpha(&id, &ood, &grid).unwrap();
        let b = tune_alpha(&id, &ood, &rev).unwrap();
        let b_back: Vec<f64> = b.auroc_per_candidate.iter().rev().copied().collect();
        assert_eq!(a.auroc_per_candidate, b_back);
    }

    #[test]
    fn rejects_bad_inputs() {
        let id = dm(&[[1.0, 2.0, 3.0]], "a");
        let other = dm(&[[1.0, 2.0, 3.0]], "b");
        assert!(tune_alpha(&id, &other, &[0.0]).is_err());
        assert!(tune_alpha(&id, &id, &[]).is_err());
        assert!(tune_alpha(&id, &id, &[-1.0]).is_err());
        assert!(tune_alpha(&id, &id, &[f64::NAN]).is_err());
        assert!(tune_parameter(&id, &id, &base_config(&id), TunedParameter::Beta, &[1.0]).is_err());
        assert!(tune_parameter(&id, &id, &base_config(&id), TunedParameter::TopK, &[2.5]).is_err());
    }

    #[test]
    fn beta_and_top_k_sweeps() {
        let id = dm(&[[1.0, 5.0, 6.0], [0.5, 4.0, 9.0]], "s");
        let ood = dm(&[[2.0, 2.5, 3.0], [1.0, 1.1, 1.2]], "s");
        let base = ScoreConfig {
            metric: id.metric(),
            normalization: id.normalization(),
            ..ScoreConfig::mahavar_skew(0.05, 0.0)
        };
        let r = tune_parameter(&id, &ood, &base, TunedParameter::Beta, &[-10.0, 0.0, 10.0]).unwrap();
        assert_eq!(r.grid.len(), 3);
        assert_eq!(r.best_config.beta, r.best_value);
        let r = tune_parameter(&id, &ood, &base, TunedParameter::TopK, &[2.0, 3.0]).unwrap();
        assert!(matches!(r.best_config.top_k, TopK::K(_)));
        assert!(tune_parameter(&id, &ood, &base, TunedParameter::TopK, &[4.0]).is_err());
    }
}
