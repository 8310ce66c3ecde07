//! AUROC and FPR at a fixed TPR for ID-vs-OOD score vectors.
//!
//! Scores are higher-is-ID. AUROC is P(id > ood) + ½·P(id = ood), computed
//! through midranks. The FPR threshold T is the largest value with at least
//! ⌈tpr·n_id⌉ ID scores ≥ T, and FPR counts OOD scores ≥ T.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorers::{ScoreConfig, ScoreVector};

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub scorer_config: ScoreConfig,
}

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Invalid(format!(
            "need non-empty score vectors (n_id = {}, n_ood = {})",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    Ok(())
}

/// Area under the ROC curve with ID as the positive class; ties count ½.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores, ood_scores)?;
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of midranks (1-based) of the ID scores. Ranks are half-integers, so
    // the sum is exact in f64 for any realistic sample size.
    let mut id_rank_sum = 0.0;
    let mut start = 0;
    while start < pooled.len() {
        let mut end = start;
        while end + 1 < pooled.len() && pooled[end + 1].0 == pooled[start].0 {
            end += 1;
        }
        let midrank = (start + end) as f64 / 2.0 + 1.0;
        let id_in_group = pooled[start..=end].iter().filter(|p| p.1).count();
        id_rank_sum += midrank * id_in_group as f64;
        start = end + 1;
    }
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    let u = id_rank_sum - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

/// FPR at the threshold that keeps at least `tpr` of the ID scores.
/// Returns `(fpr, threshold)`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<(f64, f64)> {
    check_scores(id_scores, ood_scores)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Invalid(format!("tpr must lie in (0, 1], got {tpr}")));
    }
    let n_id = id_scores.len();
    // Guard against 0.95·n landing a hair above an integer.
    let needed = ((tpr * n_id as f64) - 1e-9).ceil().max(1.0) as usize;
    let needed = needed.min(n_id);
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[needed - 1];
    let passing = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok((passing as f64 / ood_scores.len() as f64, threshold))
}

/// AUROC and FPR@95 for one ID/OOD pair scored with the same config.
pub fn evaluate(id_scores: &ScoreVector, ood_scores: &ScoreVector) -> Result<DetectionReport> {
    if id_scores.config != ood_scores.config {
        return Err(Error::Config(format!(
            "ID and OOD scores use different configs: {:?} vs {:?}",
            id_scores.config, ood_scores.config
        )));
    }
    let auroc = auroc(&id_scores.scores, &ood_scores.scores)?;
    let (fpr, threshold) = fpr_at_tpr(&id_scores.scores, &ood_scores.scores, DEFAULT_TPR)?;
    Ok(DetectionReport {
        auroc,
        fpr_at_95: fpr,
        threshold,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
        scorer_config: id_scores.config,
    })
}
