use std::path::{Path, PathBuf};

use serde::Serialize;

use mahavar::etf_lab::{
    run_projection_suite, run_mahalanobis_suite, run_variance_bound_suite, run_separation_suite, ProjectionReport,
    MahalanobisReport, VarianceBoundReport, SeparationReport,
};
use mahavar::feature_store::{load_bundle, save_bundles, FeatureBundle, MANIFEST_FILE};
use mahavar::gaussian_stats::{fit, ClassStatistics};
use mahavar::metrics::{evaluate, DetectionReport};
use mahavar::scorers::{
    class_distances, classwise_variance, rank_summary, score_bundle, sorted_distance_profile, DistanceMatrix,
    ScoreConfig, ScoreVector,
};
use mahavar::synthetic_bench::{generate, SyntheticSpec};
use mahavar::tuner::{default_grid, tune_alpha, TuneResult};
use mahavar::{Error, Result};

use crate::config::RunConfig;
use crate::table::{pct, Table};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(path, source),
            _ => unreachable!(),
        }
    } else {
        Error::Invalid(format!("{}: {e}", path.display()))
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn load_split(manifest_path: &Path, split: &str) -> Result<FeatureBundle> {
    load_bundle(manifest_path, split)
}

/// Statistics from `statistics_path`, unless the method only needs logits.
fn load_statistics(cfg: &RunConfig) -> Result<Option<ClassStatistics>> {
    if cfg.method.uses_logits() {
        return Ok(None);
    }
    let dir = cfg.statistics_path();
    if !dir.join(mahavar::gaussian_stats::STATS_FILE).exists() {
        return Err(Error::Io {
            path: dir.clone(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no fitted statistics here; run `mahavar fit` first",
            ),
        });
    }
    let stats = ClassStatistics::load(&dir)?;
    if stats.normalization().mode != cfg.normalization_mode() {
        return Err(Error::Config(format!(
            "statistics in {} were fitted with {} normalization but the scorer expects {}",
            dir.display(),
            stats.normalization().mode.as_str(),
            cfg.normalization_mode().as_str()
        )));
    }
    Ok(Some(stats))
}

fn score_split(
    manifest_path: &Path,
    split: &str,
    stats: Option<&ClassStatistics>,
    config: &ScoreConfig,
) -> Result<ScoreVector> {
    let bundle = load_split(manifest_path, split)?;
    match stats {
        Some(s) => score_bundle(&bundle, s, config),
        None => mahavar::scorers::logit_score(&bundle, config),
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let (manifest_path, manifest) = cfg.manifest()?;
    RunConfig::require_splits(&manifest, [&cfg.train_split])?;
    let train = load_split(&manifest_path, &cfg.train_split)?;
    if train.labels.is_none() {
        return Err(Error::MissingLabels {
            split: cfg.train_split.clone(),
        });
    }
    let stats = fit(&train, cfg.normalization_mode(), cfg.regularizer)?;
    let dir = cfg.statistics_path();
    stats.save(&dir)?;

    let mut table = Table::new(&["class", "count"]);
    for (c, n) in stats.class_counts().iter().enumerate() {
        table.row(vec![c.to_string(), n.to_string()]);
    }
    print!("{table}");
    println!(
        "fitted {} classes, d = {}, N = {}, normalization {}, λ = {}",
        stats.num_classes(),
        stats.dim(),
        stats.total_count(),
        stats.normalization().mode.as_str(),
        stats.regularizer()
    );
    println!("condition estimate: {:.6e}", stats.condition_estimate());
    println!("statistics {} written to {}", stats.id(), dir.display());
    Ok(())
}

pub fn cmd_score(cfg: &RunConfig, splits: &[String]) -> Result<()> {
    let (manifest_path, manifest) = cfg.manifest()?;
    let splits: Vec<String> = if splits.is_empty() {
        std::iter::once(cfg.test_id_split.clone())
            .chain(cfg.test_ood_splits.iter().cloned())
            .collect()
    } else {
        splits.to_vec()
    };
    RunConfig::require_splits(&manifest, &splits)?;
    let stats = load_statistics(cfg)?;
    let config = cfg.score_config();
    let dir = cfg.output_dir.join("scores");
    create_dir(&dir)?;
    let mut table = Table::new(&["split", "n", "mean score"]);
    for split in &splits {
        let scores = score_split(&manifest_path, split, stats.as_ref(), &config)?;
        scores.save(&dir, split)?;
        let mean = scores.scores.iter().sum::<f64>() / scores.len() as f64;
        table.row(vec![split.clone(), scores.len().to_string(), format!("{mean:.6}")]);
    }
    print!("{table}");
    println!("scores written to {}", dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalRow {
    pub split: String,
    #[serde(flatten)]
    pub report: DetectionReport,
}

#[derive(Debug, Serialize)]
pub struct EvalAverage {
    pub auroc: f64,
    pub fpr_at_95: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub id_split: String,
    pub config: ScoreConfig,
    pub rows: Vec<EvalRow>,
    pub average: EvalAverage,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let (manifest_path, manifest) = cfg.manifest()?;
    if cfg.test_ood_splits.is_empty() {
        return Err(Error::Config("no OOD test splits configured".into()));
    }
    RunConfig::require_splits(&manifest, std::iter::once(&cfg.test_id_split).chain(&cfg.test_ood_splits))?;
    let stats = load_statistics(cfg)?;
    let config = cfg.score_config();
    let id = score_split(&manifest_path, &cfg.test_id_split, stats.as_ref(), &config)?;
    let mut rows = Vec::new();
    for split in &cfg.test_ood_splits {
        let ood = score_split(&manifest_path, split, stats.as_ref(), &config)?;
        rows.push(EvalRow {
            split: split.clone(),
            report: evaluate(&id, &ood)?,
        });
    }
    let n = rows.len() as f64;
    let average = EvalAverage {
        auroc: rows.iter().map(|r| r.report.auroc).sum::<f64>() / n,
        fpr_at_95: rows.iter().map(|r| r.report.fpr_at_95).sum::<f64>() / n,
    };

    let mut table = Table::new(&["OOD split", "AUROC", "FPR@95"]);
    for r in &rows {
        table.row(vec![r.split.clone(), pct(r.report.auroc), pct(r.report.fpr_at_95)]);
    }
    table.row(vec!["Avg".into(), pct(average.auroc), pct(average.fpr_at_95)]);
    println!("method {} (ID split {})", config.method.as_str(), cfg.test_id_split);
    print!("{table}");

    let report = EvalReport {
        id_split: cfg.test_id_split.clone(),
        config,
        rows,
        average,
    };
    write_json(&cfg.output_dir.join("eval.json"), &report)?;
    Ok(report)
}

pub fn cmd_tune_alpha(cfg: &RunConfig, grid_flag: Option<Vec<f64>>) -> Result<TuneResult> {
    let (manifest_path, manifest) = cfg.manifest()?;
    if cfg.val_ood_splits.is_empty() {
        return Err(Error::Config("no OOD validation splits configured".into()));
    }
    RunConfig::require_splits(&manifest, std::iter::once(&cfg.val_id_split).chain(&cfg.val_ood_splits))?;
    if cfg.method.uses_logits() {
        return Err(Error::Config(format!(
            "α tuning needs a distance-based method, got {}",
            cfg.method.as_str()
        )));
    }
    let stats = load_statistics(cfg)?.expect("distance method");
    let grid = grid_flag.or_else(|| cfg.alpha_grid.clone()).unwrap_or_else(default_grid);
    let dm_id = class_distances(&load_split(&manifest_path, &cfg.val_id_split)?, &stats, cfg.metric)?;
    let ood_parts = cfg
        .val_ood_splits
        .iter()
        .map(|s| class_distances(&load_split(&manifest_path, s)?, &stats, cfg.metric))
        .collect::<Result<Vec<_>>>()?;
    let result = tune_alpha(&dm_id, &DistanceMatrix::stack(&ood_parts)?, &grid)?;

    let mut table = Table::new(&["alpha", "AUROC"]);
    for (a, v) in result.grid.iter().zip(&result.auroc_per_candidate) {
        table.row(vec![format!("{a}"), pct(*v)]);
    }
    print!("{table}");
    println!("best alpha {} with validation AUROC {}", result.best_value, pct(result.best_auroc));
    write_json(&cfg.output_dir.join("tune_alpha.json"), &result)?;
    Ok(result)
}

#[derive(Debug, Serialize)]
pub struct EtfReport {
    pub seed: u64,
    pub variance_bounds: VarianceBoundReport,
    pub projection_identity: ProjectionReport,
    pub separation: SeparationReport,
    pub mahalanobis_analogue: MahalanobisReport,
}

impl EtfReport {
    pub fn failures(&self) -> usize {
        self.variance_bounds.bound_violations
            + self.variance_bounds.exact_mismatches
            + self.projection_identity.identity_failures
            + self.projection_identity.in_span_rho_failures
            + self.projection_identity.dominance_failures
            + self.projection_identity.equality_failures
            + self.separation.separation_failures
            + (self.separation.draws - self.separation.applicable)
            + self.mahalanobis_analogue.failures
    }
}

pub struct EtfArgs {
    pub draws: usize,
    pub identity_draws: usize,
    pub separation_draws: usize,
    pub id_points: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

pub fn cmd_etf_verify(args: &EtfArgs) -> Result<EtfReport> {
    let report = EtfReport {
        seed: args.seed,
        variance_bounds: run_variance_bound_suite(args.draws, args.seed)?,
        projection_identity: run_projection_suite(args.identity_draws, args.seed.wrapping_add(1))?,
        separation: run_separation_suite(args.separation_draws, args.id_points, args.seed.wrapping_add(2))?,
        mahalanobis_analogue: run_mahalanobis_suite(args.identity_draws, args.seed.wrapping_add(3))?,
    };
    let mut table = Table::new(&["check", "draws", "failures", "worst"]);
    let vb = &report.variance_bounds;
    table.row(vec![
        "variance bounds".into(),
        vb.draws.to_string(),
        vb.bound_violations.to_string(),
        format!("{:.3e}", vb.min_lower_slack.min(vb.min_upper_slack)),
    ]);
    table.row(vec![
        "exact decomposition".into(),
        vb.draws.to_string(),
        vb.exact_mismatches.to_string(),
        format!("{:.3e}", vb.max_exact_rel_error),
    ]);
    let p = &report.projection_identity;
    table.row(vec![
        "projection identity".into(),
        p.draws.to_string(),
        (p.identity_failures + p.in_span_rho_failures).to_string(),
        format!("{:.3e}", p.max_identity_rel_error),
    ]);
    table.row(vec![
        "in-span dominance".into(),
        p.draws.to_string(),
        (p.dominance_failures + p.equality_failures).to_string(),
        "-".into(),
    ]);
    let s = &report.separation;
    table.row(vec![
        "strict separation".into(),
        s.draws.to_string(),
        (s.separation_failures + s.draws - s.applicable).to_string(),
        format!("{:.3e}", s.min_variance_gap),
    ]);
    let m = &report.mahalanobis_analogue;
    table.row(vec![
        "mahalanobis analogue".into(),
        m.draws.to_string(),
        m.failures.to_string(),
        format!("{:.3e}", m.max_rel_error),
    ]);
    print!("{table}");
    write_json(&args.output_dir.join("etf_report.json"), &report)?;
    Ok(report)
}

pub fn cmd_diagnostics(cfg: &RunConfig, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    if cfg.method.uses_logits() {
        return Err(Error::Config("diagnostics need a distance-based method".into()));
    }
    let (manifest_path, manifest) = cfg.manifest()?;
    let splits: Vec<&String> = std::iter::once(&cfg.test_id_split).chain(&cfg.test_ood_splits).collect();
    RunConfig::require_splits(&manifest, splits.iter().copied())?;
    let stats = load_statistics(cfg)?.expect("distance method");
    let dir = cfg.output_dir.join("diagnostics");
    create_dir(&dir)?;

    let mut profile_rows = Vec::new();
    let mut variances = Vec::new();
    for split in &splits {
        let dm = class_distances(&load_split(&manifest_path, split)?, &stats, cfg.metric)?;
        for (rank, (mean, std)) in rank_summary(&sorted_distance_profile(&dm)).iter().enumerate() {
            profile_rows.push(vec![split.to_string(), rank.to_string(), format!("{mean:e}"), format!("{std:e}")]);
        }
        variances.push((split.to_string(), classwise_variance(&dm, cfg.top_k)?));
    }
    write_csv(&dir.join("rank_profile.csv"), &["split", "rank", "mean", "std"], &profile_rows)?;

    let lo = variances.iter().flat_map(|(_, v)| v).copied().fold(f64::INFINITY, f64::min);
    let hi = variances.iter().flat_map(|(_, v)| v).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut hist_rows = Vec::new();
    let mut marker_rows = Vec::new();
    for (k, (split, v)) in variances.iter().enumerate() {
        let mut counts = vec![0usize; bins];
        for x in v {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, n) in counts.iter().enumerate() {
            hist_rows.push(vec![
                split.clone(),
                b.to_string(),
                format!("{:e}", lo + width * b as f64),
                format!("{:e}", lo + width * (b + 1) as f64),
                n.to_string(),
            ]);
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let role = if k == 0 { "id" } else { "ood" };
        marker_rows.push(vec![split.clone(), role.into(), format!("{mean:e}")]);
    }
    write_csv(
        &dir.join("variance_histogram.csv"),
        &["split", "bin", "lower", "upper", "count"],
        &hist_rows,
    )?;
    write_csv(&dir.join("variance_markers.csv"), &["split", "role", "mean_variance"], &marker_rows)?;
    println!("diagnostics for {} splits written to {}", splits.len(), dir.display());
    Ok(())
}

fn alternate(b: &FeatureBundle, name: &str, even: bool) -> Result<FeatureBundle> {
    let rows: Vec<usize> = (0..b.len()).filter(|i| (i % 2 == 0) == even).collect();
    b.select_rows(name, &rows)
}

/// Writes train, val_id, val_ood, test_id and test_ood plus a manifest and a
/// matching run config. Validation and test splits alternate rows of one
/// draw of twice the requested size.
pub fn cmd_gen_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let doubled = SyntheticSpec {
        test_per_class: 2 * spec.test_per_class,
        ood_count: 2 * spec.ood_count,
        ..*spec
    };
    let data = generate(&doubled)?;
    let val_id = alternate(&data.test_id, "val_id", true)?;
    let test_id = alternate(&data.test_id, "test_id", false)?;
    let val_ood = alternate(&data.test_ood, "val_ood", true)?;
    let test_ood = alternate(&data.test_ood, "test_ood", false)?;
    let manifest = save_bundles(&[&data.train, &val_id, &val_ood, &test_id, &test_ood], out)?;
    write_json(&out.join("synthetic_spec.json"), spec)?;
    let run = RunConfig {
        manifest_path: Some(PathBuf::from(MANIFEST_FILE)),
        output_dir: PathBuf::from("run"),
        seed: spec.seed,
        ..RunConfig::default()
    };
    write_json(&out.join("run_config.json"), &run)?;

    let mut table = Table::new(&["split", "rows"]);
    for name in manifest.splits.keys() {
        let rows = match name.as_str() {
            "train" => data.train.len(),
            "val_id" => val_id.len(),
            "val_ood" => val_ood.len(),
            "test_id" => test_id.len(),
            _ => test_ood.len(),
        };
        table.row(vec![name.clone(), rows.to_string()]);
    }
    print!("{table}");
    println!(
        "C = {}, d = {}, R = {}, σ_w = {}, OOD kind {}, seed {}",
        spec.num_classes,
        spec.dim,
        spec.radius,
        spec.within_class_std,
        spec.ood_kind.as_str(),
        spec.seed
    );
    println!("manifest written to {}", out.join(MANIFEST_FILE).display());
    Ok(())
}
