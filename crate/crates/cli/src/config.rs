use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use mahavar::feature_store::Manifest;
use mahavar::gaussian_stats::{NormalizationMode, DEFAULT_REGULARIZER};
use mahavar::scorers::{Method, Metric, ScoreConfig, TopK};
use mahavar::{Error, Result};

/// Everything a run needs. Loaded from JSON; any flag given on the command
/// line replaces the file value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest_path: Option<PathBuf>,
    /// Defaults to the method's customary mode when absent.
    pub normalization: Option<NormalizationMode>,
    pub regularizer: f64,
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub top_k: TopK,
    pub temperature: f64,
    pub metric: Metric,
    pub train_split: String,
    pub val_id_split: String,
    pub val_ood_splits: Vec<String>,
    pub test_id_split: String,
    pub test_ood_splits: Vec<String>,
    pub output_dir: PathBuf,
    /// Where `fit` writes and the other commands read the statistics.
    /// Defaults to `<output_dir>/statistics`.
    pub statistics_dir: Option<PathBuf>,
    pub seed: u64,
    pub alpha_grid: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest_path: None,
            normalization: None,
            regularizer: DEFAULT_REGULARIZER,
            method: Method::Mahavar,
            alpha: 0.0,
            beta: 0.0,
            top_k: TopK::All,
            temperature: 1.0,
            metric: Metric::Mahalanobis,
            train_split: "train".into(),
            val_id_split: "val_id".into(),
            val_ood_splits: vec!["val_ood".into()],
            test_id_split: "test_id".into(),
            test_ood_splits: vec!["test_ood".into()],
            output_dir: PathBuf::from("out"),
            statistics_dir: None,
            seed: 0,
            alpha_grid: None,
        }
    }
}

/// Flags shared by the data-driven subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// none | l2 | centered_l2
    #[arg(long)]
    pub normalization: Option<NormalizationMode>,
    #[arg(long)]
    pub regularizer: Option<f64>,
    /// mahalanobis | mahalanobis_pp | mahavar | mahavar_skew | msp | maxlogit | energy
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// Integer or "all".
    #[arg(long)]
    pub top_k: Option<TopK>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// mahalanobis | l2 | l1
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub train_split: Option<String>,
    #[arg(long)]
    pub val_id_split: Option<String>,
    /// Comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub val_ood_splits: Option<Vec<String>>,
    #[arg(long)]
    pub test_id_split: Option<String>,
    /// Comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub test_ood_splits: Option<Vec<String>>,
    #[arg(long = "out")]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub statistics_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl RunConfig {
    /// Relative paths inside the file are taken relative to the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.manifest_path.as_mut() {
            anchor(p);
        }
        if let Some(p) = cfg.statistics_dir.as_mut() {
            anchor(p);
        }
        anchor(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// File values (if any) with flag overrides applied.
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => Self::read(path)?,
            None => RunConfig::default(),
        };
        let a = args.clone();
        if a.manifest.is_some() {
            cfg.manifest_path = a.manifest;
        }
        if a.normalization.is_some() {
            cfg.normalization = a.normalization;
        }
        if a.statistics_dir.is_some() {
            cfg.statistics_dir = a.statistics_dir;
        }
        set(&mut cfg.regularizer, a.regularizer);
        set(&mut cfg.method, a.method);
        set(&mut cfg.alpha, a.alpha);
        set(&mut cfg.beta, a.beta);
        set(&mut cfg.top_k, a.top_k);
        set(&mut cfg.temperature, a.temperature);
        set(&mut cfg.metric, a.metric);
        set(&mut cfg.train_split, a.train_split);
        set(&mut cfg.val_id_split, a.val_id_split);
        set(&mut cfg.val_ood_splits, a.val_ood_splits);
        set(&mut cfg.test_id_split, a.test_id_split);
        set(&mut cfg.test_ood_splits, a.test_ood_splits);
        set(&mut cfg.output_dir, a.output_dir);
        set(&mut cfg.seed, a.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.regularizer > 0.0 && self.regularizer.is_finite()) {
            return Err(Error::Config(format!("regularizer must be > 0, got {}", self.regularizer)));
        }
        self.score_config().validate()?;
        if let Some(grid) = &self.alpha_grid {
            if grid.is_empty() || grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                return Err(Error::Config("alpha_grid must be non-empty with values ≥ 0".into()));
            }
        }
        Ok(())
    }

    pub fn normalization_mode(&self) -> NormalizationMode {
        self.normalization.unwrap_or_else(|| self.method.default_normalization())
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            method: self.method,
            alpha: self.alpha,
            beta: self.beta,
            top_k: self.top_k,
            metric: self.metric,
            normalization: self.normalization_mode(),
            temperature: self.temperature,
        }
    }

    pub fn statistics_path(&self) -> PathBuf {
        self.statistics_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("statistics"))
    }

    pub fn manifest(&self) -> Result<(PathBuf, Manifest)> {
        let path = self
            .manifest_path
            .clone()
            .ok_or_else(|| Error::Config("no manifest given (use --manifest or manifest_path)".into()))?;
        let manifest = Manifest::read(&path)?;
        Ok((path, manifest))
    }

    /// Fails with the first split name the manifest does not list.
    pub fn require_splits<'a>(manifest: &Manifest, names: impl IntoIterator<Item = &'a String>) -> Result<()> {
        for name in names {
            manifest.split(name)?;
        }
        Ok(())
    }
}
