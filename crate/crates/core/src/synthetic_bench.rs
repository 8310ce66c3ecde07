//! Gaussian class-conditional ID data on simplex-ETF means with controlled
//! OOD distributions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf_lab::{build_etf_rotated, EtfGeometry};
use crate::feature_store::FeatureBundle;
use crate::random::{gaussian_vector, stream_rng, unit_vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// Radius-R directions in the orthogonal complement of the class-mean span,
    /// plus σ_w noise projected onto the same complement.
    OrthogonalSubspace,
    /// N(R·u, σ_w²I) around one random direction u.
    ShiftedGaussian,
    /// Uniform on the sphere of radius R.
    UniformShell,
    /// Midpoints of random pairs of class means plus σ_w noise.
    NearOodInterpolated,
}

impl OodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OodKind::OrthogonalSubspace => "orthogonal_subspace",
            OodKind::ShiftedGaussian => "shifted_gaussian",
            OodKind::UniformShell => "uniform_shell",
            OodKind::NearOodInterpolated => "near_ood_interpolated",
        }
    }
}

impl std::str::FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "orthogonal_subspace" | "orthogonal" => Ok(OodKind::OrthogonalSubspace),
            "shifted_gaussian" | "shifted" => Ok(OodKind::ShiftedGaussian),
            "uniform_shell" | "shell" => Ok(OodKind::UniformShell),
            "near_ood_interpolated" | "near_ood" | "interpolated" => Ok(OodKind::NearOodInterpolated),
            _ => Err(Error::Config(format!("unknown OOD kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub radius: f64,
    pub within_class_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_kind: OodKind,
    pub ood_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            dim: 32,
            radius: 1.0,
            within_class_std: 0.1,
            train_per_class: 100,
            test_per_class: 50,
            ood_kind: OodKind::OrthogonalSubspace,
            ood_count: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {c}")));
        }
        if self.dim + 1 < c {
            return Err(Error::Config(format!("dim {} is below C−1 = {}", self.dim, c - 1)));
        }
        if self.ood_kind == OodKind::OrthogonalSubspace && self.dim < c {
            return Err(Error::Config(format!(
                "orthogonal-subspace OOD needs dim > C−1 (dim = {}, C = {c})",
                self.dim
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.within_class_std > 0.0 && self.within_class_std.is_finite()) {
            return Err(Error::Config(format!(
                "within-class std must be positive, got {}",
                self.within_class_std
            )));
        }
        if self.train_per_class < 2 || self.test_per_class == 0 || self.ood_count == 0 {
            return Err(Error::Config(
                "need ≥ 2 train samples per class and ≥ 1 test and OOD sample".into(),
            ));
        }
        Ok(())
    }
}

/// Generated splits plus the geometry they were drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: FeatureBundle,
    pub test_id: FeatureBundle,
    pub test_ood: FeatureBundle,
    pub geometry: EtfGeometry,
}

// Stream layout under one seed: 0 → rotation, 1..=C → train class c,
// C+1..=2C → test class c, 2C+1 → OOD.
fn class_block(geom: &EtfGeometry, sigma: f64, n: usize, seed: u64, stream: u64, class: usize) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, stream);
    let mean = geom.mean(class);
    let mut out = DMatrix::zeros(n, geom.dim);
    for i in 0..n {
        let x = &mean + gaussian_vector(geom.dim, &mut rng) * sigma;
        out.set_row(i, &x.transpose());
    }
    out
}

fn id_split(
    spec: &SyntheticSpec,
    geom: &EtfGeometry,
    name: &str,
    per_class: usize,
    stream_offset: u64,
) -> Result<FeatureBundle> {
    let c = spec.num_classes;
    let blocks: Vec<DMatrix<f64>> = (0..c)
        .into_par_iter()
        .map(|k| class_block(geom, spec.within_class_std, per_class, spec.seed, stream_offset + k as u64, k))
        .collect();
    let mut features = DMatrix::zeros(c * per_class, spec.dim);
    let mut labels = Vec::with_capacity(c * per_class);
    for (k, block) in blocks.iter().enumerate() {
        features.view_mut((k * per_class, 0), (per_class, spec.dim)).copy_from(block);
        labels.extend(std::iter::repeat_n(k, per_class));
    }
    let logits = classifier_logits(geom, &features);
    FeatureBundle::new(name, features, Some(labels), Some(logits), c)
}

/// Logits of the NC-aligned linear classifier w_c = μ_c/R.
pub fn classifier_logits(geom: &EtfGeometry, features: &DMatrix<f64>) -> DMatrix<f64> {
    features * geom.means.transpose() / geom.radius
}

fn ood_split(spec: &SyntheticSpec, geom: &EtfGeometry) -> Result<FeatureBundle> {
    let mut rng = stream_rng(spec.seed, 2 * spec.num_classes as u64 + 1);
    let (d, r, sigma) = (spec.dim, spec.radius, spec.within_class_std);
    let shift = unit_vector(d, &mut rng) * r;
    let mut features = DMatrix::zeros(spec.ood_count, d);
    for i in 0..spec.ood_count {
        let x: DVector<f64> = match spec.ood_kind {
            OodKind::OrthogonalSubspace => {
                let dir = loop {
                    let g = gaussian_vector(d, &mut rng);
                    let v = &g - geom.project(&g);
                    if v.norm() > 1e-9 {
                        break v.normalize();
                    }
                };
                let noise = gaussian_vector(d, &mut rng) * sigma;
                dir * r + &noise - geom.project(&noise)
            }
            OodKind::ShiftedGaussian => &shift + gaussian_vector(d, &mut rng) * sigma,
            OodKind::UniformShell => unit_vector(d, &mut rng) * r,
            OodKind::NearOodInterpolated => {
                let a = rng.random_range(0..spec.num_classes);
                let mut b = rng.random_range(0..spec.num_classes - 1);
                if b >= a {
                    b += 1;
                }
                (geom.mean(a) + geom.mean(b)) * 0.5 + gaussian_vector(d, &mut rng) * sigma
            }
        };
        features.set_row(i, &x.transpose());
    }
    let logits = classifier_logits(geom, &features);
    FeatureBundle::new("test_ood", features, None, Some(logits), spec.num_classes)
}

/// Draws train, test-ID and test-OOD bundles. Deterministic in `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rot_rng = stream_rng(spec.seed, 0);
    let geom = build_etf_rotated(spec.num_classes, spec.dim, spec.radius, rot_rng.random())?;
    let c = spec.num_classes as u64;
    let train = id_split(spec, &geom, "train", spec.train_per_class, 1)?.with_train_split(true)?;
    let test_id = id_split(spec, &geom, "test_id", spec.test_per_class, 1 + c)?;
    let test_ood = ood_split(spec, &geom)?;
    Ok(SyntheticData {
        train,
        test_id,
        test_ood,
        geometry: geom,
    })
}

/// Per-class distance of the empirical train mean from the true mean, in
/// units of the standard error σ_w/√N_c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanConvergence {
    pub standard_errors: Vec<f64>,
    /// Classes at or above the flag level.
    pub flagged: Vec<usize>,
    pub flag_level: f64,
}

pub fn mean_convergence(data: &SyntheticData, sigma: f64, flag_level: f64) -> Result<MeanConvergence> {
    let labels = data.train.labels.as_ref().ok_or_else(|| Error::MissingLabels {
        split: data.train.name.clone(),
    })?;
    let c = data.geometry.num_classes;
    let mut sums = DMatrix::zeros(c, data.train.dim());
    let mut counts = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        let mut row = sums.row_mut(y);
        row += data.train.features.row(i);
        counts[y] += 1;
    }
    let standard_errors: Vec<f64> = (0..c)
        .map(|k| {
            let n = counts[k] as f64;
            let emp = sums.row(k) / n;
            (emp - data.geometry.means.row(k)).norm() * n.sqrt() / sigma
        })
        .collect();
    let flagged = standard_errors
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= flag_level)
        .map(|(k, _)| k)
        .collect();
    Ok(MeanConvergence {
        standard_errors,
        flagged,
        flag_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: OodKind) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            dim: 8,
            train_per_class: 20,
            test_per_class: 5,
            ood_count: 30,
            ood_kind: kind,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn shapes_and_labels() {
        let data = generate(&small(OodKind::UniformShell)).unwrap();
        assert_eq!(data.train.features.shape(), (80, 8));
        assert_eq!(data.test_id.features.shape(), (20, 8));
        assert_eq!(data.test_ood.features.shape(), (30, 8));
        assert!(data.train.train_split);
        assert!(data.test_ood.labels.is_none());
        let labels = data.train.labels.as_ref().unwrap();
        for k in 0..4 {
            assert_eq!(labels.iter().filter(|&&y| y == k).count(), 20);
        }
        assert_eq!(data.train.logits.as_ref().unwrap().shape(), (80, 4));
        data.geometry.check_invariants().unwrap();
    }

    #[test]
    fn same_seed_same_bundles() {
        for kind in [
            OodKind::OrthogonalSubspace,
            OodKind::ShiftedGaussian,
            OodKind::UniformShell,
            OodKind::NearOodInterpolated,
        ] {
            let a = generate(&small(kind)).unwrap();
            let b = generate(&small(kind)).unwrap();
            assert_eq!(a.train, b.train);
            assert_eq!(a.test_id, b.test_id);
            assert_eq!(a.test_ood, b.test_ood);
        }
        let mut other = small(OodKind::UniformShell);
        other.seed = 4;
        assert_ne!(generate(&other).unwrap().train, generate(&small(OodKind::UniformShell)).unwrap().train);
    }

    #[test]
    fn orthogonal_ood_leaves_the_span() {
        let data = generate(&small(OodKind::OrthogonalSubspace)).unwrap();
        for i in 0..data.test_ood.len() {
            let x = data.test_ood.features.row(i).transpose();
            assert!(data.geometry.project(&x).norm() < 1e-10 * x.norm());
            for c in 0..4 {
                assert!(x.dot(&data.geometry.mean(c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn uniform_shell_has_radius_r() {
        let mut spec = small(OodKind::UniformShell);
        spec.radius = 2.5;
        let data = generate(&spec).unwrap();
        for i in 0..data.test_ood.len() {
            assert!((data.test_ood.features.row(i).norm() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolated_points_sit_between_means() {
        let mut spec = small(OodKind::NearOodInterpolated);
        spec.within_class_std = 1e-9;
        let data = generate(&spec).unwrap();
        let r = spec.radius;
        // ‖(μ_a + μ_b)/2‖² = R²/2 · (1 − 1/(C−1)).
        let expected = (r * r / 2.0 * (1.0 - 1.0 / 3.0)).sqrt();
        for i in 0..data.test_ood.len() {
            assert!((data.test_ood.features.row(i).norm() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = small(OodKind::OrthogonalSubspace);
        spec.dim = 3;
        assert!(generate(&spec).is_err());
        spec.ood_kind = OodKind::UniformShell;
        assert!(generate(&spec).is_ok());
        spec.dim = 2;
        assert!(generate(&spec).is_err());
        let mut spec = small(OodKind::UniformShell);
        spec.within_class_std = 0.0;
        assert!(generate(&spec).is_err());
        spec.within_class_std = 0.1;
        spec.ood_count = 0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in [
            OodKind::OrthogonalSubspace,
            OodKind::ShiftedGaussian,
            OodKind::UniformShell,
            OodKind::NearOodInterpolated,
        ] {
            assert_eq!(kind.as_str().parse::<OodKind>().unwrap(), kind);
            assert_eq!(kind.as_str().replace('_', "-").parse::<OodKind>().unwrap(), kind);
        }
        assert!("bogus".parse::<OodKind>().is_err());
    }

    #[test]
    fn empirical_means_converge() {
        let spec = SyntheticSpec {
            num_classes: 3,
            dim: 4,
            train_per_class: 400,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap();
        let conv = mean_convergence(&data, spec.within_class_std, 5.0).unwrap();
        // ‖mean noise‖·√N/σ is χ-distributed with d degrees of freedom.
        for s in &conv.standard_errors {
            assert!(*s < 5.0, "{conv:?}");
        }
    }
}
