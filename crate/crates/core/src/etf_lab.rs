//! Exact simplex-ETF geometries and numerical checks of the class-wise
//! distance-variance results under Neural Collapse.
//!
//! Notation used below: C classes with means μ_c in ℝ^d, ‖μ_c‖ = R,
//! ‖μ_c − μ_c'‖ = K with K² = 2R²C/(C−1), and μ_cᵀμ_c' = −R²/(C−1).
//!
//! * ID variance bounds: for x = μ_c* + Δ with ‖Δ‖ ≤ ε < K/2,
//!   `s(1−γ)² ≤ Var_c‖x−μ_c‖² ≤ s(1+γ)² + 2ε²K²(C−2)/C` where
//!   `s = (C−1)K⁴/C²` and `γ = ε·√(2C/(K²(C−1)))`. The variance also has the
//!   exact form `(C−1)(K²+ξ̄)²/C² + (C−1)S²_ξ/C` with `ξ_c = 2Δᵀ(μ_c*−μ_c)`.
//! * Projection identity: for any unit x and centered means,
//!   `Var_c‖x−μ_c‖² = 4R²ρ/(C−1)` with ρ the squared norm of the projection of
//!   x onto span(μ_1..μ_C).
//! * Separation: unit ID points within ε of a mean have strictly larger variance
//!   than any unit OOD point with `max_c |xᵀμ_c| < R(R−ε)/√(C−1)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_stats::{ClassStatistics, Normalization};
use crate::random::{gaussian_vector, random_orthogonal, stream_rng, unit_vector};
use crate::scorers::mahalanobis_row;

/// Tolerance on bound checks, on the scale `(C−1)K⁴/C²`.
pub const BOUND_TOLERANCE: f64 = 1e-9;
/// Relative tolerance for exact identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

/// Population variance (divisor = count).
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Squared ℓ2 distances from `x` to every mean row.
pub fn squared_distances(means: &DMatrix<f64>, x: &DVector<f64>) -> Vec<f64> {
    (0..means.nrows())
        .map(|c| {
            means
                .row(c)
                .iter()
                .zip(x.iter())
                .map(|(m, v)| (v - m) * (v - m))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtfGeometry {
    /// C×d, one class mean per row.
    pub means: DMatrix<f64>,
    pub radius: f64,
    pub inter_class_distance: f64,
    pub num_classes: usize,
    pub dim: usize,
    pub centered: bool,
    /// d×(C−1) orthonormal basis of span(μ_1..μ_C), from a QR of the means.
    span_basis: DMatrix<f64>,
}

/// Builds an axis-aligned simplex ETF: the first C−1 coordinates carry the
/// frame, the rest are zero.
pub fn build_etf(num_classes: usize, dim: usize, radius: f64) -> Result<EtfGeometry> {
    let c = num_classes;
    if c < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {c}")));
    }
    if dim + 1 < c {
        return Err(Error::Invalid(format!(
            "dimension {dim} is below C−1 = {} required for a {c}-class simplex ETF",
            c - 1
        )));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Invalid(format!("radius must be positive, got {radius}")));
    }
    let cf = c as f64;
    let centering = DMatrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / cf);
    // Any C−1 columns of the centering matrix are independent, so the first
    // C−1 columns of its Q span the sum-zero subspace.
    let q = centering.clone().qr().q();
    let basis = q.columns(0, c - 1).into_owned();
    let frame = centering * ((cf / (cf - 1.0)).sqrt() * radius);
    let coords = frame * basis;
    let mut means = DMatrix::zeros(c, dim);
    means.view_mut((0, 0), (c, c - 1)).copy_from(&coords);
    Ok(EtfGeometry::from_means(means, radius))
}

/// As [`build_etf`], followed by a seeded random rotation of ℝ^d.
pub fn build_etf_rotated(num_classes: usize, dim: usize, radius: f64, seed: u64) -> Result<EtfGeometry> {
    let base = build_etf(num_classes, dim, radius)?;
    let mut rng = stream_rng(seed, u64::MAX);
    let rotation = random_orthogonal(dim, &mut rng);
    Ok(EtfGeometry::from_means(base.means * rotation.transpose(), radius))
}

impl EtfGeometry {
    fn from_means(means: DMatrix<f64>, radius: f64) -> Self {
        let (c, d) = means.shape();
        let cf = c as f64;
        let span_basis = means.transpose().qr().q().columns(0, c - 1).into_owned();
        let total = means.row_sum().norm();
        EtfGeometry {
            span_basis,
            radius,
            inter_class_distance: (2.0 * radius * radius * cf / (cf - 1.0)).sqrt(),
            num_classes: c,
            dim: d,
            centered: total <= 1e-10 * radius.max(1.0),
            means,
        }
    }

    pub fn k_squared(&self) -> f64 {
        let c = self.num_classes as f64;
        2.0 * self.radius * self.radius * c / (c - 1.0)
    }

    /// d×(C−1) orthonormal basis of the span of the means.
    pub fn span_basis(&self) -> &DMatrix<f64> {
        &self.span_basis
    }

    pub fn mean(&self, c: usize) -> DVector<f64> {
        self.means.row(c).transpose()
    }

    /// Verifies equinorm, equidistance, inner products and centering within
    /// 1e-10 (scaled by R² where the quantity is quadratic).
    pub fn check_invariants(&self) -> Result<()> {
        let r = self.radius;
        let c = self.num_classes;
        let k = self.inter_class_distance;
        let tol = 1e-10;
        let fail = |what: String| Err(Error::Invalid(format!("ETF invariant violated: {what}")));
        for a in 0..c {
            let ma = self.means.row(a);
            if (ma.norm() - r).abs() > tol * r.max(1.0) {
                return fail(format!("‖μ_{a}‖ = {} ≠ R = {r}", ma.norm()));
            }
            for b in (a + 1)..c {
                let mb = self.means.row(b);
                let dist = (ma - mb).norm();
                if (dist - k).abs() > tol * k.max(1.0) {
                    return fail(format!("‖μ_{a} − μ_{b}‖ = {dist} ≠ K = {k}"));
                }
                let ip = ma.dot(&mb);
                let expected = -r * r / (c as f64 - 1.0);
                if (ip - expected).abs() > tol * (r * r).max(1.0) {
                    return fail(format!("μ_{a}ᵀμ_{b} = {ip} ≠ {expected}"));
                }
            }
        }
        if self.centered && self.means.row_sum().norm() > tol * r.max(1.0) {
            return fail("means do not sum to zero".into());
        }
        Ok(())
    }

    /// Orthogonal projection of `point` onto span(μ_1..μ_C).
    pub fn project(&self, point: &DVector<f64>) -> DVector<f64> {
        &self.span_basis * (self.span_basis.transpose() * point)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Uniform in the ε-ball of ℝ^d.
    UniformInBall,
    /// Uniform direction, ‖Δ‖ = ε.
    Boundary,
    /// Uniform in the ε-ball of span(μ_1..μ_C).
    InSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub epsilon: f64,
    pub delta_mode: DeltaMode,
}

impl PerturbationSpec {
    /// Checks ε ≥ 0 and ε < K/2 for `geom`.
    pub fn validate(&self, geom: &EtfGeometry) -> Result<()> {
        let half_k = geom.inter_class_distance / 2.0;
        if !(self.epsilon >= 0.0 && self.epsilon < half_k) {
            return Err(Error::Invalid(format!(
                "ε = {} must lie in [0, K/2 = {half_k})",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Draws one deviation Δ according to `spec`.
pub fn sample_delta<R: Rng + ?Sized>(geom: &EtfGeometry, spec: &PerturbationSpec, rng: &mut R) -> DVector<f64> {
    let eps = spec.epsilon;
    match spec.delta_mode {
        DeltaMode::UniformInBall => {
            let u: f64 = rng.random();
            unit_vector(geom.dim, rng) * (eps * u.powf(1.0 / geom.dim as f64))
        }
        DeltaMode::Boundary => unit_vector(geom.dim, rng) * eps,
        DeltaMode::InSpan => {
            let k = geom.num_classes - 1;
            let u: f64 = rng.random();
            let dir = geom.span_basis() * unit_vector(k, rng);
            dir * (eps * u.powf(1.0 / k as f64))
        }
    }
}

/// Bound check of one ID point `μ_c* + Δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub observed_variance: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub gamma: f64,
    pub exact_variance: f64,
    /// `(observed − lower)/scale`, negative on violation.
    pub lower_slack: f64,
    /// `(upper − observed)/scale`, negative on violation.
    pub upper_slack: f64,
    /// `|observed − exact| / |exact|`.
    pub exact_rel_error: f64,
    pub passed: bool,
}

/// Checks the ID variance bounds and the exact ξ-decomposition for x = μ_c* + Δ.
pub fn verify_variance_bounds(
    geom: &EtfGeometry,
    spec: &PerturbationSpec,
    class_index: usize,
    delta: &DVector<f64>,
) -> Result<BoundCheck> {
    spec.validate(geom)?;
    if class_index >= geom.num_classes {
        return Err(Error::Invalid(format!("class index {class_index} ≥ C = {}", geom.num_classes)));
    }
    if delta.len() != geom.dim {
        return Err(Error::Dimension {
            expected: geom.dim,
            actual: delta.len(),
        });
    }
    let eps = spec.epsilon;
    let delta_norm = delta.norm();
    if delta_norm > eps * (1.0 + 1e-12) {
        return Err(Error::Invalid(format!("‖Δ‖ = {delta_norm} exceeds ε = {eps}")));
    }

    let c = geom.num_classes;
    let cf = c as f64;
    let k2 = geom.k_squared();
    let anchor = geom.mean(class_index);
    let x = &anchor + delta;
    let observed = population_variance(&squared_distances(&geom.means, &x));

    let xi: Vec<f64> = (0..c)
        .filter(|&j| j != class_index)
        .map(|j| 2.0 * delta.dot(&(&anchor - geom.mean(j))))
        .collect();
    let xi_bar = xi.iter().sum::<f64>() / (cf - 1.0);
    let s2 = xi.iter().map(|v| (v - xi_bar) * (v - xi_bar)).sum::<f64>() / (cf - 1.0);
    let exact = (cf - 1.0) * (k2 + xi_bar).powi(2) / (cf * cf) + (cf - 1.0) * s2 / cf;

    let scale = (cf - 1.0) * k2 * k2 / (cf * cf);
    let gamma = eps * (2.0 * cf / (k2 * (cf - 1.0))).sqrt();
    let lower = scale * (1.0 - gamma).powi(2);
    let upper = scale * (1.0 + gamma).powi(2) + 2.0 * eps * eps * k2 * (cf - 2.0) / cf;

    let lower_slack = (observed - lower) / scale;
    let upper_slack = (upper - observed) / scale;
    let exact_rel_error = (observed - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
    let passed = lower_slack >= -BOUND_TOLERANCE && upper_slack >= -BOUND_TOLERANCE && exact_rel_error <= IDENTITY_TOLERANCE;
    Ok(BoundCheck {
        observed_variance: observed,
        lower_bound: lower,
        upper_bound: upper,
        gamma,
        exact_variance: exact,
        lower_slack,
        upper_slack,
        exact_rel_error,
        passed,
    })
}

/// Projection-identity check for one unit point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCheck {
    pub rho: f64,
    pub observed_variance: f64,
    /// 4R²ρ/(C−1).
    pub predicted_variance: f64,
    pub rel_error: f64,
    pub passed: bool,
}

fn require_centered_unit(geom: &EtfGeometry, point: &DVector<f64>) -> Result<()> {
    if !geom.centered {
        return Err(Error::Invalid("geometry must be centered (Σ_c μ_c = 0)".into()));
    }
    if point.len() != geom.dim {
        return Err(Error::Dimension {
            expected: geom.dim,
            actual: point.len(),
        });
    }
    if (point.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("point must be a unit vector, ‖x‖ = {}", point.norm())));
    }
    Ok(())
}

/// ρ = ‖P x‖² for the orthogonal projection P onto span(μ_1..μ_C).
pub fn projection_rho(geom: &EtfGeometry, point: &DVector<f64>) -> Result<f64> {
    require_centered_unit(geom, point)?;
    Ok((geom.span_basis().transpose() * point).norm_squared())
}

/// Compares the directly computed variance with 4R²ρ/(C−1).
pub fn check_projection_identity(geom: &EtfGeometry, point: &DVector<f64>) -> Result<ProjectionCheck> {
    let rho = projection_rho(geom, point)?;
    let r2 = geom.radius * geom.radius;
    let cm1 = geom.num_classes as f64 - 1.0;
    let predicted = 4.0 * r2 * rho / cm1;
    let observed = population_variance(&squared_distances(&geom.means, point));
    // Floor keeps ρ ≈ 0 points meaningful: errors are measured against 1e-6 of
    // the in-span value 4R²/(C−1) at minimum.
    let denom = predicted.abs().max(1e-6 * 4.0 * r2 / cm1);
    let rel_error = (observed - predicted).abs() / denom;
    Ok(ProjectionCheck {
        rho,
        observed_variance: observed,
        predicted_variance: predicted,
        rel_error,
        passed: rel_error <= IDENTITY_TOLERANCE,
    })
}

/// Outcome of the strict-separation check for one OOD point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationVerdict {
    /// Whether `max_c |xᵀμ_c| < R(R−ε)/√(C−1)` holds.
    pub applicable: bool,
    /// `R(R−ε)/√(C−1) − max_c |xᵀμ_c|`.
    pub condition_margin: f64,
    pub ood_variance: f64,
    pub id_variances: Vec<f64>,
    /// 4R²(R−ε)²/(C−1).
    pub id_lower_bound: f64,
    /// Every ID variance strictly exceeds the OOD variance.
    pub separated: bool,
}

/// Checks strict ID > OOD variance separation for unit ID points `id_points`
/// (rows) and a unit OOD point under centered, unit-ball ETF means.
pub fn verify_separation(
    geom: &EtfGeometry,
    epsilon: f64,
    ood_point: &DVector<f64>,
    id_points: &DMatrix<f64>,
) -> Result<SeparationVerdict> {
    require_centered_unit(geom, ood_point)?;
    let r = geom.radius;
    if r > 1.0 + 1e-12 {
        return Err(Error::Invalid(format!("radius {r} exceeds 1")));
    }
    PerturbationSpec {
        epsilon,
        delta_mode: DeltaMode::UniformInBall,
    }
    .validate(geom)?;
    let cm1 = geom.num_classes as f64 - 1.0;

    let mut id_variances = Vec::with_capacity(id_points.nrows());
    for i in 0..id_points.nrows() {
        let x = id_points.row(i).transpose();
        require_centered_unit(geom, &x)?;
        let d = squared_distances(&geom.means, &x);
        let nearest = d.iter().copied().fold(f64::INFINITY, f64::min).sqrt();
        if nearest > epsilon * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Invalid(format!(
                "ID point {i} is {nearest} from its nearest mean, beyond ε = {epsilon}"
            )));
        }
        id_variances.push(population_variance(&d));
    }

    let max_abs_s = (0..geom.num_classes)
        .map(|c| ood_point.dot(&geom.mean(c)).abs())
        .fold(0.0, f64::max);
    let bound = r * (r - epsilon) / cm1.sqrt();
    let condition_margin = bound - max_abs_s;
    let ood_variance = population_variance(&squared_distances(&geom.means, ood_point));
    let applicable = condition_margin > 0.0;
    let separated = id_variances.iter().all(|&v| v > ood_variance);
    Ok(SeparationVerdict {
        applicable,
        condition_margin,
        ood_variance,
        id_variances,
        id_lower_bound: 4.0 * r * r * (r - epsilon).powi(2) / cm1,
        separated,
    })
}

/// Points `μ_c + Δ` with ‖Δ‖ ≤ ε, classes drawn uniformly. Returns (points, classes).
pub fn sample_id_points(
    geom: &EtfGeometry,
    spec: &PerturbationSpec,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    spec.validate(geom)?;
    let mut rng = stream_rng(seed, 0);
    let mut points = DMatrix::zeros(n, geom.dim);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..geom.num_classes);
        let x = geom.mean(c) + sample_delta(geom, spec, &mut rng);
        points.set_row(i, &x.transpose());
        classes.push(c);
    }
    Ok((points, classes))
}

const UNIT_RETRY_CAP: usize = 100;

/// Unit vector within ε of `μ_c`: a tangent perturbation of μ_c/R followed by
/// renormalization, with the post-normalization distance re-checked.
/// `InSpan` keeps the deviation inside span(μ_1..μ_C); `Boundary` puts the
/// point at distance exactly ε.
pub fn sample_unit_id_point<R: Rng + ?Sized>(
    geom: &EtfGeometry,
    class_index: usize,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let r = geom.radius;
    let eps = spec.epsilon;
    if r > 1.0 + 1e-12 {
        return Err(Error::Invalid(format!("unit-sphere sampling needs R ≤ 1, got {r}")));
    }
    // ‖x − μ_c‖² = 1 + R² − 2R·cos θ for unit x at angle θ from μ_c.
    let cos_min = (1.0 + r * r - eps * eps) / (2.0 * r);
    if cos_min > 1.0 + 1e-12 {
        return Err(Error::Invalid(format!(
            "no unit vector lies within ε = {eps} of a mean with norm {r} (need ε ≥ 1 − R)"
        )));
    }
    let theta_max = cos_min.clamp(-1.0, 1.0).acos();
    let axis = geom.mean(class_index) / r;

    for _ in 0..UNIT_RETRY_CAP {
        let raw = match spec.delta_mode {
            DeltaMode::InSpan => geom.span_basis() * gaussian_vector(geom.num_classes - 1, rng),
            DeltaMode::UniformInBall | DeltaMode::Boundary => gaussian_vector(geom.dim, rng),
        };
        let tangent = &raw - &axis * axis.dot(&raw);
        let norm = tangent.norm();
        if norm < 1e-12 {
            if theta_max == 0.0 || geom.dim == 1 {
                return Ok(axis);
            }
            continue;
        }
        let tangent = tangent / norm;
        let theta = match spec.delta_mode {
            DeltaMode::Boundary => theta_max,
            _ => theta_max * rng.random::<f64>(),
        };
        let x = (&axis + &tangent * theta.tan()).normalize();
        let x = if theta >= std::f64::consts::FRAC_PI_2 {
            &axis * theta.cos() + &tangent * theta.sin()
        } else {
            x
        };
        let dist = (&x - geom.mean(class_index)).norm();
        if dist <= eps * (1.0 + 1e-12) + 1e-15 {
            return Ok(x);
        }
    }
    Err(Error::Invalid(format!(
        "unit-sphere sample stayed farther than ε = {eps} after {UNIT_RETRY_CAP} draws"
    )))
}

/// Batch version of [`sample_unit_id_point`] with uniformly drawn classes.
pub fn sample_unit_id_points(
    geom: &EtfGeometry,
    spec: &PerturbationSpec,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    spec.validate(geom)?;
    let mut rng = stream_rng(seed, 0);
    let mut points = DMatrix::zeros(n, geom.dim);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..geom.num_classes);
        let x = sample_unit_id_point(geom, c, spec, &mut rng)?;
        points.set_row(i, &x.transpose());
        classes.push(c);
    }
    Ok((points, classes))
}

/// Unit OOD point whose largest |xᵀμ_c| equals `fraction` of the separation
/// threshold R(R−ε)/√(C−1). Needs d > C−1 for the off-span component.
pub fn sample_separated_ood_point<R: Rng + ?Sized>(
    geom: &EtfGeometry,
    epsilon: f64,
    fraction: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let c = geom.num_classes;
    if geom.dim < c {
        return Err(Error::Invalid(format!(
            "need d > C−1 to leave the span of the means (d = {}, C = {c})",
            geom.dim
        )));
    }
    let r = geom.radius;
    let threshold = r * (r - epsilon) / (c as f64 - 1.0).sqrt();
    let in_span = geom.span_basis() * unit_vector(c - 1, rng);
    let peak = (0..c).map(|k| in_span.dot(&geom.mean(k)).abs()).fold(0.0, f64::max);
    let a = (fraction * threshold / peak).min(1.0);
    let off = loop {
        let g = gaussian_vector(geom.dim, rng);
        let v = &g - geom.project(&g);
        if v.norm() > 1e-9 {
            break v.normalize();
        }
    };
    Ok((in_span * a + off * (1.0 - a * a).sqrt()).normalize())
}

/// Result of the Mahalanobis analogue: distances through the Cholesky kernel
/// against distances computed directly in whitened coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisCheck {
    pub kernel_variance: f64,
    pub oracle_variance: f64,
    pub rel_error: f64,
    pub passed: bool,
}

/// Places the ETF in whitened coordinates, maps it through a seeded random
/// covariance square root A (singular values in [0.5, 2]), and compares the
/// class-wise Mahalanobis variance of `A(μ_c* + Δ)` with the ℓ2 variance in the
/// whitened frame.
pub fn verify_mahalanobis_analogue(
    geom: &EtfGeometry,
    spec: &PerturbationSpec,
    class_index: usize,
    delta: &DVector<f64>,
    seed: u64,
) -> Result<MahalanobisCheck> {
    spec.validate(geom)?;
    if delta.norm() > spec.epsilon * (1.0 + 1e-12) {
        return Err(Error::Invalid("‖Δ‖ exceeds ε_M".into()));
    }
    let d = geom.dim;
    let mut rng = stream_rng(seed, 1);
    let q = random_orthogonal(d, &mut rng);
    let s = DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0));
    let a = &q * DMatrix::from_diagonal(&s);
    let sigma = &q * DMatrix::from_diagonal(&s.map(|v| v * v)) * q.transpose();

    let lambda = 1e-3;
    let mut covariance = sigma - DMatrix::identity(d, d) * lambda;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let means = &geom.means * a.transpose();
    let stats = ClassStatistics::from_parts(
        means,
        covariance,
        lambda,
        Normalization::none(),
        vec![2; geom.num_classes],
    )?;
    let whitened_x = geom.mean(class_index) + delta;
    let x = &a * &whitened_x;
    let kernel_variance = population_variance(&mahalanobis_row(&x, &stats));
    let oracle_variance = population_variance(&squared_distances(&geom.means, &whitened_x));
    let rel_error = (kernel_variance - oracle_variance).abs() / oracle_variance.abs().max(f64::MIN_POSITIVE);
    Ok(MahalanobisCheck {
        kernel_variance,
        oracle_variance,
        rel_error,
        passed: rel_error <= 1e-8,
    })
}

// ---------------------------------------------------------------------------
// Batch suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBoundReport {
    pub draws: usize,
    pub bound_violations: usize,
    pub exact_mismatches: usize,
    /// Smallest `(observed − lower)/scale` seen.
    pub min_lower_slack: f64,
    /// Smallest `(upper − observed)/scale` seen.
    pub min_upper_slack: f64,
    pub max_exact_rel_error: f64,
}

/// Random admissible draws: C ∈ [3, 50], d ∈ [C−1, C+64], R ∈ [0.1, 10],
/// ε ∈ (0, K/2), Δ mode and anchor class uniform, random rotation.
pub fn variance_bound_draw(seed: u64, index: u64) -> Result<BoundCheck> {
    let mut rng = stream_rng(seed, index);
    let c = rng.random_range(3..=50usize);
    let d = rng.random_range(c - 1..=c + 64);
    let r = rng.random_range(0.1..=10.0);
    let geom = build_etf_rotated(c, d, r, rng.random())?;
    let eps = geom.inter_class_distance / 2.0 * open_unit(&mut rng);
    let delta_mode = match rng.random_range(0..3) {
        0 => DeltaMode::UniformInBall,
        1 => DeltaMode::Boundary,
        _ => DeltaMode::InSpan,
    };
    let spec = PerturbationSpec {
        epsilon: eps,
        delta_mode,
    };
    let anchor = rng.random_range(0..c);
    let delta = sample_delta(&geom, &spec, &mut rng);
    verify_variance_bounds(&geom, &spec, anchor, &delta)
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn run_variance_bound_suite(draws: usize, seed: u64) -> Result<VarianceBoundReport> {
    let checks: Vec<BoundCheck> = (0..draws as u64)
        .into_par_iter()
        .map(|i| variance_bound_draw(seed, i))
        .collect::<Result<_>>()?;
    Ok(VarianceBoundReport {
        draws,
        bound_violations: checks
            .iter()
            .filter(|c| c.lower_slack < -BOUND_TOLERANCE || c.upper_slack < -BOUND_TOLERANCE)
            .count(),
        exact_mismatches: checks.iter().filter(|c| c.exact_rel_error > IDENTITY_TOLERANCE).count(),
        min_lower_slack: checks.iter().map(|c| c.lower_slack).fold(f64::INFINITY, f64::min),
        min_upper_slack: checks.iter().map(|c| c.upper_slack).fold(f64::INFINITY, f64::min),
        max_exact_rel_error: checks.iter().map(|c| c.exact_rel_error).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub draws: usize,
    pub identity_failures: usize,
    pub max_identity_rel_error: f64,
    /// In-span unit points whose ρ differs from 1 by more than 1e-9.
    pub in_span_rho_failures: usize,
    pub max_in_span_rho_error: f64,
    /// Draws where an in-span ID point had lower variance than the OOD point.
    pub dominance_failures: usize,
    /// Draws where equality held but the OOD point was off-span, or vice versa.
    pub equality_failures: usize,
}

struct ProjectionDraw {
    random_point: ProjectionCheck,
    in_span_rho_error: f64,
    in_span_identity: ProjectionCheck,
    dominance_ok: bool,
    equality_ok: bool,
}

fn projection_draw(seed: u64, index: u64) -> Result<ProjectionDraw> {
    let mut rng = stream_rng(seed, index);
    let c = rng.random_range(3..=50usize);
    let d = rng.random_range(c - 1..=c + 64);
    let r = rng.random_range(0.1..=10.0);
    let geom = build_etf_rotated(c, d, r, rng.random())?;

    let point = unit_vector(d, &mut rng);
    let random_point = check_projection_identity(&geom, &point)?;

    let in_span = (geom.span_basis() * unit_vector(c - 1, &mut rng)).normalize();
    let in_span_identity = check_projection_identity(&geom, &in_span)?;
    let in_span_rho_error = (in_span_identity.rho - 1.0).abs();

    // Dominance on a unit-ball copy of the frame with in-span ID deviations.
    let unit_r = rng.random_range(0.65..=1.0);
    let unit_geom = build_etf_rotated(c, d, unit_r, rng.random())?;
    let lo = (1.0 - unit_r).max(0.0);
    let hi = (unit_geom.inter_class_distance / 2.0).min(unit_r);
    let eps = lo + (hi - lo) * rng.random_range(0.01..0.99);
    let spec = PerturbationSpec {
        epsilon: eps,
        delta_mode: DeltaMode::InSpan,
    };
    let anchor = rng.random_range(0..c);
    let id_point = sample_unit_id_point(&unit_geom, anchor, &spec, &mut rng)?;
    let id_var = population_variance(&squared_distances(&unit_geom.means, &id_point));
    let scale = 4.0 * unit_r * unit_r / (c as f64 - 1.0);
    // Alternate between off-span OOD points and in-span ones (equality case).
    let (ood, expect_equal) = if index % 2 == 0 || d < c {
        ((unit_geom.span_basis() * unit_vector(c - 1, &mut rng)).normalize(), true)
    } else {
        (unit_vector(d, &mut rng), false)
    };
    let ood_var = population_variance(&squared_distances(&unit_geom.means, &ood));
    let ood_rho = projection_rho(&unit_geom, &ood)?;
    let dominance_ok = id_var >= ood_var - IDENTITY_TOLERANCE * scale;
    let is_equal = (id_var - ood_var).abs() <= IDENTITY_TOLERANCE * scale;
    let rho_is_one = (ood_rho - 1.0).abs() <= IDENTITY_TOLERANCE;
    let equality_ok = is_equal == rho_is_one && rho_is_one == expect_equal;

    Ok(ProjectionDraw {
        random_point,
        in_span_rho_error,
        in_span_identity,
        dominance_ok,
        equality_ok,
    })
}

pub fn run_projection_suite(draws: usize, seed: u64) -> Result<ProjectionReport> {
    let results: Vec<ProjectionDraw> = (0..draws as u64)
        .into_par_iter()
        .map(|i| projection_draw(seed, i))
        .collect::<Result<_>>()?;
    Ok(ProjectionReport {
        draws,
        identity_failures: results
            .iter()
            .filter(|r| !r.random_point.passed || !r.in_span_identity.passed)
            .count(),
        max_identity_rel_error: results
            .iter()
            .map(|r| r.random_point.rel_error.max(r.in_span_identity.rel_error))
            .fold(0.0, f64::max),
        in_span_rho_failures: results.iter().filter(|r| r.in_span_rho_error > IDENTITY_TOLERANCE).count(),
        max_in_span_rho_error: results.iter().map(|r| r.in_span_rho_error).fold(0.0, f64::max),
        dominance_failures: results.iter().filter(|r| !r.dominance_ok).count(),
        equality_failures: results.iter().filter(|r| !r.equality_ok).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub draws: usize,
    pub id_points_per_draw: usize,
    /// Draws where the angular condition held by construction.
    pub applicable: usize,
    /// Applicable draws with at least one ID point not strictly above the OOD variance.
    pub separation_failures: usize,
    /// Smallest `min_ID Var − Var_OOD` over applicable draws.
    pub min_variance_gap: f64,
    pub min_condition_margin: f64,
}

/// C ∈ [3, 50], d ∈ [C, C+64], R ∈ [0.65, 1], ε ∈ (1−R, min(R, K/2)).
pub fn separation_draw(seed: u64, index: u64, id_points: usize) -> Result<SeparationVerdict> {
    let mut rng = stream_rng(seed, index);
    let c = rng.random_range(3..=50usize);
    let d = rng.random_range(c..=c + 64);
    let r = rng.random_range(0.65..=1.0);
    let geom = build_etf_rotated(c, d, r, rng.random())?;
    let lo = (1.0 - r).max(0.0);
    let hi = (geom.inter_class_distance / 2.0).min(r);
    let eps = lo + (hi - lo) * rng.random_range(0.01..0.99);
    let mut points = DMatrix::zeros(id_points, d);
    for i in 0..id_points {
        let spec = PerturbationSpec {
            epsilon: eps,
            delta_mode: match i % 3 {
                0 => DeltaMode::UniformInBall,
                1 => DeltaMode::Boundary,
                _ => DeltaMode::InSpan,
            },
        };
        let anchor = rng.random_range(0..c);
        let x = sample_unit_id_point(&geom, anchor, &spec, &mut rng)?;
        points.set_row(i, &x.transpose());
    }
    let fraction = rng.random_range(0.0..0.99);
    let ood = sample_separated_ood_point(&geom, eps, fraction, &mut rng)?;
    verify_separation(&geom, eps, &ood, &points)
}

pub fn run_separation_suite(draws: usize, id_points: usize, seed: u64) -> Result<SeparationReport> {
    let verdicts: Vec<SeparationVerdict> = (0..draws as u64)
        .into_par_iter()
        .map(|i| separation_draw(seed, i, id_points))
        .collect::<Result<_>>()?;
    let applicable: Vec<&SeparationVerdict> = verdicts.iter().filter(|v| v.applicable).collect();
    Ok(SeparationReport {
        draws,
        id_points_per_draw: id_points,
        applicable: applicable.len(),
        separation_failures: applicable.iter().filter(|v| !v.separated).count(),
        min_variance_gap: applicable
            .iter()
            .map(|v| v.id_variances.iter().copied().fold(f64::INFINITY, f64::min) - v.ood_variance)
            .fold(f64::INFINITY, f64::min),
        min_condition_margin: applicable
            .iter()
            .map(|v| v.condition_margin)
            .fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisReport {
    pub draws: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

pub fn run_mahalanobis_suite(draws: usize, seed: u64) -> Result<MahalanobisReport> {
    let checks: Vec<MahalanobisCheck> = (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let c = rng.random_range(3..=20usize);
            let d = rng.random_range(c - 1..=c + 16);
            let r = rng.random_range(0.5..=5.0);
            let geom = build_etf(c, d, r)?;
            let spec = PerturbationSpec {
                epsilon: geom.inter_class_distance / 2.0 * rng.random_range(0.01..0.99),
                delta_mode: DeltaMode::UniformInBall,
            };
            let anchor = rng.random_range(0..c);
            let delta = sample_delta(&geom, &spec, &mut rng);
            verify_mahalanobis_analogue(&geom, &spec, anchor, &delta, rng.random())
        })
        .collect::<Result<_>>()?;
    Ok(MahalanobisReport {
        draws,
        failures: checks.iter().filter(|c| !c.passed).count(),
        max_rel_error: checks.iter().map(|c| c.rel_error).fold(0.0, f64::max),
    })
}
