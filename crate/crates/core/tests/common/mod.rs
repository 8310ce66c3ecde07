//! Reference implementations shared by the integration tests. Everything here
//! is written with plain loops so it shares no code path with the library.
#![allow(dead_code)]

use mahavar::feature_store::FeatureBundle;
use mahavar::gaussian_stats::{ClassStatistics, NormalizationMode};
use mahavar::random::stream_rng;
use mahavar::scorers::DistanceMatrix;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub struct NaiveStats {
    pub means: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
}

fn l2(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| v / n).collect()
}

pub fn naive_normalize(features: &[Vec<f64>], mode: NormalizationMode) -> Vec<Vec<f64>> {
    match mode {
        NormalizationMode::None => features.to_vec(),
        NormalizationMode::L2 => features.iter().map(|r| l2(r)).collect(),
        NormalizationMode::CenteredL2 => {
            let d = features[0].len();
            let mut g = vec![0.0; d];
            for r in features {
                for j in 0..d {
                    g[j] += r[j];
                }
            }
            for v in &mut g {
                *v /= features.len() as f64;
            }
            features
                .iter()
                .map(|r| l2(&r.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>()))
                .collect()
        }
    }
}

/// Class means and tied covariance (divisor N) by explicit double loops.
pub fn naive_fit(features: &[Vec<f64>], labels: &[usize], classes: usize, mode: NormalizationMode) -> NaiveStats {
    let x = naive_normalize(features, mode);
    let d = x[0].len();
    let mut means = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in x.iter().zip(labels) {
        counts[y] += 1;
        for j in 0..d {
            means[y][j] += row[j];
        }
    }
    for c in 0..classes {
        for j in 0..d {
            means[c][j] /= counts[c] as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for (row, &y) in x.iter().zip(labels) {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (row[a] - means[y][a]) * (row[b] - means[y][b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..d {
            cov[a][b] /= x.len() as f64;
        }
    }
    NaiveStats {
        means,
        covariance: cov,
    }
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        for v in &mut a[col] {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for j in 0..2 * n {
                        a[r][j] -= f * a[col][j];
                    }
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// (x−μ_c)ᵀ (Σ+λI)⁻¹ (x−μ_c) for every class, via an explicit inverse.
pub fn explicit_inverse_distances(x: &[f64], stats: &ClassStatistics) -> Vec<f64> {
    let d = stats.dim();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| stats.tied_covariance()[(a, b)] + if a == b { stats.regularizer() } else { 0.0 })
                .collect()
        })
        .collect();
    let inv = gauss_jordan_inverse(&cov);
    (0..stats.num_classes())
        .map(|c| {
            let diff: Vec<f64> = (0..d).map(|j| x[j] - stats.means()[(c, j)]).collect();
            let mut q = 0.0;
            for a in 0..d {
                for b in 0..d {
                    q += diff[a] * inv[a][b] * diff[b];
                }
            }
            q
        })
        .collect()
}

pub fn pair_count_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &a in id {
        for &b in ood {
            if a > b {
                wins += 1;
            } else if a == b {
                ties += 1;
            }
        }
    }
    (wins as f64 + 0.5 * ties as f64) / (id.len() * ood.len()) as f64
}

/// Largest candidate threshold keeping ≥ ⌈tpr·n⌉ ID scores, then the OOD
/// fraction at or above it. Exact for integer-valued fixtures with tpr·n
/// representable.
pub fn counting_fpr(id: &[i64], ood: &[i64], tpr_num: u64, tpr_den: u64) -> (f64, i64) {
    let n = id.len() as u64;
    let needed = (tpr_num * n).div_ceil(tpr_den).max(1);
    let mut best = i64::MIN;
    for &t in id {
        let kept = id.iter().filter(|&&s| s >= t).count() as u64;
        if kept >= needed && t > best {
            best = t;
        }
    }
    let fp = ood.iter().filter(|&&s| s >= best).count();
    (fp as f64 / ood.len() as f64, best)
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Gaussian blobs with random (non-ETF) means and a correlated covariance.
pub fn random_labeled(n: usize, classes: usize, d: usize, seed: u64) -> FeatureBundle {
    let mut rng = stream_rng(seed, 0);
    let centers = DMatrix::from_fn(classes, d, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
    let mix = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
    let mut features = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Round-robin first so every class has at least two rows.
        let y = if i < 2 * classes { i % classes } else { rng.random_range(0..classes) };
        let z = DMatrix::from_fn(1, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = centers.row(y) + z * &mix + DMatrix::from_fn(1, d, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
        features.set_row(i, &x);
        labels.push(y);
    }
    FeatureBundle::new("train", features, Some(labels), None, classes)
        .unwrap()
        .with_train_split(true)
        .unwrap()
}

/// Max entry-wise error relative to the largest reference magnitude.
pub fn max_rel_error(got: &DMatrix<f64>, want: &[Vec<f64>]) -> f64 {
    let scale = want.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut err = 0.0f64;
    for (i, row) in want.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            err = err.max((got[(i, j)] - v).abs());
        }
    }
    err / scale
}

/// Distance matrices whose α-curve climbs one AUROC step per grid point up to
/// `optimum` and drops one step per point after it.
///
/// Two identical OOD rows sit at (min M, var V). A "gain" ID row has m > M and
/// v > V, so it outranks OOD exactly when α > (m−M)/(v−V); a "loss" row has
/// m < M, v < V and outranks OOD when α < (M−m)/(V−v). Thresholds are placed
/// at midpoints between neighbouring grid values.
pub fn designed_tuner_fixture(grid: &[f64], optimum: usize) -> (DistanceMatrix, DistanceMatrix) {
    const M: f64 = 1000.0;
    const V: f64 = 100.0;
    const GAP: f64 = 50.0;
    // Row [m, m+a, m+a, m+a] has population variance 3a²/16.
    let row = |m: f64, v: f64| {
        let a = (16.0 * v / 3.0).sqrt();
        [m, m + a, m + a, m + a]
    };
    let mut id_rows = Vec::new();
    for j in 0..optimum {
        let t = 0.5 * (grid[j] + grid[j + 1]);
        id_rows.push(row(M + t * GAP, V + GAP));
    }
    for j in optimum..grid.len() - 1 {
        let t = 0.5 * (grid[j] + grid[j + 1]);
        id_rows.push(row(M - t * GAP, V - GAP));
    }
    let flat: Vec<f64> = id_rows.iter().flatten().copied().collect();
    let id = DistanceMatrix::new(
        DMatrix::from_row_slice(id_rows.len(), 4, &flat),
        mahavar::scorers::Metric::Mahalanobis,
        NormalizationMode::L2,
        "designed",
    )
    .unwrap();
    let o = row(M, V);
    let ood = DistanceMatrix::new(
        DMatrix::from_row_slice(2, 4, &[o, o].concat()),
        mahavar::scorers::Metric::Mahalanobis,
        NormalizationMode::L2,
        "designed",
    )
    .unwrap();
    (id, ood)
}
