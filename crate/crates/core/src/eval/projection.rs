use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "pca" => Ok(Self::Pca),
            "tsne" => Ok(Self::Tsne),
            other => Err(EvalError::Config(format!("unknown projection method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

pub const TSNE_MAX_POINTS: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
    pub label: usize,
}

fn check_points(points: &[Vec<f64>], labels: &[usize]) -> Result<usize, EvalError> {
    if points.len() != labels.len() {
        return Err(EvalError::Shape(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let d = points.first().map_or(0, |p| p.len());
    if d == 0 {
        return Err(EvalError::Shape("no points to project".into()));
    }
    if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        return Err(EvalError::Shape("points must share one dimension and be finite".into()));
    }
    Ok(d)
}

/// Coordinates on the top two principal axes. Each axis is signed so that
/// its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Point2>, EvalError> {
    let d = check_points(points, labels)?;
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |r: usize| -> Vec<f64> {
        if r >= d {
            return vec![0.0; d];
        }
        let v: Vec<f64> = eig.eigenvectors.column(order[r]).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter().map(|x| -x).collect()
        } else {
            v
        }
    };
    let (a0, a1) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            Point2 {
                x: row.iter().zip(&a0).map(|(p, q)| p * q).sum(),
                y: row.iter().zip(&a1).map(|(p, q)| p * q).sum(),
                label: labels[i],
            }
        })
        .collect())
}

fn sq_dists(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Row-conditional affinities with per-point bandwidth matched to the
/// perplexity by bisection, then symmetrized.
fn affinities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let dmin = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut wsum = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-(row[j] - dmin) * beta).exp();
                sum += w;
                wsum += w * (row[j] - dmin);
            }
            let entropy = sum.ln() + beta * wsum / sum;
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| (-(row[j] - dmin) * beta).exp())
            .sum();
        for j in (0..n).filter(|&j| j != i) {
            p[i * n + j] = (-(row[j] - dmin) * beta).exp() / sum;
        }
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    sym
}

/// Exact-gradient t-SNE with early exaggeration, momentum and per-coordinate
/// gains. Perplexity is capped at `(N − 1)/3` for small inputs.
pub fn tsne_2d(points: &[Vec<f64>], labels: &[usize], cfg: &TsneConfig) -> Result<Vec<Point2>, EvalError> {
    check_points(points, labels)?;
    let n = points.len();
    if n > TSNE_MAX_POINTS {
        return Err(EvalError::Config(format!(
            "t-SNE limited to {TSNE_MAX_POINTS} points, got {n}"
        )));
    }
    if !(cfg.perplexity > 0.0) {
        return Err(EvalError::Config("perplexity must be positive".into()));
    }
    if n < 3 {
        return pca_2d(points, labels);
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let p = affinities(&sq_dists(points), n, perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("finite sd");
    let mut y: Vec<f64> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let mut vel = vec![0.0; 2 * n];
    let mut gains = vec![1.0; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = 4.0 * (exag * p[i * n + j] - (q / z).max(1e-12)) * q;
                grad[2 * i] += m * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }
        for c in 0..2 * n {
            gains[c] = if (grad[c] > 0.0) != (vel[c] > 0.0) {
                gains[c] + 0.2
            } else {
                (gains[c] * 0.8f64).max(0.01)
            };
            vel[c] = momentum * vel[c] - cfg.learning_rate * gains[c] * grad[c];
            y[c] += vel[c];
        }
        for axis in 0..2 {
            let mean: f64 = (0..n).map(|i| y[2 * i + axis]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[2 * i + axis] -= mean;
            }
        }
    }
    Ok((0..n)
        .map(|i| Point2 {
            x: y[2 * i],
            y: y[2 * i + 1],
            label: labels[i],
        })
        .collect())
}

pub fn project_2d(
    points: &[Vec<f64>],
    labels: &[usize],
    method: ProjectionMethod,
    tsne: &TsneConfig,
) -> Result<Vec<Point2>, EvalError> {
    match method {
        ProjectionMethod::Pca => pca_2d(points, labels),
        ProjectionMethod::Tsne => tsne_2d(points, labels, tsne),
    }
}
