//! 2-D document layouts: principal components (deterministic baseline) and
//! a UMAP-style neighbor embedding initialized from them.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("need at least {needed} rows, got {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("need at least 2 columns, got {0}")]
    TooFewColumns(usize),
    #[error("all rows are identical; nothing to project")]
    Degenerate,
    #[error("n_neighbors must be >= 2 and smaller than the number of rows ({n}), got {k}")]
    Neighbors { k: usize, n: usize },
    #[error("coordinates have {found} rows, expected {expected}")]
    RowMismatch { expected: usize, found: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    Pca,
    NeighborEmbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    pub coords: Array2<f64>,
    pub method: ProjectionMethod,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Projection2D {
    /// `id,x,y[,cluster_label]`.
    pub fn write_csv<W: Write>(&self, out: W, ids: &[String], labels: Option<&[usize]>) -> Result<(), ProjectionError> {
        let mut wtr = csv::Writer::from_writer(out);
        if labels.is_some() {
            wtr.write_record(["id", "x", "y", "cluster_label"])?;
        } else {
            wtr.write_record(["id", "x", "y"])?;
        }
        for (i, (id, row)) in ids.iter().zip(self.coords.rows()).enumerate() {
            let mut rec = vec![id.clone(), row[0].to_string(), row[1].to_string()];
            if let Some(l) = labels {
                rec.push(l[i].to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn check_finite(x: ArrayView2<f64>) -> Result<(), ProjectionError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ProjectionError::NonFinite)
    }
}

/// Projects mean-centered rows onto the two leading covariance
/// eigenvectors. Each component's sign is chosen so its largest-magnitude
/// loading is positive.
pub fn pca_2d(x: ArrayView2<f64>) -> Result<Projection2D, ProjectionError> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(ProjectionError::TooFewRows { needed: 3, found: n });
    }
    if d < 2 {
        return Err(ProjectionError::TooFewColumns(d));
    }
    check_finite(x)?;
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let total_variance: f64 = cov.diag().sum();
    if total_variance <= 0.0 {
        return Err(ProjectionError::Degenerate);
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Array2::<f64>::zeros((d, 2));
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let lead = (0..d)
            .fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[[i, slot]] = sign * v[i];
        }
    }
    let coords = centered.dot(&components);
    let params = BTreeMap::from([
        ("explained_variance_0".to_string(), eig.eigenvalues[order[0]].max(0.0)),
        ("explained_variance_1".to_string(), eig.eigenvalues[order[1]].max(0.0)),
        ("total_variance".to_string(), total_variance),
    ]);
    Ok(Projection2D {
        coords,
        method: ProjectionMethod::Pca,
        params,
        seed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborEmbedConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub epochs: usize,
    pub negative_samples: usize,
    pub seed: u64,
}

impl Default for NeighborEmbedConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            epochs: 200,
            negative_samples: 5,
            seed: 0,
        }
    }
}

fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact k nearest neighbors of every row (self excluded), nearest first,
/// ties broken by the lower index.
pub fn exact_knn(x: ArrayView2<f64>, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = x.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, euclidean(x.row(i), x.row(j))))
                .collect();
            d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            d.truncate(k);
            d
        })
        .collect()
}

/// Finds `sigma` with `sum_j exp(-max(0, d_j - rho) / sigma) = target`.
fn smooth_knn_sigma(dists: &[(usize, f64)], rho: f64, target: f64) -> f64 {
    let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..64 {
        let psum: f64 = dists.iter().map(|&(_, d)| (-(d - rho).max(0.0) / mid).exp()).sum();
        if (psum - target).abs() < 1e-5 {
            break;
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    mid.max(1e-12)
}

/// Symmetrized fuzzy neighbor graph as undirected `(i, j, weight)` edges with
/// `i < j`.
pub fn fuzzy_graph(x: ArrayView2<f64>, n_neighbors: usize) -> Vec<(usize, usize, f64)> {
    let knn = exact_knn(x, n_neighbors);
    let target = (n_neighbors as f64).log2();
    let mut directed: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (i, neigh) in knn.iter().enumerate() {
        let rho = neigh.first().map_or(0.0, |&(_, d)| d);
        let sigma = smooth_knn_sigma(neigh, rho, target);
        for &(j, d) in neigh {
            let w = (-(d - rho).max(0.0) / sigma).exp();
            let key = (i.min(j), i.max(j));
            let slot = directed.entry(key).or_insert((0.0, 0.0));
            if i < j {
                slot.0 = w;
            } else {
                slot.1 = w;
            }
        }
    }
    directed
        .into_iter()
        .map(|((i, j), (w1, w2))| (i, j, w1 + w2 - w1 * w2))
        .filter(|&(_, _, w)| w > 0.0)
        .collect()
}

/// Fits `1 / (1 + a x^(2b))` to the offset exponential defined by
/// `min_dist` (spread 1) by damped Gauss-Newton least squares.
pub fn fit_ab(min_dist: f64) -> (f64, f64) {
    let spread = 1.0;
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| (1.0 / (1.0 + a * x.powf(2.0 * b)) - y).powi(2))
            .sum()
    };
    let (mut a, mut b) = (1.0, 1.0);
    let mut lambda = 1e-3;
    let mut err = sse(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let g = 1.0 / (1.0 + a * p);
            let r = g - y;
            let da = -p * g * g;
            let db = -a * p * 2.0 * x.ln() * g * g;
            jtj[0][0] += da * da;
            jtj[0][1] += da * db;
            jtj[1][1] += db * db;
            jtr[0] += da * r;
            jtr[1] += db * r;
        }
        jtj[1][0] = jtj[0][1];
        let m00 = jtj[0][0] * (1.0 + lambda);
        let m11 = jtj[1][1] * (1.0 + lambda);
        let det = m00 * m11 - jtj[0][1] * jtj[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let step_b = -(m00 * jtr[1] - jtj[1][0] * jtr[0]) / det;
        let (na, nb) = (a + step_a, b + step_b);
        let new_err = if na > 0.0 && nb > 0.0 { sse(na, nb) } else { f64::INFINITY };
        if new_err < err {
            let done = (err - new_err) < 1e-15;
            a = na;
            b = nb;
            err = new_err;
            lambda = (lambda * 0.3).max(1e-12);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

/// Column-centers and snaps values to a power-of-two grid far below data
/// resolution, so translated copies of the same rows give bitwise-equal input.
fn centered_on_grid(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut c = &x - &mean;
    let max_abs = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        let step = 2f64.powi(max_abs.log2().ceil() as i32 - 36);
        c.mapv_inplace(|v| (v / step).round() * step);
    }
    c
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

/// UMAP-style layout: exact kNN graph, smooth-kNN local scales,
/// probabilistic-union symmetrization, PCA initialization and seeded SGD on
/// the fuzzy cross-entropy with negative sampling.
pub fn neighbor_embed_2d(x: ArrayView2<f64>, config: &NeighborEmbedConfig) -> Result<Projection2D, ProjectionError> {
    let n = x.nrows();
    if config.n_neighbors < 2 || n <= config.n_neighbors {
        return Err(ProjectionError::Neighbors {
            k: config.n_neighbors,
            n,
        });
    }
    check_finite(x)?;
    let x = centered_on_grid(x);
    let init = pca_2d(x.view())?;
    let (a, b) = fit_ab(config.min_dist);
    let edges = fuzzy_graph(x.view(), config.n_neighbors);

    let mut y = init.coords;
    let max_abs = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        y.mapv_inplace(|v| 10.0 * v / max_abs);
    }

    // Both directions of every undirected edge, like a symmetric COO graph.
    let directed: Vec<(usize, usize, f64)> = edges
        .iter()
        .flat_map(|&(i, j, w)| [(i, j, w), (j, i, w)])
        .collect();
    let max_w = directed.iter().fold(0.0f64, |m, e| m.max(e.2));
    let epochs_per_sample: Vec<f64> = directed.iter().map(|e| max_w / e.2).collect();
    let mut next_sample = epochs_per_sample.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 0..config.epochs {
        let lr = 1.0 - epoch as f64 / config.epochs as f64;
        let now = (epoch + 1) as f64;
        for (e, &(head, tail, _)) in directed.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            next_sample[e] += epochs_per_sample[e];
            let (dx, dy) = (y[[head, 0]] - y[[tail, 0]], y[[head, 1]] - y[[tail, 1]]);
            let d2 = dx * dx + dy * dy;
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
                let (gx, gy) = (clip(coeff * dx) * lr, clip(coeff * dy) * lr);
                y[[head, 0]] += gx;
                y[[head, 1]] += gy;
                y[[tail, 0]] -= gx;
                y[[tail, 1]] -= gy;
            }
            for _ in 0..config.negative_samples {
                let other = rng.random_range(0..n);
                if other == head {
                    continue;
                }
                let (dx, dy) = (y[[head, 0]] - y[[other, 0]], y[[head, 1]] - y[[other, 1]]);
                let d2 = dx * dx + dy * dy;
                let (gx, gy) = if d2 > 0.0 {
                    let coeff = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                    (clip(coeff * dx), clip(coeff * dy))
                } else {
                    (4.0, 4.0)
                };
                y[[head, 0]] += gx * lr;
                y[[head, 1]] += gy * lr;
            }
        }
    }
    let params = BTreeMap::from([
        ("n_neighbors".to_string(), config.n_neighbors as f64),
        ("min_dist".to_string(), config.min_dist),
        ("epochs".to_string(), config.epochs as f64),
        ("negative_samples".to_string(), config.negative_samples as f64),
        ("a".to_string(), a),
        ("b".to_string(), b),
    ]);
    Ok(Projection2D {
        coords: y,
        method: ProjectionMethod::NeighborEmbed,
        params,
        seed: config.seed,
    })
}

/// Mean fraction of each point's k input-space neighbors that are also
/// among its k layout neighbors.
pub fn knn_recall(x: ArrayView2<f64>, coords: ArrayView2<f64>, k: usize) -> Result<f64, ProjectionError> {
    let n = x.nrows();
    if coords.nrows() != n {
        return Err(ProjectionError::RowMismatch {
            expected: n,
            found: coords.nrows(),
        });
    }
    if k == 0 || n <= k {
        return Err(ProjectionError::Neighbors { k, n });
    }
    let high = exact_knn(x, k);
    let low = exact_knn(coords, k);
    let total: usize = high
        .iter()
        .zip(&low)
        .map(|(h, l)| h.iter().filter(|(j, _)| l.iter().any(|(m, _)| m == j)).count())
        .sum();
    Ok(total as f64 / (n * k) as f64)
}
