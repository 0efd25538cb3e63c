//! k-means clustering (k-means++ seeding, Lloyd iterations, best of several
//! restarts), silhouette validation, and the three-way representation
//! comparison.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingMatrix;
use crate::table::{self, TableError};
use crate::tfidf::TermMatrix;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("silhouette needs at least 2 distinct clusters")]
    SingleCluster,
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("silhouette needs at least 3 points, got {0}")]
    SilhouetteTooSmall(usize),
    #[error("{what} has {found} rows, expected {expected}")]
    RowMismatch { what: &'static str, expected: usize, found: usize },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 8,
            restarts: 16,
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub n_iterations: usize,
    pub seed: u64,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn write_labels_csv<W: Write>(&self, out: W, ids: &[String]) -> Result<(), ClusterError> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["id", "label"])?;
        for (id, label) in ids.iter().zip(&self.labels) {
            wtr.write_record([id.as_str(), &label.to_string()])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_centroids_csv<W: Write>(&self, out: W) -> Result<(), ClusterError> {
        let names = table::numbered("cluster", self.k());
        table::write_labeled_matrix(
            out,
            "cluster",
            &table::numbered("dim", self.centroids.ncols()),
            &names,
            self.centroids.view(),
        )?;
        Ok(())
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row (ties to the lower index) and the total squared
/// distance.
pub fn assign(x: ArrayView2<f64>, centroids: ArrayView2<f64>) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = x
        .rows()
        .into_iter()
        .map(|row| {
            let (best, d) = nearest(row, centroids);
            inertia += d;
            best
        })
        .collect();
    (labels, inertia)
}

fn nearest(row: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut dist: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            dist.iter()
                .position(|&d| {
                    acc += d;
                    u < acc
                })
                .unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (d, row) in dist.iter_mut().zip(x.rows()) {
            *d = d.min(sq_dist(row, x.row(pick)));
        }
    }
    centroids
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(x: ArrayView2<f64>, labels: &mut [usize], centroids: &mut Array2<f64>) {
    let k = centroids.nrows();
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..x.nrows())
            .filter(|&i| sizes[labels[i]] > 1)
            .map(|i| (i, sq_dist(x.row(i), centroids.row(labels[i]))))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((i, _)) = far else { return };
        labels[i] = empty;
        centroids.row_mut(empty).assign(&x.row(i));
    }
}

fn update_centroids(x: ArrayView2<f64>, labels: &[usize], k: usize, previous: &Array2<f64>) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &l) in x.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    for (c, mut s) in sums.rows_mut().into_iter().enumerate() {
        if counts[c] == 0 {
            s.assign(&previous.row(c));
        } else {
            s /= counts[c] as f64;
        }
    }
    sums
}

struct Run {
    labels: Vec<usize>,
    centroids: Array2<f64>,
    inertia: f64,
    iterations: usize,
}

fn lloyd(x: ArrayView2<f64>, mut centroids: Array2<f64>, max_iters: usize, tol: f64) -> Run {
    let k = centroids.nrows();
    let mut converged = false;
    let mut iterations = 0;
    let mut previous = f64::INFINITY;
    loop {
        let (mut labels, inertia) = assign(x, centroids.view());
        debug_assert!(
            inertia <= previous * (1.0 + 1e-9) + 1e-12,
            "inertia increased: {previous} -> {inertia}"
        );
        previous = inertia;
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let has_empty = sizes.contains(&0);
        let out_of_budget = iterations >= max_iters;
        if (converged || out_of_budget) && (!has_empty || iterations >= max_iters + k) {
            return Run {
                labels,
                centroids,
                inertia,
                iterations,
            };
        }
        repair_empty(x, &mut labels, &mut centroids);
        let next = update_centroids(x, &labels, k, &centroids);
        let shift = next
            .rows()
            .into_iter()
            .zip(centroids.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        converged = shift < tol;
        iterations += 1;
    }
}

fn check_input(x: ArrayView2<f64>, k: usize) -> Result<(), ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if x.nrows() < k {
        return Err(ClusterError::TooFewPoints { n: x.nrows(), k });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ClusterError::NonFinite);
    }
    Ok(())
}

/// Best-of-`restarts` k-means. Restart `r` draws from the ChaCha stream `r`
/// of `seed`; the lowest inertia wins, ties going to the lower restart.
pub fn kmeans(x: ArrayView2<f64>, config: &KMeansConfig) -> Result<ClusterResult, ClusterError> {
    check_input(x, config.k)?;
    let runs: Vec<Run> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            let init = kmeans_plus_plus(x, config.k, &mut rng);
            lloyd(x, init, config.max_iters, config.tol)
        })
        .collect();
    let best = runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("at least one restart");
    Ok(ClusterResult {
        labels: best.labels,
        centroids: best.centroids,
        inertia: best.inertia,
        n_iterations: best.iterations,
        seed: config.seed,
    })
}

/// Per-point silhouette values. Singleton clusters contribute 0.
pub fn silhouette_samples(x: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<f64>, ClusterError> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(ClusterError::RowMismatch {
            what: "labels",
            expected: n,
            found: labels.len(),
        });
    }
    if n < 3 {
        return Err(ClusterError::SilhouetteTooSmall(n));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(ClusterError::EmptyCluster(empty));
    }
    if k < 2 {
        return Err(ClusterError::SingleCluster);
    }
    // sums[i][c]: total distance from point i to the members of cluster c.
    let mut sums = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(x.row(i), x.row(j)).sqrt();
            sums[[i, labels[j]]] += d;
            sums[[j, labels[i]]] += d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let a = sums[[i, own]] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[[i, c]] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect())
}

/// Mean silhouette over all points, Euclidean distance.
pub fn silhouette(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, ClusterError> {
    let s = silhouette_samples(x, labels)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Distance to the second-nearest centroid minus distance to the nearest.
pub fn assignment_margins(x: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut d: Vec<f64> = centroids.rows().into_iter().map(|c| sq_dist(row, c).sqrt()).collect();
            d.sort_by(f64::total_cmp);
            if d.len() < 2 {
                0.0
            } else {
                d[1] - d[0]
            }
        })
        .collect()
}

/// Chance-corrected agreement between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |&m| m + 1);
    let kb = b.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&x| c2(x)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub silhouette: f64,
    pub k: usize,
    pub n_docs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub rows: Vec<MethodScore>,
}

impl MethodComparison {
    pub fn get(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).map(|r| r.silhouette)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ClusterError> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["method", "silhouette", "k", "n_docs"])?;
        for r in &self.rows {
            wtr.write_record([
                r.method.clone(),
                r.silhouette.to_string(),
                r.k.to_string(),
                r.n_docs.to_string(),
            ])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, ClusterError> {
        let mut rdr = csv::Reader::from_reader(input);
        let rows = rdr.deserialize().collect::<Result<Vec<MethodScore>, _>>()?;
        Ok(Self { rows })
    }
}

pub const METHOD_TFIDF: &str = "tfidf";
pub const METHOD_EMBEDDING: &str = "embedding";
pub const METHOD_FUSED: &str = "fused-latent";

/// Clusters each representation with the same k-means settings and scores
/// each in its own space. TF-IDF rows are already L2-normalized.
pub fn compare_methods(
    tfidf: &TermMatrix,
    emb: &EmbeddingMatrix,
    latent: ArrayView2<f64>,
    config: &KMeansConfig,
) -> Result<MethodComparison, ClusterError> {
    let n = latent.nrows();
    for (what, found) in [("tfidf", tfidf.n_docs()), ("embeddings", emb.len())] {
        if found != n {
            return Err(ClusterError::RowMismatch { what, expected: n, found });
        }
    }
    let dense_tfidf = tfidf.to_dense();
    let spaces: [(&str, ArrayView2<f64>); 3] = [
        (METHOD_TFIDF, dense_tfidf.view()),
        (METHOD_EMBEDDING, emb.vectors.view()),
        (METHOD_FUSED, latent),
    ];
    let rows = spaces
        .into_iter()
        .map(|(method, x)| {
            let result = kmeans(x, config)?;
            Ok(MethodScore {
                method: method.to_owned(),
                silhouette: silhouette(x, &result.labels)?,
                k: config.k,
                n_docs: n,
            })
        })
        .collect::<Result<_, ClusterError>>()?;
    Ok(MethodComparison { rows })
}

/// Silhouette and inertia for each k in `ks`; the choice of k is left to the
/// caller.
pub fn k_sweep(x: ArrayView2<f64>, ks: &[usize], config: &KMeansConfig) -> Result<Vec<(usize, f64, f64)>, ClusterError> {
    ks.iter()
        .map(|&k| {
            let result = kmeans(x, &KMeansConfig { k, ..*config })?;
            Ok((k, silhouette(x, &result.labels)?, result.inertia))
        })
        .collect()
}

/// Column means; the optimal single centroid.
pub fn column_mean(x: ArrayView2<f64>) -> ndarray::Array1<f64> {
    x.mean_axis(Axis(0)).expect("non-empty")
}
