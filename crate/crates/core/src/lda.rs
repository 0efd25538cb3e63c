//! Latent Dirichlet Allocation fitted by collapsed Gibbs sampling.
//!
//! The document-topic matrix (theta) is the per-document probabilistic topic
//! assignment vector that gets fused with the sentence embeddings.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::table::{self, TableError};
use crate::tfidf::{MatrixKind, TermMatrix};

/// Sweeps between log-likelihood checkpoints.
pub const LOG_LIKELIHOOD_EVERY: usize = 50;

#[derive(Debug, Error)]
pub enum LdaError {
    #[error("invalid LDA config: {0}")]
    InvalidConfig(String),
    #[error("LDA needs a counts matrix, got {0:?}")]
    WrongKind(MatrixKind),
    #[error("corpus has no tokens")]
    EmptyCorpus,
    #[error("count at row {row}, column {col} is not a non-negative integer: {value}")]
    NonIntegerCount { row: usize, col: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaConfig {
    pub n_topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub n_iterations: usize,
    pub burn_in: usize,
    /// Sweeps between retained post-burn-in samples.
    pub thin: usize,
    pub seed: u64,
}

impl LdaConfig {
    /// Defaults with `alpha = 50 / n_topics`.
    pub fn new(n_topics: usize) -> Self {
        Self {
            n_topics,
            alpha: 50.0 / n_topics.max(1) as f64,
            beta: 0.01,
            n_iterations: 1000,
            burn_in: 500,
            thin: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), LdaError> {
        let bad = |m: &str| Err(LdaError::InvalidConfig(m.to_owned()));
        if self.n_topics == 0 {
            return bad("n_topics must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.burn_in >= self.n_iterations {
            return bad("burn_in must be smaller than n_iterations");
        }
        if self.thin == 0 {
            return bad("thin must be >= 1");
        }
        Ok(())
    }
}

impl Default for LdaConfig {
    fn default() -> Self {
        Self::new(8)
    }
}

#[derive(Debug, Clone)]
pub struct LdaModel {
    /// n_docs x K posterior mean document-topic probabilities.
    pub theta: Array2<f64>,
    /// K x V posterior mean topic-term probabilities.
    pub phi: Array2<f64>,
    /// Term index of every token, per document.
    pub tokens: Vec<Vec<usize>>,
    /// Final topic label of every token, aligned with `tokens`.
    pub assignments: Vec<Vec<usize>>,
    pub terms: Vec<String>,
    pub config: LdaConfig,
    /// `(sweep, joint log-likelihood)` checkpoints.
    pub log_likelihood: Vec<(usize, f64)>,
}

struct Counts {
    k: usize,
    v: usize,
    doc_topic: Vec<u32>,
    topic_term: Vec<u32>,
    topic_total: Vec<u32>,
}

impl Counts {
    fn add(&mut self, d: usize, w: usize, t: usize) {
        self.doc_topic[d * self.k + t] += 1;
        self.topic_term[t * self.v + w] += 1;
        self.topic_total[t] += 1;
    }

    fn remove(&mut self, d: usize, w: usize, t: usize) {
        self.doc_topic[d * self.k + t] -= 1;
        self.topic_term[t * self.v + w] -= 1;
        self.topic_total[t] -= 1;
    }

    fn check_consistency(&self, doc_lens: &[usize]) {
        for (d, &len) in doc_lens.iter().enumerate() {
            let sum: u32 = self.doc_topic[d * self.k..(d + 1) * self.k].iter().sum();
            assert_eq!(sum as usize, len, "doc {d} topic counts");
        }
        for t in 0..self.k {
            let by_term: u32 = self.topic_term[t * self.v..(t + 1) * self.v].iter().sum();
            let by_doc: u32 = (0..doc_lens.len()).map(|d| self.doc_topic[d * self.k + t]).sum();
            assert_eq!(by_term, self.topic_total[t], "topic {t} term counts");
            assert_eq!(by_doc, self.topic_total[t], "topic {t} doc counts");
        }
    }
}

fn expand_tokens(counts: &TermMatrix) -> Result<Vec<Vec<usize>>, LdaError> {
    (0..counts.n_docs())
        .map(|d| {
            let mut tokens = Vec::new();
            for &(col, w) in counts.row(d) {
                if w < 0.0 || w.fract() != 0.0 {
                    return Err(LdaError::NonIntegerCount { row: d, col, value: w });
                }
                tokens.extend(std::iter::repeat_n(col, w as usize));
            }
            Ok(tokens)
        })
        .collect()
}

pub fn fit_lda(counts: &TermMatrix, config: &LdaConfig) -> Result<LdaModel, LdaError> {
    config.validate()?;
    if counts.kind() != MatrixKind::Counts {
        return Err(LdaError::WrongKind(counts.kind()));
    }
    let tokens = expand_tokens(counts)?;
    let total_tokens: usize = tokens.iter().map(Vec::len).sum();
    if total_tokens == 0 || counts.n_terms() == 0 {
        return Err(LdaError::EmptyCorpus);
    }
    let (n_docs, k, v) = (counts.n_docs(), config.n_topics, counts.n_terms());
    if k > total_tokens {
        log::warn!("LDA asked for {k} topics but the corpus only has {total_tokens} tokens");
    }
    let (alpha, beta) = (config.alpha, config.beta);
    let v_beta = v as f64 * beta;
    let doc_lens: Vec<usize> = tokens.iter().map(Vec::len).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = Counts {
        k,
        v,
        doc_topic: vec![0; n_docs * k],
        topic_term: vec![0; k * v],
        topic_total: vec![0; k],
    };
    let mut assignments: Vec<Vec<usize>> = tokens
        .iter()
        .enumerate()
        .map(|(d, doc)| {
            doc.iter()
                .map(|&w| {
                    let t = rng.random_range(0..k);
                    state.add(d, w, t);
                    t
                })
                .collect()
        })
        .collect();

    let mut theta_sum = Array2::<f64>::zeros((n_docs, k));
    let mut phi_sum = Array2::<f64>::zeros((k, v));
    let mut n_samples = 0usize;
    let mut log_likelihood = Vec::new();
    let mut cumulative = vec![0.0f64; k];

    for sweep in 1..=config.n_iterations {
        for (d, doc) in tokens.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = assignments[d][i];
                state.remove(d, w, old);
                let mut total = 0.0;
                for (t, slot) in cumulative.iter_mut().enumerate() {
                    let p = (f64::from(state.doc_topic[d * k + t]) + alpha)
                        * (f64::from(state.topic_term[t * v + w]) + beta)
                        / (f64::from(state.topic_total[t]) + v_beta);
                    total += p;
                    *slot = total;
                }
                let u = rng.random::<f64>() * total;
                let new = cumulative.iter().position(|&c| u < c).unwrap_or(k - 1);
                state.add(d, w, new);
                assignments[d][i] = new;
            }
        }
        if cfg!(debug_assertions) {
            state.check_consistency(&doc_lens);
        }
        if sweep % LOG_LIKELIHOOD_EVERY == 0 {
            log_likelihood.push((sweep, joint_log_likelihood(&state, &doc_lens, alpha, beta)));
        }
        if sweep > config.burn_in && (sweep - config.burn_in).is_multiple_of(config.thin) {
            accumulate(&state, &doc_lens, alpha, beta, &mut theta_sum, &mut phi_sum);
            n_samples += 1;
        }
    }
    if n_samples == 0 {
        accumulate(&state, &doc_lens, alpha, beta, &mut theta_sum, &mut phi_sum);
    }
    normalize_rows(&mut theta_sum);
    normalize_rows(&mut phi_sum);

    Ok(LdaModel {
        theta: theta_sum,
        phi: phi_sum,
        tokens,
        assignments,
        terms: counts.vocabulary().terms().to_vec(),
        config: config.clone(),
        log_likelihood,
    })
}

fn accumulate(
    state: &Counts,
    doc_lens: &[usize],
    alpha: f64,
    beta: f64,
    theta: &mut Array2<f64>,
    phi: &mut Array2<f64>,
) {
    let (k, v) = (state.k, state.v);
    let k_alpha = k as f64 * alpha;
    let v_beta = v as f64 * beta;
    for (d, &len) in doc_lens.iter().enumerate() {
        let denom = len as f64 + k_alpha;
        for t in 0..k {
            theta[[d, t]] += (f64::from(state.doc_topic[d * k + t]) + alpha) / denom;
        }
    }
    for t in 0..k {
        let denom = f64::from(state.topic_total[t]) + v_beta;
        for w in 0..v {
            phi[[t, w]] += (f64::from(state.topic_term[t * v + w]) + beta) / denom;
        }
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
}

/// `ln p(w, z)` with theta and phi integrated out.
fn joint_log_likelihood(state: &Counts, doc_lens: &[usize], alpha: f64, beta: f64) -> f64 {
    let (k, v) = (state.k, state.v);
    let (kf, vf) = (k as f64, v as f64);
    let mut ll = kf * (ln_gamma(vf * beta) - vf * ln_gamma(beta));
    for t in 0..k {
        ll += state.topic_term[t * v..(t + 1) * v]
            .iter()
            .map(|&n| ln_gamma(f64::from(n) + beta))
            .sum::<f64>();
        ll -= ln_gamma(f64::from(state.topic_total[t]) + vf * beta);
    }
    ll += doc_lens.len() as f64 * (ln_gamma(kf * alpha) - kf * ln_gamma(alpha));
    for (d, &len) in doc_lens.iter().enumerate() {
        ll += state.doc_topic[d * k..(d + 1) * k]
            .iter()
            .map(|&n| ln_gamma(f64::from(n) + alpha))
            .sum::<f64>();
        ll -= ln_gamma(len as f64 + kf * alpha);
    }
    ll
}

impl LdaModel {
    pub fn n_topics(&self) -> usize {
        self.config.n_topics
    }

    /// Per-document topic counts derived from the final token assignments.
    pub fn doc_topic_counts(&self) -> Array2<usize> {
        let mut counts = Array2::zeros((self.assignments.len(), self.n_topics()));
        for (d, doc) in self.assignments.iter().enumerate() {
            for &t in doc {
                counts[[d, t]] += 1;
            }
        }
        counts
    }

    /// Writes `theta.csv`, `phi.csv` and `config.json` into `dir`.
    pub fn write_dir(&self, dir: &Path, doc_ids: &[String]) -> Result<(), LdaError> {
        fs::create_dir_all(dir)?;
        let topics = table::numbered("topic", self.n_topics());
        let theta = fs::File::create(dir.join("theta.csv"))?;
        table::write_labeled_matrix(theta, "id", &topics, doc_ids, self.theta.view())?;
        let phi = fs::File::create(dir.join("phi.csv"))?;
        table::write_labeled_matrix(phi, "term", &topics, &self.terms, self.phi.t())?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        Ok(())
    }
}

/// The document-topic matrix, row-aligned with the corpus.
pub fn doc_topic_matrix(model: &LdaModel) -> &Array2<f64> {
    &model.theta
}

/// Highest-probability terms per topic; ties broken lexicographically.
/// `k` is clamped to the vocabulary size.
pub fn lda_top_terms(model: &LdaModel, k: usize) -> Vec<Vec<(String, f64)>> {
    let k = k.min(model.terms.len());
    model
        .phi
        .rows()
        .into_iter()
        .map(|row| {
            let mut ranked: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| model.terms[a.0].cmp(&model.terms[b.0])));
            ranked
                .into_iter()
                .take(k)
                .map(|(i, p)| (model.terms[i].clone(), p))
                .collect()
        })
        .collect()
}
