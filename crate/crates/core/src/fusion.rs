//! Fusion of LDA topic vectors with sentence embeddings, and a small
//! autoencoder that compresses the fused vectors into a latent space.
//!
//! Network: `input -> hidden (ReLU) -> latent (identity) -> hidden (ReLU) ->
//! output (identity)`, trained full-batch on mean squared reconstruction
//! error with momentum gradient descent.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("theta has {theta} rows but the embedding matrix has {embeddings}")]
    RowCount { theta: usize, embeddings: usize },
    #[error("row {row}: theta id \"{theta}\" does not match embedding id \"{embedding}\"")]
    Misaligned { row: usize, theta: String, embedding: String },
    #[error("gamma must be finite and >= 0, got {0}")]
    InvalidGamma(f64),
    #[error("latent size {latent} must be smaller than the input width {input}")]
    LatentTooLarge { latent: usize, input: usize },
    #[error("training needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("input width {found} does not match the encoder width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid autoencoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `[gamma * theta | embedding]`, row-aligned with the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMatrix {
    pub ids: Vec<String>,
    pub data: Array2<f64>,
    pub gamma: f64,
    pub n_topics: usize,
    pub embed_dim: usize,
}

impl FusedMatrix {
    pub fn width(&self) -> usize {
        self.n_topics + self.embed_dim
    }
}

pub fn fuse(
    theta: ArrayView2<f64>,
    theta_ids: &[String],
    emb: &EmbeddingMatrix,
    gamma: f64,
) -> Result<FusedMatrix, FusionError> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(FusionError::InvalidGamma(gamma));
    }
    if theta.nrows() != emb.len() || theta_ids.len() != theta.nrows() {
        return Err(FusionError::RowCount {
            theta: theta.nrows(),
            embeddings: emb.len(),
        });
    }
    if let Some((row, (a, b))) = theta_ids
        .iter()
        .zip(&emb.ids)
        .enumerate()
        .find(|(_, (a, b))| a != b)
    {
        return Err(FusionError::Misaligned {
            row,
            theta: a.clone(),
            embedding: b.clone(),
        });
    }
    let k = theta.ncols();
    let mut data = Array2::zeros((theta.nrows(), k + emb.dim()));
    data.slice_mut(ndarray::s![.., ..k]).assign(&theta.mapv(|x| gamma * x));
    data.slice_mut(ndarray::s![.., k..]).assign(&emb.vectors);
    Ok(FusedMatrix {
        ids: emb.ids.clone(),
        data,
        gamma,
        n_topics: k,
        embed_dim: emb.dim(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub latent: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent: 32,
            hidden: 128,
            epochs: 200,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Per-column affine map `(x - mean) * scale`.
///
/// `scale` is `weight / std` for each column, zero for constant columns. The
/// topic block carries weight `gamma` and the embedding block weight 1, so
/// `gamma` keeps controlling the balance between the two blocks after
/// standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>, weight: Vec<f64>) -> Self {
        assert_eq!(weight.len(), x.ncols());
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(col, &m)| (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        Self { mean, std, weight }
    }

    /// Plain z-scoring with unit weights.
    pub fn fit_unweighted(x: ArrayView2<f64>) -> Self {
        Self::fit(x, vec![1.0; x.ncols()])
    }

    fn scale(&self, col: usize) -> f64 {
        let s = self.std[col];
        if s > 1e-12 * (1.0 + self.mean[col].abs()) {
            self.weight[col] / s
        } else {
            0.0
        }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (c, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[c], self.scale(c));
            col.mapv_inplace(|v| (v - m) * s);
        }
        out
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// The eight weight/bias tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w4: Array2<f64>,
    pub b4: Array1<f64>,
}

struct Forward {
    z1: Array2<f64>,
    h1: Array2<f64>,
    latent: Array2<f64>,
    z3: Array2<f64>,
    h3: Array2<f64>,
    output: Array2<f64>,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_mask(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

impl Weights {
    pub fn zeros(input: usize, hidden: usize, latent: usize) -> Self {
        Self {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, latent)),
            b2: Array1::zeros(latent),
            w3: Array2::zeros((latent, hidden)),
            b3: Array1::zeros(hidden),
            w4: Array2::zeros((hidden, input)),
            b4: Array1::zeros(input),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(input: usize, hidden: usize, latent: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("valid bounds");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let w1 = init(input, hidden);
        let w2 = init(hidden, latent);
        let w3 = init(latent, hidden);
        let w4 = init(hidden, input);
        Self {
            w1,
            w2,
            w3,
            w4,
            ..Self::zeros(input, hidden, latent)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Forward {
        let z1 = x.dot(&self.w1) + &self.b1;
        let h1 = relu(&z1);
        let latent = h1.dot(&self.w2) + &self.b2;
        let z3 = latent.dot(&self.w3) + &self.b3;
        let h3 = relu(&z3);
        let output = h3.dot(&self.w4) + &self.b4;
        Forward {
            z1,
            h1,
            latent,
            z3,
            h3,
            output,
        }
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let h1 = relu(&(x.dot(&self.w1) + &self.b1));
        h1.dot(&self.w2) + &self.b2
    }

    /// Mean squared reconstruction error over all entries of `x`.
    pub fn loss(&self, x: ArrayView2<f64>) -> f64 {
        let f = self.forward(x);
        mse(&f.output, x)
    }

    /// Loss and its analytic gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>) -> (f64, Weights) {
        let f = self.forward(x);
        let loss = mse(&f.output, x);
        let scale = 2.0 / (x.len() as f64);
        let d_out = (&f.output - &x) * scale;
        let gw4 = f.h3.t().dot(&d_out);
        let gb4 = d_out.sum_axis(Axis(0));
        let mut d_z3 = d_out.dot(&self.w4.t());
        relu_mask(&mut d_z3, &f.z3);
        let gw3 = f.latent.t().dot(&d_z3);
        let gb3 = d_z3.sum_axis(Axis(0));
        let d_latent = d_z3.dot(&self.w3.t());
        let gw2 = f.h1.t().dot(&d_latent);
        let gb2 = d_latent.sum_axis(Axis(0));
        let mut d_z1 = d_latent.dot(&self.w2.t());
        relu_mask(&mut d_z1, &f.z1);
        let gw1 = x.t().dot(&d_z1);
        let gb1 = d_z1.sum_axis(Axis(0));
        let grad = Weights {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
            w3: gw3,
            b3: gb3,
            w4: gw4,
            b4: gb4,
        };
        (loss, grad)
    }

    fn tensors(&self) -> [&[f64]; 8] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
            self.w4.as_slice().expect("standard layout"),
            self.b4.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
            self.w4.as_slice_mut().expect("standard layout"),
            self.b4.as_slice_mut().expect("standard layout"),
        ]
    }

    /// All parameters in a fixed order (w1, b1, w2, b2, w3, b3, w4, b4;
    /// row-major within each tensor).
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Inverse of [`Weights::flatten`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn mse(output: &Array2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = target.len() as f64;
    output
        .iter()
        .zip(target.iter())
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub weights: Weights,
    pub standardizer: Standardizer,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedAutoencoder {
    pub params: AutoencoderParams,
    /// Encoded training rows.
    pub latent: Array2<f64>,
    /// Loss at initialization followed by the loss after each epoch.
    pub losses: Vec<f64>,
}

impl TrainedAutoencoder {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

/// Standardizer weights for a fused matrix: `gamma` on the topic block.
pub fn block_weights(x: &FusedMatrix) -> Vec<f64> {
    let mut w = vec![1.0; x.width()];
    w[..x.n_topics].iter_mut().for_each(|v| *v = x.gamma);
    w
}

pub fn train_autoencoder(x: &FusedMatrix, config: &AutoencoderConfig) -> Result<TrainedAutoencoder, FusionError> {
    let standardizer = Standardizer::fit(x.data.view(), block_weights(x));
    train_standardized(x.data.view(), standardizer, config)
}

/// Trains on `raw` after applying `standardizer`.
pub fn train_standardized(
    raw: ArrayView2<f64>,
    standardizer: Standardizer,
    config: &AutoencoderConfig,
) -> Result<TrainedAutoencoder, FusionError> {
    let (n, width) = raw.dim();
    if n < 2 {
        return Err(FusionError::TooFewRows(n));
    }
    if config.latent >= width {
        return Err(FusionError::LatentTooLarge {
            latent: config.latent,
            input: width,
        });
    }
    if config.latent == 0 || config.hidden == 0 {
        return Err(FusionError::InvalidConfig("latent and hidden sizes must be >= 1".into()));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) || !(0.0..1.0).contains(&config.momentum) {
        return Err(FusionError::InvalidConfig(
            "learning_rate must be > 0 and momentum in [0, 1)".into(),
        ));
    }
    let x = standardizer.transform(raw);
    let mut weights = Weights::random(width, config.hidden, config.latent, config.seed);
    let mut velocity = vec![0.0; weights.n_params()];
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = weights.loss_and_gradient(x.view());
        if !loss.is_finite() {
            return Err(FusionError::Diverged { epoch });
        }
        losses.push(loss);
        let mut flat = weights.flatten();
        for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(grad.flatten()) {
            *v = config.momentum * *v - config.learning_rate * g;
            *p += *v;
        }
        weights.set_flat(&flat);
    }
    let final_loss = weights.loss(x.view());
    if !final_loss.is_finite() || !weights.all_finite() {
        return Err(FusionError::Diverged { epoch: config.epochs });
    }
    losses.push(final_loss);
    let latent = weights.encode(x.view());
    Ok(TrainedAutoencoder {
        params: AutoencoderParams {
            weights,
            standardizer,
            seed: config.seed,
        },
        latent,
        losses,
    })
}

/// Standardizes `x` with the training statistics and runs the encoder.
pub fn encode(params: &AutoencoderParams, x: ArrayView2<f64>) -> Result<Array2<f64>, FusionError> {
    let expected = params.weights.input_dim();
    if x.ncols() != expected || params.standardizer.width() != expected {
        return Err(FusionError::WidthMismatch {
            expected,
            found: x.ncols(),
        });
    }
    Ok(params.weights.encode(params.standardizer.transform(x).view()))
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    input: usize,
    hidden: usize,
    latent: usize,
    seed: u64,
    standardizer: Standardizer,
    tensors: Vec<(String, TensorJson)>,
}

impl AutoencoderParams {
    pub fn to_json(&self) -> Result<String, FusionError> {
        let w = &self.weights;
        let names = ["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"];
        let shapes: [Vec<usize>; 8] = [
            w.w1.shape().to_vec(),
            w.b1.shape().to_vec(),
            w.w2.shape().to_vec(),
            w.b2.shape().to_vec(),
            w.w3.shape().to_vec(),
            w.b3.shape().to_vec(),
            w.w4.shape().to_vec(),
            w.b4.shape().to_vec(),
        ];
        let tensors = names
            .iter()
            .zip(shapes)
            .zip(w.tensors())
            .map(|((name, shape), values)| {
                (
                    name.to_string(),
                    TensorJson {
                        shape,
                        values: values.to_vec(),
                    },
                )
            })
            .collect();
        let doc = ParamsJson {
            input: w.input_dim(),
            hidden: w.hidden_dim(),
            latent: w.latent_dim(),
            seed: self.seed,
            standardizer: self.standardizer.clone(),
            tensors,
        };
        Ok(serde_json::to_string(&doc)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self, FusionError> {
        let doc: ParamsJson = serde_json::from_str(text)?;
        let mut weights = Weights::zeros(doc.input, doc.hidden, doc.latent);
        let expected = weights.n_params();
        let flat: Vec<f64> = doc.tensors.into_iter().flat_map(|(_, t)| t.values).collect();
        if flat.len() != expected {
            return Err(FusionError::InvalidConfig(format!(
                "parameter file has {} values, expected {expected}",
                flat.len()
            )));
        }
        weights.set_flat(&flat);
        Ok(Self {
            weights,
            standardizer: doc.standardizer,
            seed: doc.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
