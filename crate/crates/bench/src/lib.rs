//! Input builders shared by the kernel benchmarks.

use ctm_core::preprocess::preprocess_corpus;
use ctm_core::synth::generate_planted;
use ctm_core::tfidf::{count_matrix, filter_df};
use ctm_core::{CleanConfig, PlantedSpec, TermMatrix};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// df-filtered counts of a planted corpus.
pub fn planted_counts(n_docs: usize, n_topics: usize, seed: u64) -> TermMatrix {
    let spec = PlantedSpec {
        n_docs,
        n_topics,
        seed,
        ..PlantedSpec::default()
    };
    let planted = generate_planted(&spec).expect("planted spec");
    let docs = preprocess_corpus(&planted.corpus, &CleanConfig::default()).docs;
    let counts = count_matrix(&docs).expect("count matrix");
    filter_df(&counts, 0.8, 0.11).expect("df filter")
}

/// `k` separated blobs in `dim` dimensions, `n` rows in total.
pub fn blobs(n: usize, dim: usize, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    Array2::from_shape_fn((n, dim), |(i, j)| centers[i % k][j] + rng.random_range(-1.0..1.0))
}
