//! Contextual topic modeling toolkit.
//!
//! The pipeline cleans a corpus of abstracts, builds TF-IDF, LDA and
//! sentence-embedding representations, fuses the LDA document-topic vectors
//! with the embeddings, compresses the fused vectors with a small autoencoder,
//! clusters the latent space with k-means, validates with silhouette scores,
//! projects documents to 2-D and writes topic reports.
//!
//! Every stage is deterministic given its seed.

pub mod clustering;
pub mod corpus;
pub mod embeddings;
pub mod fusion;
pub mod hashing;
pub mod lda;
pub mod pipeline;
pub mod preprocess;
pub mod projection;
pub mod reporting;
pub mod synth;
pub mod table;
pub mod tfidf;

pub use clustering::{ClusterResult, KMeansConfig, MethodComparison};
pub use corpus::{Corpus, CorpusFormat, CorpusStats, Document};
pub use embeddings::EmbeddingMatrix;
pub use fusion::{AutoencoderConfig, AutoencoderParams, FusedMatrix};
pub use lda::{LdaConfig, LdaModel};
pub use pipeline::{PipelineConfig, Stage};
pub use preprocess::{CleanConfig, CleanDoc};
pub use projection::{Projection2D, ProjectionMethod};
pub use reporting::TopicReport;
pub use synth::{PlantedCorpus, PlantedSpec};
pub use tfidf::{MatrixKind, TermMatrix, Vocabulary};
