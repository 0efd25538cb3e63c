//! Planted-topic synthetic corpora with known labels, mixtures and
//! topic-term distributions.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Document, YEAR_MAX, YEAR_MIN};
use crate::preprocess::CleanConfig;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid planted spec: {0}")]
    InvalidSpec(String),
    #[error("vocabulary exhausted: {vocab_per_topic} terms per topic cannot hold {shared} shared terms plus at least as many own terms")]
    VocabularyExhausted { vocab_per_topic: usize, shared: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n_topics: usize,
    pub n_docs: usize,
    pub doc_length: usize,
    pub vocab_per_topic: usize,
    pub overlap_fraction: f64,
    pub year_range: (i32, i32),
    pub mixing_concentration: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_topics: 8,
            n_docs: 200,
            doc_length: 60,
            vocab_per_topic: 40,
            overlap_fraction: 0.2,
            year_range: (2004, 2021),
            mixing_concentration: 0.1,
            seed: 42,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_topics < 2 {
            return bad("n_topics must be >= 2");
        }
        if self.n_docs == 0 || self.doc_length == 0 || self.vocab_per_topic == 0 {
            return bad("n_docs, doc_length and vocab_per_topic must be positive");
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return bad("overlap_fraction must lie in [0, 1)");
        }
        if !(self.mixing_concentration > 0.0 && self.mixing_concentration.is_finite()) {
            return bad("mixing_concentration must be positive");
        }
        let (lo, hi) = self.year_range;
        if lo > hi || lo < YEAR_MIN || hi > YEAR_MAX {
            return bad("year_range must be ordered and within the corpus year bounds");
        }
        Ok(())
    }

    fn shared_per_topic(&self) -> usize {
        (self.overlap_fraction * self.vocab_per_topic as f64).round() as usize
    }
}

/// Generated corpus plus its ground truth. `true_phi` columns follow `vocab`.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub corpus: Corpus,
    pub true_labels: Vec<usize>,
    pub true_theta: Array2<f64>,
    pub true_phi: Array2<f64>,
    pub vocab: Vec<String>,
    pub topic_vocab: Vec<Vec<usize>>,
    pub spec: PlantedSpec,
}

#[derive(Serialize)]
struct Truth<'a> {
    spec: &'a PlantedSpec,
    labels: &'a [usize],
    theta: Vec<Vec<f64>>,
    vocab: &'a [String],
    phi: Vec<Vec<f64>>,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl PlantedCorpus {
    pub fn truth_json(&self) -> Result<String, SynthError> {
        let truth = Truth {
            spec: &self.spec,
            labels: &self.true_labels,
            theta: rows(&self.true_theta),
            vocab: &self.vocab,
            phi: rows(&self.true_phi),
        };
        Ok(serde_json::to_string_pretty(&truth)? + "\n")
    }

    /// Writes `corpus.jsonl` and `truth.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.corpus.write_jsonl(&mut buf)?;
        fs::write(dir.join("corpus.jsonl"), buf)?;
        fs::write(dir.join("truth.json"), self.truth_json()?)?;
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic consonant-vowel pseudo-words that survive cleaning intact.
fn pseudo_words(n: usize) -> Vec<String> {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let space = syllables.pow(3);
    let clean = CleanConfig::default();
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    while out.len() < n {
        let mut idx = (i * 7919 + 13) % space;
        i += 1;
        let mut w = String::with_capacity(6);
        for _ in 0..3 {
            let s = idx % syllables;
            idx /= syllables;
            w.push(CONSONANTS[s / VOWELS.len()] as char);
            w.push(VOWELS[s % VOWELS.len()] as char);
        }
        if !clean.stoplist.contains(&w) && !clean.exclusion_list.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|v| v / sum).collect()
    } else {
        let mut one_hot = vec![0.0; k];
        one_hot[rng.random_range(0..k)] = 1.0;
        one_hot
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Each topic owns `vocab_per_topic - shared` terms and borrows `shared`
/// terms from the next topic's own block (cyclically). Within a topic,
/// term probabilities are uniform.
pub fn generate_planted(spec: &PlantedSpec) -> Result<PlantedCorpus, SynthError> {
    spec.validate()?;
    let k = spec.n_topics;
    let shared = spec.shared_per_topic();
    let own = spec.vocab_per_topic.saturating_sub(shared);
    if own == 0 || own < shared {
        return Err(SynthError::VocabularyExhausted {
            vocab_per_topic: spec.vocab_per_topic,
            shared,
        });
    }
    let vocab = pseudo_words(k * own);
    let topic_vocab: Vec<Vec<usize>> = (0..k)
        .map(|t| {
            let next = (t + 1) % k;
            (t * own..(t + 1) * own)
                .chain(next * own..next * own + shared)
                .collect()
        })
        .collect();
    let mut true_phi = Array2::<f64>::zeros((k, vocab.len()));
    for (t, terms) in topic_vocab.iter().enumerate() {
        for &v in terms {
            true_phi[[t, v]] = 1.0 / terms.len() as f64;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut true_theta = Array2::<f64>::zeros((spec.n_docs, k));
    let mut true_labels = Vec::with_capacity(spec.n_docs);
    let mut documents = Vec::with_capacity(spec.n_docs);
    let width = spec.n_docs.to_string().len().max(4);
    for d in 0..spec.n_docs {
        let theta = dirichlet(&mut rng, k, spec.mixing_concentration);
        let label = argmax(&theta);
        let mut cumulative = Vec::with_capacity(k);
        let mut acc = 0.0;
        for &p in &theta {
            acc += p;
            cumulative.push(acc);
        }
        let tokens: Vec<&str> = (0..spec.doc_length)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let z = cumulative.iter().position(|&c| u < c).unwrap_or(k - 1);
                let terms = &topic_vocab[z];
                vocab[terms[rng.random_range(0..terms.len())]].as_str()
            })
            .collect();
        let year = rng.random_range(spec.year_range.0..=spec.year_range.1);
        for (t, &p) in theta.iter().enumerate() {
            true_theta[[d, t]] = p;
        }
        true_labels.push(label);
        documents.push(Document {
            id: format!("doc{:0width$}", d + 1),
            title: format!("Synthetic document {}", d + 1),
            abstract_text: tokens.join(" "),
            year,
        });
    }
    let corpus = Corpus::new(documents, format!("planted:seed={}", spec.seed))?;
    Ok(PlantedCorpus {
        corpus,
        true_labels,
        true_theta,
        true_phi,
        vocab,
        topic_vocab,
        spec: spec.clone(),
    })
}
