//! Document sentence-embedding matrices.
//!
//! Real transformer embeddings are computed out of process and handed over in
//! the `CTME` binary format (or a JSONL alternative). [`hash_embed`] is a
//! deterministic stand-in used by tests and synthetic runs.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic "CTME" | version u16 = 1 | count u32 | dim u32
//! count x ( id_len u16 | id bytes (UTF-8) | dim x f32 )
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::hashing::fnv1a64;
use crate::preprocess::{clean_text, remove_stop_and_excluded, CleanConfig};

pub const MAGIC: &[u8; 4] = b"CTME";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a CTME embedding file (bad magic)")]
    BadMagic,
    #[error("unsupported CTME version {0}")]
    UnsupportedVersion(u16),
    #[error("embedding file is truncated: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("embedding dimension must be >= 1")]
    ZeroDim,
    #[error("record \"{id}\": expected {expected} values, found {found}")]
    DimMismatch { id: String, expected: usize, found: usize },
    #[error("record {index}: id is not valid UTF-8")]
    InvalidId { index: usize },
    #[error("record \"{0}\" has non-finite values")]
    NonFinite(String),
    #[error("duplicate embedding id \"{0}\"")]
    DuplicateId(String),
    #[error("no embedding for corpus document \"{0}\"")]
    MissingId(String),
    #[error("embedding id \"{0}\" is not in the corpus")]
    UnknownId(String),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("id \"{0}\" does not fit the u16 length prefix")]
    IdTooLong(String),
}

/// Dense document embeddings, row-aligned with a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub vectors: Array2<f64>,
    pub provider_tag: String,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Canonical binary encoding. Values are stored as f32.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<(), EmbeddingError> {
        let io = |source| EmbeddingError::Io {
            path: "<writer>".into(),
            source,
        };
        let mut buf = Vec::with_capacity(14 + self.len() * (2 + 16 + 4 * self.dim()));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for (id, row) in self.ids.iter().zip(self.vectors.rows()) {
            let len = u16::try_from(id.len()).map_err(|_| EmbeddingError::IdTooLong(id.clone()))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for &v in row {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.write_all(&buf).map_err(io)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, row) in self.ids.iter().zip(self.vectors.rows()) {
            let rec = JsonRecord {
                id: id.clone(),
                vector: row.to_vec(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf)?;
        fs::write(path, buf).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    vector: Vec<f64>,
}

/// Records in file order, before alignment to a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbeddings {
    pub dim: usize,
    pub records: Vec<(String, Vec<f64>)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EmbeddingError> {
        if self.remaining() < n {
            return Err(EmbeddingError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u16(&mut self, what: &str) -> Result<u16, EmbeddingError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, EmbeddingError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_binary(bytes: &[u8]) -> Result<RawEmbeddings, EmbeddingError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(EmbeddingError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(EmbeddingError::UnsupportedVersion(version));
    }
    let count = cur.u32("count")? as usize;
    let dim = cur.u32("dim")? as usize;
    if dim == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let id_len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| EmbeddingError::InvalidId { index })?
            .to_owned();
        let need = 4 * dim;
        // A short final record means the row has fewer values than the header.
        if cur.remaining() < need && index + 1 == count && cur.remaining().is_multiple_of(4) {
            return Err(EmbeddingError::DimMismatch {
                id,
                expected: dim,
                found: cur.remaining() / 4,
            });
        }
        let raw = cur.take(need, "vector")?;
        let vector: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(id));
        }
        records.push((id, vector));
    }
    if cur.remaining() != 0 {
        return Err(EmbeddingError::TrailingBytes(cur.remaining()));
    }
    Ok(RawEmbeddings { dim, records })
}

/// JSONL records `{"id": ..., "vector": [...]}`; the first line fixes `dim`.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<RawEmbeddings, EmbeddingError> {
    let mut dim = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EmbeddingError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| EmbeddingError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(rec.vector.len());
        if expected == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        if rec.vector.len() != expected {
            return Err(EmbeddingError::DimMismatch {
                id: rec.id,
                expected,
                found: rec.vector.len(),
            });
        }
        if rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(rec.id));
        }
        records.push((rec.id, rec.vector));
    }
    Ok(RawEmbeddings {
        dim: dim.unwrap_or(0),
        records,
    })
}

/// Reorders raw records into corpus order, checking that ids match exactly.
pub fn align_to_corpus(raw: RawEmbeddings, corpus: &Corpus, provider_tag: impl Into<String>) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(raw.records.len());
    for (i, (id, _)) in raw.records.iter().enumerate() {
        if by_id.insert(id.as_str(), i).is_some() {
            return Err(EmbeddingError::DuplicateId(id.clone()));
        }
    }
    let mut vectors = Array2::zeros((corpus.len(), raw.dim));
    for (row, doc) in corpus.documents().iter().enumerate() {
        let i = by_id
            .remove(doc.id.as_str())
            .ok_or_else(|| EmbeddingError::MissingId(doc.id.clone()))?;
        for (slot, &v) in vectors.row_mut(row).iter_mut().zip(&raw.records[i].1) {
            *slot = v;
        }
    }
    if let Some((id, _)) = raw.records.iter().find(|(id, _)| by_id.contains_key(id.as_str())) {
        return Err(EmbeddingError::UnknownId(id.clone()));
    }
    Ok(EmbeddingMatrix {
        ids: corpus.ids(),
        vectors,
        provider_tag: provider_tag.into(),
    })
}

/// Loads a CTME binary or JSONL embedding file and aligns it to `corpus`.
/// JSONL is recognized by a leading `{`.
pub fn load_embeddings(path: &Path, corpus: &Corpus) -> Result<EmbeddingMatrix, EmbeddingError> {
    let bytes = fs::read(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    let raw = if first == Some(&b'{') {
        parse_jsonl(bytes.as_slice())?
    } else {
        parse_binary(&bytes)?
    };
    let tag = format!(
        "file:{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    );
    align_to_corpus(raw, corpus, tag)
}

fn term_vector(term: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(term.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Deterministic bag-of-words embedding: each document vector is the
/// L2-normalized sum of per-term unit Gaussian vectors keyed by
/// `hash(seed, term)`, over the document's cleaned unigrams (with
/// multiplicity). Uses the default cleaning configuration.
pub fn hash_embed(corpus: &Corpus, dim: usize, seed: u64) -> EmbeddingMatrix {
    hash_embed_with(corpus, &CleanConfig::default(), dim, seed)
}

pub fn hash_embed_with(corpus: &Corpus, clean: &CleanConfig, dim: usize, seed: u64) -> EmbeddingMatrix {
    assert!(dim >= 1, "embedding dimension must be >= 1");
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut vectors = Array2::zeros((corpus.len(), dim));
    for (row, doc) in corpus.documents().iter().enumerate() {
        let tokens = remove_stop_and_excluded(clean_text(&doc.abstract_text, clean), clean);
        if tokens.is_empty() {
            log::warn!("document {} has no terms; using the zero vector", doc.id);
            continue;
        }
        let mut acc = vectors.row_mut(row);
        for token in tokens {
            let tv = cache
                .entry(token)
                .or_insert_with_key(|t| term_vector(t, dim, seed));
            for (a, &x) in acc.iter_mut().zip(tv.iter()) {
                *a += x;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.mapv_inplace(|x| x / norm);
        }
    }
    EmbeddingMatrix {
        ids: corpus.ids(),
        vectors,
        provider_tag: format!("hash:dim={dim}:seed={seed}"),
    }
}
