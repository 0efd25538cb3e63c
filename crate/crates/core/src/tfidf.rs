//! Sparse document-term matrices: raw counts and smoothed, L2-normalized
//! TF-IDF with document-frequency thresholds and a median-score term cut.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::CleanDoc;

#[derive(Debug, Error)]
pub enum TfidfError {
    #[error("every document has an empty term list")]
    AllDocumentsEmpty,
    #[error("all terms were filtered out (max_df={max_df}, min_df={min_df})")]
    AllTermsFiltered { max_df: f64, min_df: f64 },
    #[error("invalid df bounds: need 0 <= min_df < max_df <= 1, got min_df={min_df}, max_df={max_df}")]
    InvalidBounds { min_df: f64, max_df: f64 },
    #[error("expected a {expected:?} matrix, got {found:?}")]
    WrongKind { expected: MatrixKind, found: MatrixKind },
    #[error("matrix market parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Counts,
    Tfidf,
}

/// Ordered term universe. Columns are assigned in lexicographic term order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    doc_freq: Vec<usize>,
}

impl Vocabulary {
    fn new(terms: Vec<String>, doc_freq: Vec<usize>) -> Self {
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { terms, index, doc_freq }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, col: usize) -> &str {
        &self.terms[col]
    }

    pub fn column(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn doc_freq(&self, col: usize) -> usize {
        self.doc_freq[col]
    }
}

type SparseRows = Vec<Vec<(usize, f64)>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TermMatrix {
    n_docs: usize,
    /// Per-document `(column, weight)` pairs sorted by column, no zeros.
    rows: SparseRows,
    vocabulary: Vocabulary,
    kind: MatrixKind,
    /// TF-IDF weights before row normalization, aligned with `rows`.
    prenorm: Option<SparseRows>,
}

impl TermMatrix {
    fn from_rows(rows: SparseRows, terms: Vec<String>, kind: MatrixKind) -> Self {
        let mut doc_freq = vec![0usize; terms.len()];
        for row in &rows {
            for &(col, _) in row {
                doc_freq[col] += 1;
            }
        }
        Self {
            n_docs: rows.len(),
            rows,
            vocabulary: Vocabulary::new(terms, doc_freq),
            kind,
            prenorm: None,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn n_terms(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn row(&self, doc: usize) -> &[(usize, f64)] {
        &self.rows[doc]
    }

    pub fn get(&self, doc: usize, col: usize) -> f64 {
        let row = &self.rows[doc];
        row.binary_search_by_key(&col, |&(c, _)| c)
            .map(|i| row[i].1)
            .unwrap_or(0.0)
    }

    /// Weight by term name; zero when the term is not in the vocabulary.
    pub fn get_term(&self, doc: usize, term: &str) -> f64 {
        self.vocabulary.column(term).map_or(0.0, |c| self.get(doc, c))
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `(row, column, weight)` triples in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, w)| (r, c, w)))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.n_docs, self.n_terms()));
        for (r, c, w) in self.entries() {
            dense[[r, c]] = w;
        }
        dense
    }

    /// Keeps the columns flagged in `keep`, renumbering them in order.
    fn select_columns(&self, keep: &[bool]) -> Self {
        let mut remap = vec![usize::MAX; keep.len()];
        let mut terms = Vec::new();
        for (old, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            remap[old] = terms.len();
            terms.push(self.vocabulary.terms[old].clone());
        }
        let project = |rows: &SparseRows| -> SparseRows {
            rows.iter()
                .map(|row| {
                    row.iter()
                        .filter(|(c, _)| keep[*c])
                        .map(|&(c, w)| (remap[c], w))
                        .collect()
                })
                .collect()
        };
        let mut out = Self::from_rows(project(&self.rows), terms, self.kind);
        out.prenorm = self.prenorm.as_ref().map(project);
        out
    }

    /// Matrix Market coordinate format with 1-based indices. A `% kind:`
    /// comment records whether the weights are counts or TF-IDF.
    pub fn write_matrix_market<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        let kind = match self.kind {
            MatrixKind::Counts => "counts",
            MatrixKind::Tfidf => "tfidf",
        };
        writeln!(out, "% kind: {kind}")?;
        writeln!(out, "{} {} {}", self.n_docs, self.n_terms(), self.nnz())?;
        for (r, c, w) in self.entries() {
            writeln!(out, "{} {} {}", r + 1, c + 1, w)?;
        }
        Ok(())
    }

    /// One term per line; line number (0-based) is the column index.
    pub fn write_vocabulary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for term in self.vocabulary.terms() {
            writeln!(out, "{term}")?;
        }
        Ok(())
    }

    pub fn read_matrix_market<R: BufRead, V: BufRead>(matrix: R, vocab: V) -> Result<Self, TfidfError> {
        let terms: Vec<String> = vocab
            .lines()
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|l| !l.is_empty())
            .collect();
        let mut kind = MatrixKind::Counts;
        let mut shape: Option<(usize, usize)> = None;
        let mut rows: SparseRows = Vec::new();
        for (i, line) in matrix.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let perr = |message: String| TfidfError::Parse { line: line_no, message };
            if let Some(comment) = line.strip_prefix('%') {
                if let Some(k) = comment.trim().strip_prefix("kind:") {
                    kind = match k.trim() {
                        "counts" => MatrixKind::Counts,
                        "tfidf" => MatrixKind::Tfidf,
                        other => return Err(perr(format!("unknown kind {other}"))),
                    };
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 3 {
                return Err(perr(format!("expected 3 fields, got {}", fields.len())));
            }
            match shape {
                None => {
                    let n: usize = fields[0].parse().map_err(|e| perr(format!("{e}")))?;
                    let m: usize = fields[1].parse().map_err(|e| perr(format!("{e}")))?;
                    if m != terms.len() {
                        return Err(perr(format!("{m} columns but {} vocabulary terms", terms.len())));
                    }
                    shape = Some((n, m));
                    rows = vec![Vec::new(); n];
                }
                Some((n, m)) => {
                    let r: usize = fields[0].parse().map_err(|e| perr(format!("{e}")))?;
                    let c: usize = fields[1].parse().map_err(|e| perr(format!("{e}")))?;
                    let w: f64 = fields[2].parse().map_err(|e| perr(format!("{e}")))?;
                    if r == 0 || r > n || c == 0 || c > m {
                        return Err(perr(format!("index ({r}, {c}) out of bounds")));
                    }
                    if w != 0.0 {
                        rows[r - 1].push((c - 1, w));
                    }
                }
            }
        }
        if shape.is_none() {
            return Err(TfidfError::Parse {
                line: 0,
                message: "missing size line".into(),
            });
        }
        for row in &mut rows {
            row.sort_by_key(|&(c, _)| c);
        }
        Ok(Self::from_rows(rows, terms, kind))
    }
}

/// Smoothed inverse document frequency `ln((1 + n) / (1 + df)) + 1`.
pub fn idf(n_docs: usize, doc_freq: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + doc_freq as f64)).ln() + 1.0
}

pub fn count_matrix(docs: &[CleanDoc]) -> Result<TermMatrix, TfidfError> {
    let vocab: BTreeSet<&str> = docs.iter().flat_map(|d| d.terms.iter().map(String::as_str)).collect();
    if vocab.is_empty() {
        return Err(TfidfError::AllDocumentsEmpty);
    }
    let terms: Vec<String> = vocab.into_iter().map(str::to_owned).collect();
    let index: HashMap<&str, usize> = terms.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let rows = docs
        .iter()
        .map(|doc| {
            let mut counts: HashMap<usize, f64> = HashMap::new();
            for term in &doc.terms {
                *counts.entry(index[term.as_str()]).or_insert(0.0) += 1.0;
            }
            let mut row: Vec<(usize, f64)> = counts.into_iter().collect();
            row.sort_by_key(|&(c, _)| c);
            row
        })
        .collect();
    Ok(TermMatrix::from_rows(rows, terms, MatrixKind::Counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfidfConfig {
    pub max_df: f64,
    pub min_df: f64,
    pub median_cut: bool,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        Self {
            max_df: 0.8,
            min_df: 0.11,
            median_cut: true,
        }
    }
}

impl TfidfConfig {
    pub fn validate(&self) -> Result<(), TfidfError> {
        if !(0.0 <= self.min_df && self.min_df < self.max_df && self.max_df <= 1.0) {
            return Err(TfidfError::InvalidBounds {
                min_df: self.min_df,
                max_df: self.max_df,
            });
        }
        Ok(())
    }
}

/// Drops terms whose document-frequency proportion lies outside
/// `[min_df, max_df]`.
pub fn filter_df(counts: &TermMatrix, max_df: f64, min_df: f64) -> Result<TermMatrix, TfidfError> {
    TfidfConfig {
        max_df,
        min_df,
        median_cut: false,
    }
    .validate()?;
    let n = counts.n_docs as f64;
    let keep: Vec<bool> = (0..counts.n_terms())
        .map(|c| {
            let frac = counts.vocabulary.doc_freq(c) as f64 / n;
            frac <= max_df && frac >= min_df
        })
        .collect();
    if !keep.iter().any(|&k| k) {
        return Err(TfidfError::AllTermsFiltered { max_df, min_df });
    }
    Ok(counts.select_columns(&keep))
}

/// df thresholds, then `tf * idf` weighting, then the optional median cut,
/// then L2 row normalization.
pub fn fit_tfidf(counts: &TermMatrix, config: &TfidfConfig) -> Result<TermMatrix, TfidfError> {
    if counts.kind != MatrixKind::Counts {
        return Err(TfidfError::WrongKind {
            expected: MatrixKind::Counts,
            found: counts.kind,
        });
    }
    config.validate()?;
    let filtered = filter_df(counts, config.max_df, config.min_df)?;
    let n = filtered.n_docs;
    let idfs: Vec<f64> = (0..filtered.n_terms())
        .map(|c| idf(n, filtered.vocabulary.doc_freq(c)))
        .collect();
    let weighted: SparseRows = filtered
        .rows
        .iter()
        .map(|row| row.iter().map(|&(c, tf)| (c, tf * idfs[c])).collect())
        .collect();
    let tfidf = TermMatrix {
        rows: weighted.clone(),
        prenorm: Some(weighted),
        kind: MatrixKind::Tfidf,
        ..filtered
    };
    let tfidf = if config.median_cut {
        median_filter(&tfidf)
    } else {
        normalized(tfidf)
    };
    Ok(tfidf)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    }
}

/// Drops every term whose largest pre-normalization weight is strictly below
/// the median of all nonzero pre-normalization weights, then re-normalizes
/// the rows. A matrix without retained pre-normalization weights is filtered
/// on its current weights.
pub fn median_filter(tfidf: &TermMatrix) -> TermMatrix {
    let raw = tfidf.prenorm.as_ref().unwrap_or(&tfidf.rows);
    let mut all: Vec<f64> = raw.iter().flatten().map(|&(_, w)| w).collect();
    if all.is_empty() {
        return normalized(tfidf.clone());
    }
    let cut = median(&mut all);
    let mut term_max = vec![f64::NEG_INFINITY; tfidf.n_terms()];
    for &(c, w) in raw.iter().flatten() {
        term_max[c] = term_max[c].max(w);
    }
    let keep: Vec<bool> = term_max.iter().map(|&m| m >= cut).collect();
    let mut out = tfidf.select_columns(&keep);
    // select_columns carries the pre-normalization weights; restart from them.
    if let Some(pre) = out.prenorm.clone() {
        out.rows = pre;
    }
    normalized(out)
}

fn normalized(mut m: TermMatrix) -> TermMatrix {
    for row in &mut m.rows {
        let norm = row.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in row.iter_mut() {
                *w /= norm;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(v: &[&[&str]]) -> Vec<CleanDoc> {
        v.iter()
            .enumerate()
            .map(|(i, terms)| CleanDoc {
                id: format!("d{i}"),
                terms: terms.iter().map(|s| s.to_string()).collect(),
            })
            .collect()
    }

    fn no_cut(max_df: f64, min_df: f64) -> TfidfConfig {
        TfidfConfig {
            max_df,
            min_df,
            median_cut: false,
        }
    }

    #[test]
    fn counts_hand_example() {
        let m = count_matrix(&docs(&[&["a", "b", "a"], &["b"]])).unwrap();
        assert_eq!(m.kind(), MatrixKind::Counts);
        assert_eq!(m.get_term(0, "a"), 2.0);
        assert_eq!(m.get_term(0, "b"), 1.0);
        assert_eq!(m.get_term(1, "b"), 1.0);
        assert_eq!(m.get_term(1, "a"), 0.0);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.vocabulary().doc_freq(m.vocabulary().column("b").unwrap()), 2);
    }

    #[test]
    fn counts_singleton_and_empty_row() {
        let m = count_matrix(&docs(&[&["x"]])).unwrap();
        assert_eq!((m.n_docs(), m.n_terms()), (1, 1));
        assert_eq!(m.get(0, 0), 1.0);

        let m = count_matrix(&docs(&[&["x"], &[]])).unwrap();
        assert!(m.row(1).is_empty());

        assert!(matches!(count_matrix(&docs(&[&[], &[]])), Err(TfidfError::AllDocumentsEmpty)));
    }

    #[test]
    fn ubiquitous_term_dropped_by_max_df() {
        let m = count_matrix(&docs(&[&["common", "x"], &["common", "y"], &["common", "z"]])).unwrap();
        let t = fit_tfidf(&m, &no_cut(0.8, 0.0)).unwrap();
        assert!(t.vocabulary().column("common").is_none());
        assert_eq!(t.n_terms(), 3);
    }

    #[test]
    fn min_df_threshold_at_full_corpus_size() {
        // 182 documents; "rare" appears in 19 of them (19/182 < 0.11) and
        // "frequent" in 21 (21/182 > 0.11).
        let mut rows: Vec<Vec<&str>> = Vec::new();
        for i in 0..182 {
            let mut r = vec!["filler"];
            if i < 19 {
                r.push("rare");
            }
            if i < 21 {
                r.push("frequent");
            }
            rows.push(r);
        }
        let refs: Vec<&[&str]> = rows.iter().map(Vec::as_slice).collect();
        let m = count_matrix(&docs(&refs)).unwrap();
        let f = filter_df(&m, 0.8, 0.11).unwrap();
        assert!(f.vocabulary().column("rare").is_none());
        assert!(f.vocabulary().column("frequent").is_some());
        assert!(f.vocabulary().column("filler").is_none());
    }

    #[test]
    fn all_filtered_is_error() {
        let m = count_matrix(&docs(&[&["a"], &["a"]])).unwrap();
        assert!(matches!(
            fit_tfidf(&m, &TfidfConfig::default()),
            Err(TfidfError::AllTermsFiltered { .. })
        ));
        assert!(matches!(
            fit_tfidf(&m, &no_cut(0.2, 0.5)),
            Err(TfidfError::InvalidBounds { .. })
        ));
    }

    #[test]
    fn median_filter_hand_example() {
        // Pre-normalization weights {0.1, 0.2, 0.3, 0.4}: the median is 0.25.
        // Term "b" peaks at 0.2 and goes; "a", "c" (0.3), "d" (0.4) stay.
        let m = TermMatrix {
            prenorm: None,
            kind: MatrixKind::Tfidf,
            ..TermMatrix::from_rows(
                vec![vec![(0, 0.1), (1, 0.2)], vec![(0, 0.3), (2, 0.4)]],
                vec!["a".into(), "b".into(), "c".into()],
                MatrixKind::Tfidf,
            )
        };
        let out = median_filter(&m);
        assert_eq!(out.vocabulary().terms(), &["a".to_string(), "c".to_string()]);
        assert!((out.get_term(0, "a") - 1.0).abs() < 1e-12);
        let n = (0.3f64 * 0.3 + 0.4 * 0.4).sqrt();
        assert!((out.get_term(1, "a") - 0.3 / n).abs() < 1e-12);
    }

    #[test]
    fn median_filter_keeps_equal_weights_and_single_term() {
        let m = TermMatrix::from_rows(
            vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 0.5)]],
            vec!["a".into(), "b".into()],
            MatrixKind::Tfidf,
        );
        assert_eq!(median_filter(&m).n_terms(), 2);
        let single = TermMatrix::from_rows(vec![vec![(0, 0.7)]], vec!["a".into()], MatrixKind::Tfidf);
        assert_eq!(median_filter(&single).n_terms(), 1);
    }

    #[test]
    fn matrix_market_round_trip() {
        let m = count_matrix(&docs(&[&["a", "b", "a"], &["b"], &[]])).unwrap();
        let t = fit_tfidf(&m, &no_cut(1.0, 0.0)).unwrap();
        let (mut mm, mut vocab) = (Vec::new(), Vec::new());
        t.write_matrix_market(&mut mm).unwrap();
        t.write_vocabulary(&mut vocab).unwrap();
        let text = String::from_utf8(mm.clone()).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real general\n% kind: tfidf\n3 2 3\n"));
        let back = TermMatrix::read_matrix_market(mm.as_slice(), vocab.as_slice()).unwrap();
        assert_eq!(back.kind(), MatrixKind::Tfidf);
        assert_eq!(back.vocabulary().terms(), t.vocabulary().terms());
        for (a, b) in back.entries().zip(t.entries()) {
            assert_eq!(a, b);
        }
    }

    fn arb_docs() -> impl Strategy<Value = Vec<CleanDoc>> {
        prop::collection::vec(prop::collection::vec(0u8..12, 1..15), 2..20).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, ts)| CleanDoc {
                    id: format!("d{i}"),
                    terms: ts.into_iter().map(|t| format!("t{t}")).collect(),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn idf_strictly_decreasing_in_df(n in 1usize..500, a in 1usize..500, b in 1usize..500) {
            let (a, b) = (a.min(n), b.min(n));
            prop_assume!(a < b);
            prop_assert!(idf(n, a) > idf(n, b));
        }

        #[test]
        fn rows_unit_norm_and_df_within_bounds(d in arb_docs(), min_df in 0.0f64..0.3, cut in any::<bool>()) {
            let counts = count_matrix(&d).unwrap();
            let cfg = TfidfConfig { max_df: 0.9, min_df, median_cut: cut };
            if let Ok(t) = fit_tfidf(&counts, &cfg) {
                let n = t.n_docs() as f64;
                for c in 0..t.n_terms() {
                    let frac = t.vocabulary().doc_freq(c) as f64 / n;
                    prop_assert!(frac >= min_df && frac <= 0.9);
                }
                for r in 0..t.n_docs() {
                    let row = t.row(r);
                    prop_assert!(row.iter().all(|&(_, w)| w > 0.0));
                    if !row.is_empty() {
                        let norm: f64 = row.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                        prop_assert!((norm - 1.0).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn scaling_counts_leaves_rows_unchanged(d in arb_docs(), factor in 2usize..5) {
            let base = count_matrix(&d).unwrap();
            let mut scaled_docs = d.clone();
            let terms = scaled_docs[0].terms.clone();
            for _ in 1..factor {
                scaled_docs[0].terms.extend(terms.iter().cloned());
            }
            let scaled = count_matrix(&scaled_docs).unwrap();
            let cfg = TfidfConfig { max_df: 1.0, min_df: 0.0, median_cut: false };
            let (a, b) = (fit_tfidf(&base, &cfg).unwrap(), fit_tfidf(&scaled, &cfg).unwrap());
            for (&(ca, wa), &(cb, wb)) in a.row(0).iter().zip(b.row(0)) {
                prop_assert_eq!(ca, cb);
                prop_assert!((wa - wb).abs() < 1e-12);
            }
        }
    }
}
