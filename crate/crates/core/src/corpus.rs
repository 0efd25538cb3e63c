//! Corpus loading, validation and summary statistics.
//!
//! The canonical on-disk format is JSONL, one object per line with the keys
//! `id`, `title`, `abstract` and `year`. CSV with the header
//! `id,title,abstract,year` is also accepted.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const YEAR_MIN: i32 = 1900;
pub const YEAR_MAX: i32 = 2100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: invalid document: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate document id \"{0}\"")]
    DuplicateId(String),
    #[error("corpus is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guess the format from a file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub year: i32,
}

impl Document {
    fn validate(&self, line: usize) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::Invalid {
                line,
                message: "empty id".into(),
            });
        }
        if self.abstract_text.trim().is_empty() {
            return Err(CorpusError::Invalid {
                line,
                message: format!("document \"{}\" has an empty abstract", self.id),
            });
        }
        if !(YEAR_MIN..=YEAR_MAX).contains(&self.year) {
            return Err(CorpusError::Invalid {
                line,
                message: format!(
                    "document \"{}\" has year {} outside [{YEAR_MIN}, {YEAR_MAX}]",
                    self.id, self.year
                ),
            });
        }
        Ok(())
    }
}

/// An ordered, validated collection of documents. Document order defines
/// the row order of every downstream matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    pub source_note: String,
}

impl Corpus {
    /// Validates every document and the id uniqueness constraint.
    pub fn new(documents: Vec<Document>, source_note: impl Into<String>) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = HashSet::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            doc.validate(i + 1)?;
            if !seen.insert(doc.id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self {
            documents,
            source_note: source_note.into(),
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.id.clone()).collect()
    }

    pub fn years(&self) -> Vec<i32> {
        self.documents.iter().map(|d| d.year).collect()
    }

    /// Writes the canonical JSONL form.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for doc in &self.documents {
            serde_json::to_writer(&mut out, doc)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub year_min: i32,
    pub year_max: i32,
    pub docs_per_year: BTreeMap<i32, usize>,
    pub mean_abstract_tokens: f64,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let note = format!("loaded from {}", path.display());
    match format {
        CorpusFormat::Jsonl => parse_jsonl(BufReader::new(file), note),
        CorpusFormat::Csv => parse_csv(file, note),
    }
}

#[derive(Deserialize)]
struct RawDocument {
    id: Option<String>,
    title: Option<String>,
    #[serde(rename = "abstract")]
    abstract_text: Option<String>,
    year: Option<i64>,
}

impl RawDocument {
    fn into_document(self, line: usize) -> Result<Document, CorpusError> {
        let id = self.id.ok_or(CorpusError::MissingField { line, field: "id" })?;
        let abstract_text = self
            .abstract_text
            .ok_or(CorpusError::MissingField { line, field: "abstract" })?;
        let year = self.year.ok_or(CorpusError::MissingField { line, field: "year" })?;
        let year = i32::try_from(year).map_err(|_| CorpusError::Invalid {
            line,
            message: format!("year {year} out of range"),
        })?;
        Ok(Document {
            id,
            title: self.title.unwrap_or_default(),
            abstract_text,
            year,
        })
    }
}

/// Parses JSONL; blank lines are skipped. Line numbers in errors are 1-based.
pub fn parse_jsonl<R: BufRead>(reader: R, source_note: impl Into<String>) -> Result<Corpus, CorpusError> {
    let mut docs = Vec::new();
    let mut lines_of_docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        docs.push(raw.into_document(line_no)?);
        lines_of_docs.push(line_no);
    }
    finish(docs, &lines_of_docs, source_note.into())
}

pub fn parse_csv<R: Read>(reader: R, source_note: impl Into<String>) -> Result<Corpus, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &'static str| headers.iter().position(|h| h.trim() == name);
    let id_col = column("id").ok_or(CorpusError::MissingField { line: 1, field: "id" })?;
    let abstract_col = column("abstract").ok_or(CorpusError::MissingField { line: 1, field: "abstract" })?;
    let year_col = column("year").ok_or(CorpusError::MissingField { line: 1, field: "year" })?;
    let title_col = column("title");

    let mut docs = Vec::new();
    let mut lines_of_docs = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CorpusError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |col: usize| record.get(col).filter(|s| !s.is_empty());
        let year = match field(year_col) {
            None => None,
            Some(s) => Some(s.trim().parse::<i64>().map_err(|e| CorpusError::Parse {
                line,
                message: format!("year: {e}"),
            })?),
        };
        let raw = RawDocument {
            id: field(id_col).map(str::to_owned),
            title: title_col.and_then(field).map(str::to_owned),
            abstract_text: field(abstract_col).map(str::to_owned),
            year,
        };
        docs.push(raw.into_document(line)?);
        lines_of_docs.push(line);
    }
    finish(docs, &lines_of_docs, source_note.into())
}

fn finish(docs: Vec<Document>, lines: &[usize], note: String) -> Result<Corpus, CorpusError> {
    // Re-run validation with real line numbers before building the corpus.
    for (doc, &line) in docs.iter().zip(lines) {
        doc.validate(line)?;
    }
    Corpus::new(docs, note)
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats, CorpusError> {
    let docs = corpus.documents();
    if docs.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut docs_per_year = BTreeMap::new();
    let mut total_tokens = 0usize;
    for doc in docs {
        *docs_per_year.entry(doc.year).or_insert(0) += 1;
        total_tokens += doc.abstract_text.split_whitespace().count();
    }
    Ok(CorpusStats {
        n_docs: docs.len(),
        year_min: *docs_per_year.keys().next().expect("non-empty"),
        year_max: *docs_per_year.keys().next_back().expect("non-empty"),
        docs_per_year,
        mean_abstract_tokens: total_tokens as f64 / docs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, year: i32) -> Document {
        Document {
            id: id.into(),
            title: String::new(),
            abstract_text: format!("abstract of {id}"),
            year,
        }
    }

    #[test]
    fn jsonl_preserves_order() {
        let text = r#"{"id":"a","title":"A","abstract":"first","year":2004}
{"id":"b","title":"B","abstract":"second","year":2010}
{"id":"c","title":"C","abstract":"third","year":2021}
"#;
        let corpus = parse_jsonl(text.as_bytes(), "t").unwrap();
        assert_eq!(corpus.ids(), vec!["a", "b", "c"]);
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = r#"{"id":"x","abstract":"one","year":2004}
{"id":"x","abstract":"two","year":2005}"#;
        let err = parse_jsonl(text.as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(ref id) if id == "x"));
        assert!(err.to_string().contains("\"x\""));
    }

    #[test]
    fn missing_title_tolerated_missing_abstract_rejected() {
        let ok = parse_jsonl(r#"{"id":"a","abstract":"text","year":2004}"#.as_bytes(), "t").unwrap();
        assert_eq!(ok.documents()[0].title, "");

        let err = parse_jsonl(
            "\n{\"id\":\"a\",\"year\":2004}".as_bytes(),
            "t",
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { line: 2, field: "abstract" }));

        let err = parse_jsonl(r#"{"id":"a","abstract":"x"}"#.as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { field: "year", .. }));
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\"id\":\"a\",\"abstract\":\"x\",\"year\":2004}\n{not json";
        match parse_jsonl(text.as_bytes(), "t").unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violations() {
        let blank = r#"{"id":"a","abstract":"   ","year":2004}"#;
        assert!(matches!(parse_jsonl(blank.as_bytes(), "t"), Err(CorpusError::Invalid { .. })));
        let year = r#"{"id":"a","abstract":"x","year":1800}"#;
        assert!(matches!(parse_jsonl(year.as_bytes(), "t"), Err(CorpusError::Invalid { .. })));
        let empty_id = r#"{"id":"","abstract":"x","year":2000}"#;
        assert!(matches!(parse_jsonl(empty_id.as_bytes(), "t"), Err(CorpusError::Invalid { .. })));
        assert!(matches!(parse_jsonl("".as_bytes(), "t"), Err(CorpusError::Empty)));
    }

    #[test]
    fn csv_with_header() {
        let text = "id,title,abstract,year\na,T,\"hello, world\",2004\nb,,second,2005\n";
        let corpus = parse_csv(text.as_bytes(), "t").unwrap();
        assert_eq!(corpus.ids(), vec!["a", "b"]);
        assert_eq!(corpus.documents()[0].abstract_text, "hello, world");
        assert_eq!(corpus.documents()[1].title, "");

        let missing = "id,title,year\na,T,2004\n";
        assert!(matches!(
            parse_csv(missing.as_bytes(), "t"),
            Err(CorpusError::MissingField { field: "abstract", .. })
        ));
    }

    #[test]
    fn stats_hand_count() {
        let corpus = Corpus::new(vec![doc("a", 2004), doc("b", 2021), doc("c", 2021)], "t").unwrap();
        let stats = corpus_stats(&corpus).unwrap();
        assert_eq!(stats.year_min, 2004);
        assert_eq!(stats.year_max, 2021);
        assert_eq!(stats.docs_per_year, BTreeMap::from([(2004, 1), (2021, 2)]));
        assert_eq!(stats.mean_abstract_tokens, 3.0);

        let single = Corpus::new(vec![doc("a", 2010)], "t").unwrap();
        let s = corpus_stats(&single).unwrap();
        assert_eq!((s.year_min, s.year_max), (2010, 2010));

        let mut docs = Vec::new();
        for year in 2012..=2014 {
            for i in 0..10 {
                docs.push(doc(&format!("{year}-{i}"), year));
            }
        }
        let s = corpus_stats(&Corpus::new(docs, "t").unwrap()).unwrap();
        assert_eq!(s.docs_per_year.values().sum::<usize>(), 30);
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        prop::collection::vec(("[ -~]{1,40}", "[a-zA-Z ,.\"\\\\é]{0,20}", 1900i32..=2100), 1..30).prop_map(
            |rows| {
                let docs = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (abs, title, year))| Document {
                        id: format!("d{i}"),
                        title,
                        abstract_text: format!("x{abs}"),
                        year,
                    })
                    .collect();
                Corpus::new(docs, "prop").unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(corpus in arb_corpus()) {
            let mut buf = Vec::new();
            corpus.write_jsonl(&mut buf).unwrap();
            let back = parse_jsonl(buf.as_slice(), "prop").unwrap();
            prop_assert_eq!(back.documents(), corpus.documents());
        }

        #[test]
        fn docs_per_year_sums_to_n(corpus in arb_corpus()) {
            let stats = corpus_stats(&corpus).unwrap();
            prop_assert_eq!(stats.docs_per_year.values().sum::<usize>(), stats.n_docs);
            prop_assert_eq!(stats.n_docs, corpus.len());
        }
    }
}
