//! Abstract cleaning: tokenization, stopword and exclusion-list removal, and
//! unigram + bigram formation.
//!
//! No stemming or lemmatization is applied so that terms stay readable in
//! word clouds.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

/// Bundled English stoplist (version 1).
pub const DEFAULT_STOPLIST: &str = include_str!("../data/stopwords_en.txt");
/// Default exclusion list: the core search keywords.
pub const DEFAULT_EXCLUSIONS: &str = include_str!("../data/exclusion_default.txt");

#[derive(Debug, Error, PartialEq)]
pub enum CleanConfigError {
    #[error("ngram range must satisfy 1 <= min <= max <= 2, got {min}..={max}")]
    NgramRange { min: usize, max: usize },
    #[error("exclusion list entry \"{0}\" is not lowercase")]
    NotLowercase(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanConfig {
    pub stoplist: HashSet<String>,
    /// Unigrams and space-separated bigrams.
    pub exclusion_list: HashSet<String>,
    pub strip_parenthesized: bool,
    pub collapse_repeats: bool,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            stoplist: parse_term_list(DEFAULT_STOPLIST),
            exclusion_list: parse_term_list(DEFAULT_EXCLUSIONS),
            strip_parenthesized: true,
            collapse_repeats: true,
            ngram_min: 1,
            ngram_max: 2,
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<(), CleanConfigError> {
        if !(1 <= self.ngram_min && self.ngram_min <= self.ngram_max && self.ngram_max <= 2) {
            return Err(CleanConfigError::NgramRange {
                min: self.ngram_min,
                max: self.ngram_max,
            });
        }
        if let Some(bad) = self.exclusion_list.iter().find(|t| t.to_lowercase() != **t) {
            return Err(CleanConfigError::NotLowercase(bad.clone()));
        }
        Ok(())
    }
}

/// Parses a term-list file: one term per line, `#` starts a comment,
/// surrounding whitespace is trimmed and terms are lowercased. Internal
/// whitespace runs are collapsed to a single space so bigram entries match.
pub fn parse_term_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or(""))
        .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanDoc {
    pub id: String,
    pub terms: Vec<String>,
}

impl CleanDoc {
    /// Terms without an underscore, i.e. the unigrams.
    pub fn unigrams(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str).filter(|t| !t.contains('_'))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub docs: Vec<CleanDoc>,
    /// Ids of documents whose term list ended up empty.
    pub warnings: Vec<String>,
}

/// Removes parenthesized spans. Nested parentheses are removed up to the
/// close matching the outermost open; an unmatched `(` removes everything to
/// the end of the text. Each removed span is replaced by a single space.
fn strip_parenthesized(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut depth = 0usize;
    for c in raw.chars() {
        match c {
            '(' => {
                if depth == 0 {
                    out.push(' ');
                }
                depth += 1;
            }
            ')' if depth > 0 => depth -= 1,
            _ if depth > 0 => {}
            _ => out.push(c),
        }
    }
    out
}

pub fn clean_text(raw: &str, config: &CleanConfig) -> Vec<String> {
    let stripped;
    let text = if config.strip_parenthesized {
        stripped = strip_parenthesized(raw);
        stripped.as_str()
    } else {
        raw
    };
    let lowered = text.to_lowercase();
    let mut tokens: Vec<String> = Vec::new();
    for token in lowered.split(|c: char| !c.is_alphabetic()).filter(|t| !t.is_empty()) {
        if config.collapse_repeats && tokens.last().is_some_and(|last| last == token) {
            continue;
        }
        tokens.push(token.to_owned());
    }
    tokens
}

pub fn remove_stop_and_excluded(tokens: Vec<String>, config: &CleanConfig) -> Vec<String> {
    tokens
        .into_iter()
        .filter(|t| !config.stoplist.contains(t) && !config.exclusion_list.contains(t))
        .collect()
}

/// All unigrams in order, then all adjacent bigrams joined with `_`.
/// Bigrams whose space-separated form is on the exclusion list are dropped.
pub fn build_ngrams(tokens: &[String], config: &CleanConfig) -> Vec<String> {
    let mut terms = Vec::with_capacity(tokens.len() * 2);
    if config.ngram_min <= 1 {
        terms.extend(tokens.iter().cloned());
    }
    if config.ngram_max >= 2 {
        for pair in tokens.windows(2) {
            let spaced = format!("{} {}", pair[0], pair[1]);
            if !config.exclusion_list.contains(&spaced) {
                terms.push(format!("{}_{}", pair[0], pair[1]));
            }
        }
    }
    terms
}

/// Cleans one abstract into its final term list.
pub fn clean_document(text: &str, config: &CleanConfig) -> Vec<String> {
    let tokens = remove_stop_and_excluded(clean_text(text, config), config);
    build_ngrams(&tokens, config)
}

/// Applies the cleaning pipeline to each abstract (titles are not used).
pub fn preprocess_corpus(corpus: &Corpus, config: &CleanConfig) -> Preprocessed {
    let mut warnings = Vec::new();
    let docs = corpus
        .documents()
        .iter()
        .map(|doc| {
            let terms = clean_document(&doc.abstract_text, config);
            if terms.is_empty() {
                log::warn!("document {} has no terms after cleaning", doc.id);
                warnings.push(doc.id.clone());
            }
            CleanDoc {
                id: doc.id.clone(),
                terms,
            }
        })
        .collect();
    Preprocessed { docs, warnings }
}
