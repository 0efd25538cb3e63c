//! Descriptive outputs: topic shares, distinctive terms per topic, topic
//! evolution over years and the exported report bundle.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterError, MethodComparison};
use crate::hashing::sha256_hex;
use crate::preprocess::CleanDoc;
use crate::projection::{Projection2D, ProjectionError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no documents to report on")]
    Empty,
    #[error("label {label} at position {index} is outside [0, {k})")]
    LabelOutOfRange { index: usize, label: usize, k: usize },
    #[error("{what} has {found} entries, expected {expected}")]
    Length { what: &'static str, expected: usize, found: usize },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

fn check_labels(labels: &[usize], k: usize) -> Result<(), ReportError> {
    match labels.iter().enumerate().find(|(_, &l)| l >= k) {
        Some((index, &label)) => Err(ReportError::LabelOutOfRange { index, label, k }),
        None => Ok(()),
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), ReportError> {
    if expected == found {
        Ok(())
    } else {
        Err(ReportError::Length { what, expected, found })
    }
}

/// Percentage of documents per topic, zero for empty topics.
pub fn topic_shares(labels: &[usize], k: usize) -> Result<Vec<f64>, ReportError> {
    if labels.is_empty() {
        return Err(ReportError::Empty);
    }
    check_labels(labels, k)?;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|c| 100.0 * c as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermScoring {
    /// `tf_t(term) * ln(1 + k / df_topics(term))`.
    #[default]
    Distinctive,
    RawFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub term: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTerms {
    pub topic: usize,
    pub empty: bool,
    pub terms: Vec<WeightedTerm>,
}

/// Ranks each topic's terms by `scoring`, highest first, ties broken
/// lexicographically. `tf_t` counts occurrences within the topic's
/// documents; `df_topics` counts the topics in which the term occurs.
pub fn topic_top_terms(
    docs: &[CleanDoc],
    labels: &[usize],
    k: usize,
    k_terms: usize,
    scoring: TermScoring,
) -> Result<Vec<TopicTerms>, ReportError> {
    check_len("labels", docs.len(), labels.len())?;
    check_labels(labels, k)?;
    let mut tf: Vec<HashMap<&str, usize>> = vec![HashMap::new(); k];
    for (doc, &label) in docs.iter().zip(labels) {
        for term in &doc.terms {
            *tf[label].entry(term.as_str()).or_insert(0) += 1;
        }
    }
    let mut df_topics: HashMap<&str, usize> = HashMap::new();
    for counts in &tf {
        for term in counts.keys() {
            *df_topics.entry(term).or_insert(0) += 1;
        }
    }
    Ok(tf
        .iter()
        .enumerate()
        .map(|(topic, counts)| {
            let mut scored: Vec<(&str, f64)> = counts
                .iter()
                .map(|(&term, &c)| {
                    let weight = match scoring {
                        TermScoring::Distinctive => c as f64 * (1.0 + k as f64 / df_topics[term] as f64).ln(),
                        TermScoring::RawFrequency => c as f64,
                    };
                    (term, weight)
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            scored.truncate(k_terms);
            TopicTerms {
                topic,
                empty: counts.is_empty(),
                terms: scored
                    .into_iter()
                    .map(|(term, weight)| WeightedTerm {
                        term: term.to_owned(),
                        weight,
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Year-by-topic table over the contiguous span of observed years.
/// `ratios[y][t]` is the share of topic `t`'s documents published in year
/// `years[y]`; zero for empty topics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evolution {
    pub years: Vec<i32>,
    pub counts: Vec<Vec<usize>>,
    pub ratios: Vec<Vec<f64>>,
}

impl Evolution {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Long format: `year,topic,count,ratio`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), ReportError> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["year", "topic", "count", "ratio"])?;
        for (y, year) in self.years.iter().enumerate() {
            for (t, (count, ratio)) in self.counts[y].iter().zip(&self.ratios[y]).enumerate() {
                wtr.write_record([year.to_string(), t.to_string(), count.to_string(), ratio.to_string()])?;
            }
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn topic_evolution(labels: &[usize], years: &[i32], k: usize) -> Result<Evolution, ReportError> {
    check_len("years", labels.len(), years.len())?;
    check_labels(labels, k)?;
    let (Some(&lo), Some(&hi)) = (years.iter().min(), years.iter().max()) else {
        return Err(ReportError::Empty);
    };
    let span: Vec<i32> = (lo..=hi).collect();
    let mut counts = vec![vec![0usize; k]; span.len()];
    let mut per_topic = vec![0usize; k];
    for (&label, &year) in labels.iter().zip(years) {
        counts[(year - lo) as usize][label] += 1;
        per_topic[label] += 1;
    }
    let ratios = counts
        .iter()
        .map(|row| {
            row.iter()
                .zip(&per_topic)
                .map(|(&c, &total)| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(Evolution {
        years: span,
        counts,
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSummary {
    pub topic: usize,
    pub share: f64,
    pub n_docs: usize,
    pub empty: bool,
    pub top_terms: Vec<WeightedTerm>,
    pub doc_ids: Vec<String>,
}

/// Hard label plus the gap between the nearest and second-nearest centroid
/// distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentAssignment {
    pub id: String,
    pub year: i32,
    pub label: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub k: usize,
    pub scoring: TermScoring,
    pub topics: Vec<TopicSummary>,
    pub documents: Vec<DocumentAssignment>,
    pub evolution: Evolution,
    pub method_comparison: MethodComparison,
    pub config: serde_json::Value,
    #[serde(skip)]
    pub layout: Option<Projection2D>,
}

pub struct ReportInputs<'a> {
    pub ids: &'a [String],
    pub years: &'a [i32],
    pub docs: &'a [CleanDoc],
    pub labels: &'a [usize],
    pub margins: &'a [f64],
    pub k: usize,
    pub k_terms: usize,
    pub scoring: TermScoring,
    pub method_comparison: MethodComparison,
    pub layout: Option<Projection2D>,
    pub config: serde_json::Value,
}

impl TopicReport {
    pub fn build(inputs: ReportInputs<'_>) -> Result<Self, ReportError> {
        let n = inputs.ids.len();
        check_len("years", n, inputs.years.len())?;
        check_len("docs", n, inputs.docs.len())?;
        check_len("labels", n, inputs.labels.len())?;
        check_len("margins", n, inputs.margins.len())?;
        if let Some(layout) = &inputs.layout {
            check_len("layout", n, layout.coords.nrows())?;
        }
        let shares = topic_shares(inputs.labels, inputs.k)?;
        let terms = topic_top_terms(inputs.docs, inputs.labels, inputs.k, inputs.k_terms, inputs.scoring)?;
        let evolution = topic_evolution(inputs.labels, inputs.years, inputs.k)?;
        let mut members = vec![Vec::new(); inputs.k];
        for (id, &label) in inputs.ids.iter().zip(inputs.labels) {
            members[label].push(id.clone());
        }
        let topics = terms
            .into_iter()
            .zip(shares)
            .zip(members)
            .map(|((t, share), doc_ids)| TopicSummary {
                topic: t.topic,
                share,
                n_docs: doc_ids.len(),
                empty: t.empty,
                top_terms: t.terms,
                doc_ids,
            })
            .collect();
        let documents = (0..n)
            .map(|i| DocumentAssignment {
                id: inputs.ids[i].clone(),
                year: inputs.years[i],
                label: inputs.labels[i],
                margin: inputs.margins[i],
            })
            .collect();
        Ok(Self {
            k: inputs.k,
            scoring: inputs.scoring,
            topics,
            documents,
            evolution,
            method_comparison: inputs.method_comparison,
            config: inputs.config,
            layout: inputs.layout,
        })
    }

    pub fn shares(&self) -> Vec<f64> {
        self.topics.iter().map(|t| t.share).collect()
    }
}

pub const REPORT_FILES: [&str; 7] = [
    "topics.json",
    "shares.csv",
    "evolution.csv",
    "wordcloud.json",
    "comparison.csv",
    "coords.csv",
    "manifest.json",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    /// `None` for the manifest's own entry inside manifest.json.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub files: Vec<FileEntry>,
}

impl ExportManifest {
    pub fn hashes(&self) -> BTreeMap<String, Option<String>> {
        self.files.iter().map(|f| (f.name.clone(), f.sha256.clone())).collect()
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, ReportError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn render(report: &TopicReport) -> Result<Vec<(&'static str, Vec<u8>)>, ReportError> {
    let mut shares = csv::Writer::from_writer(Vec::new());
    shares.write_record(["topic", "share", "n_docs"])?;
    for t in &report.topics {
        shares.write_record([t.topic.to_string(), t.share.to_string(), t.n_docs.to_string()])?;
    }
    let shares = shares.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;

    let mut evolution = Vec::new();
    report.evolution.write_csv(&mut evolution)?;

    let wordcloud: Vec<&Vec<WeightedTerm>> = report.topics.iter().map(|t| &t.top_terms).collect();

    let mut comparison = Vec::new();
    report.method_comparison.write_csv(&mut comparison)?;

    let mut coords = Vec::new();
    match &report.layout {
        Some(layout) => {
            let ids: Vec<String> = report.documents.iter().map(|d| d.id.clone()).collect();
            let labels: Vec<usize> = report.documents.iter().map(|d| d.label).collect();
            layout.write_csv(&mut coords, &ids, Some(&labels))?;
        }
        None => coords.extend_from_slice(b"id,x,y,cluster_label\n"),
    }

    Ok(vec![
        ("topics.json", json_bytes(report)?),
        ("shares.csv", shares),
        ("evolution.csv", evolution),
        ("wordcloud.json", json_bytes(&wordcloud)?),
        ("comparison.csv", comparison),
        ("coords.csv", coords),
    ])
}

/// Writes the six report files plus manifest.json. The returned manifest
/// also carries the hash of manifest.json itself.
pub fn export_report(report: &TopicReport, out_dir: &Path) -> Result<ExportManifest, ReportError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut files = Vec::with_capacity(REPORT_FILES.len());
    for (name, bytes) in render(report)? {
        let path = out_dir.join(name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        files.push(FileEntry {
            name: name.to_owned(),
            bytes: bytes.len() as u64,
            sha256: Some(sha256_hex(&bytes)),
        });
    }
    files.push(FileEntry {
        name: "manifest.json".to_owned(),
        bytes: 0,
        sha256: None,
    });
    let mut manifest = ExportManifest { files };
    let bytes = json_bytes(&manifest)?;
    let path = out_dir.join("manifest.json");
    fs::write(&path, &bytes).map_err(io_err(&path))?;
    let own = manifest.files.last_mut().expect("manifest entry");
    own.bytes = bytes.len() as u64;
    own.sha256 = Some(sha256_hex(&bytes));
    Ok(manifest)
}
