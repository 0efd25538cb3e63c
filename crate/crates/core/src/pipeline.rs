//! Staged pipeline driven by a TOML config. Each stage reads its inputs from
//! upstream artifact directories under `out_dir`, writes its own directory
//! and records content hashes in `out_dir/manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{self, KMeansConfig, MethodComparison};
use crate::corpus::{self, Corpus, CorpusFormat};
use crate::embeddings::{self, EmbeddingMatrix};
use crate::fusion::{self, AutoencoderConfig};
use crate::hashing::{fnv1a64, sha256_hex};
use crate::lda::{self, LdaConfig};
use crate::preprocess::{self, parse_term_list, CleanConfig, CleanDoc};
use crate::projection::{self, NeighborEmbedConfig, Projection2D, ProjectionMethod};
use crate::reporting::{self, ReportInputs, TermScoring, TopicReport};
use crate::table;
use crate::tfidf::{self, TermMatrix, TfidfConfig};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot parse config {path}: {message}")]
    ConfigParse { path: String, message: String },
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("{field}: file not found: {path}")]
    MissingFile { field: String, path: String },
    #[error("stage `{needed_by}` needs the output of `{stage}` ({reason}); run `ctm {stage}` first")]
    MissingUpstream {
        stage: &'static str,
        needed_by: &'static str,
        reason: String,
    },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::ConfigParse { .. } | Self::Config { .. } | Self::MissingFile { .. } => 2,
            _ => 1,
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        field: field.to_owned(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Preprocess,
    Vectorize,
    Lda,
    Embed,
    Fuse,
    Cluster,
    Project,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Preprocess,
        Stage::Vectorize,
        Stage::Lda,
        Stage::Embed,
        Stage::Fuse,
        Stage::Cluster,
        Stage::Project,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::Vectorize => "vectorize",
            Stage::Lda => "lda",
            Stage::Embed => "embed",
            Stage::Fuse => "fuse",
            Stage::Cluster => "cluster",
            Stage::Project => "project",
            Stage::Report => "report",
        }
    }

    /// Direct inputs, checked in this order.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Preprocess => &[Stage::Ingest],
            Stage::Vectorize => &[Stage::Preprocess],
            Stage::Lda => &[Stage::Vectorize, Stage::Ingest],
            Stage::Embed => &[Stage::Ingest],
            Stage::Fuse => &[Stage::Lda, Stage::Embed, Stage::Ingest],
            Stage::Cluster => &[Stage::Fuse, Stage::Vectorize, Stage::Embed, Stage::Ingest],
            Stage::Project => &[Stage::Fuse, Stage::Cluster],
            Stage::Report => &[Stage::Cluster, Stage::Project, Stage::Preprocess, Stage::Ingest],
        }
    }

    /// `seed XOR fnv1a64(stage name)`.
    pub fn seed(self, base: u64) -> u64 {
        base ^ fnv1a64(self.name().as_bytes())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfidfSection {
    pub max_df: f64,
    pub min_df: f64,
    pub median_cut: bool,
}

impl Default for TfidfSection {
    fn default() -> Self {
        let d = TfidfConfig::default();
        Self {
            max_df: d.max_df,
            min_df: d.min_df,
            median_cut: d.median_cut,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    pub k: usize,
    /// Defaults to `50 / k`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for LdaSection {
    fn default() -> Self {
        let d = LdaConfig::default();
        Self {
            k: d.n_topics,
            alpha: None,
            beta: d.beta,
            iterations: d.n_iterations,
            burn_in: d.burn_in,
            thin: d.thin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    #[default]
    Hash,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingsSection {
    pub mode: EmbedMode,
    pub path: Option<PathBuf>,
    pub dim: usize,
    /// Overrides the derived stage seed for the hash embedder.
    pub seed: Option<u64>,
}

impl Default for EmbeddingsSection {
    fn default() -> Self {
        Self {
            mode: EmbedMode::Hash,
            path: None,
            dim: 256,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub gamma: f64,
    pub latent: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        let d = AutoencoderConfig::default();
        Self {
            gamma: 15.0,
            latent: d.latent,
            hidden: d.hidden,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        let d = KMeansConfig::default();
        Self {
            k: d.k,
            restarts: d.restarts,
            max_iters: d.max_iters,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub method: ProjectionMethod,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub epochs: usize,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        let d = NeighborEmbedConfig::default();
        Self {
            method: ProjectionMethod::NeighborEmbed,
            n_neighbors: d.n_neighbors,
            min_dist: d.min_dist,
            epochs: d.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub top_terms: usize,
    pub scoring: TermScoring,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            top_terms: 30,
            scoring: TermScoring::Distinctive,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Relative paths are resolved against `base_dir`, the directory holding the
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub stoplist: Option<PathBuf>,
    #[serde(default)]
    pub exclusions: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub tfidf: TfidfSection,
    #[serde(default)]
    pub lda: LdaSection,
    #[serde(default)]
    pub embeddings: EmbeddingsSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub clustering: ClusteringSection,
    #[serde(default)]
    pub projection: ProjectionSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    /// Defaults for everything except the corpus path.
    pub fn new(corpus: impl Into<PathBuf>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            stoplist: None,
            exclusions: None,
            seed: 0,
            out_dir: default_out_dir(),
            tfidf: TfidfSection::default(),
            lda: LdaSection::default(),
            embeddings: EmbeddingsSection::default(),
            fusion: FusionSection::default(),
            clustering: ClusteringSection::default(),
            projection: ProjectionSection::default(),
            report: ReportSection::default(),
            base_dir: base_dir.into(),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| PipelineError::ConfigParse {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::MissingFile {
            field: "config".into(),
            path: format!("{} ({e})", path.display()),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base).map_err(|e| match e {
            PipelineError::ConfigParse { message, .. } => PipelineError::ConfigParse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_path(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let t = &self.tfidf;
        if !(0.0..=1.0).contains(&t.min_df) {
            return Err(config_err("tfidf.min_df", format!("{} is outside [0, 1]", t.min_df)));
        }
        if !(0.0..=1.0).contains(&t.max_df) {
            return Err(config_err("tfidf.max_df", format!("{} is outside [0, 1]", t.max_df)));
        }
        if t.min_df >= t.max_df {
            return Err(config_err(
                "tfidf.min_df, tfidf.max_df",
                format!("tfidf.min_df ({}) must be below tfidf.max_df ({})", t.min_df, t.max_df),
            ));
        }
        let l = &self.lda;
        if l.k == 0 {
            return Err(config_err("lda.k", "must be >= 1"));
        }
        if let Some(a) = l.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(config_err("lda.alpha", "must be positive"));
            }
        }
        if !(l.beta > 0.0 && l.beta.is_finite()) {
            return Err(config_err("lda.beta", "must be positive"));
        }
        if l.iterations == 0 {
            return Err(config_err("lda.iterations", "must be >= 1"));
        }
        if l.burn_in >= l.iterations {
            return Err(config_err("lda.burn_in", "must be below lda.iterations"));
        }
        if l.thin == 0 {
            return Err(config_err("lda.thin", "must be >= 1"));
        }
        let e = &self.embeddings;
        match e.mode {
            EmbedMode::Hash if e.dim == 0 => return Err(config_err("embeddings.dim", "must be >= 1")),
            EmbedMode::File if e.path.is_none() => {
                return Err(config_err("embeddings.path", "required when embeddings.mode = \"file\""))
            }
            _ => {}
        }
        let f = &self.fusion;
        if !(f.gamma >= 0.0 && f.gamma.is_finite()) {
            return Err(config_err("fusion.gamma", "must be a nonnegative number"));
        }
        if f.latent == 0 || f.hidden == 0 || f.epochs == 0 {
            return Err(config_err("fusion", "latent, hidden and epochs must be >= 1"));
        }
        if e.mode == EmbedMode::Hash && f.latent >= l.k + e.dim {
            return Err(config_err(
                "fusion.latent",
                format!("must be below lda.k + embeddings.dim ({})", l.k + e.dim),
            ));
        }
        if !(f.learning_rate > 0.0 && f.learning_rate.is_finite()) {
            return Err(config_err("fusion.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&f.momentum) {
            return Err(config_err("fusion.momentum", "must lie in [0, 1)"));
        }
        let c = &self.clustering;
        if c.k < 2 {
            return Err(config_err("clustering.k", "must be >= 2"));
        }
        if c.restarts == 0 || c.max_iters == 0 {
            return Err(config_err("clustering", "restarts and max_iters must be >= 1"));
        }
        if c.tol.is_nan() || c.tol < 0.0 {
            return Err(config_err("clustering.tol", "must be nonnegative"));
        }
        let p = &self.projection;
        if p.n_neighbors < 2 {
            return Err(config_err("projection.n_neighbors", "must be >= 2"));
        }
        if !(p.min_dist >= 0.0 && p.min_dist.is_finite()) {
            return Err(config_err("projection.min_dist", "must be nonnegative"));
        }
        if p.epochs == 0 {
            return Err(config_err("projection.epochs", "must be >= 1"));
        }
        if self.report.top_terms == 0 {
            return Err(config_err("report.top_terms", "must be >= 1"));
        }
        let mut files = vec![("corpus", Some(&self.corpus)), ("stoplist", self.stoplist.as_ref())];
        files.push(("exclusions", self.exclusions.as_ref()));
        if e.mode == EmbedMode::File {
            files.push(("embeddings.path", e.path.as_ref()));
        }
        for (field, path) in files {
            if let Some(path) = path {
                let full = self.resolve(path);
                if !full.is_file() {
                    return Err(PipelineError::MissingFile {
                        field: field.to_owned(),
                        path: full.display().to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn clean_config(&self) -> Result<CleanConfig, PipelineError> {
        let mut clean = CleanConfig::default();
        if let Some(p) = &self.stoplist {
            let path = self.resolve(p);
            clean.stoplist = parse_term_list(&fs::read_to_string(&path).map_err(io_err(&path))?);
        }
        if let Some(p) = &self.exclusions {
            let path = self.resolve(p);
            clean.exclusion_list = parse_term_list(&fs::read_to_string(&path).map_err(io_err(&path))?);
        }
        Ok(clean)
    }

    pub fn tfidf_config(&self) -> TfidfConfig {
        TfidfConfig {
            max_df: self.tfidf.max_df,
            min_df: self.tfidf.min_df,
            median_cut: self.tfidf.median_cut,
        }
    }

    pub fn lda_config(&self) -> LdaConfig {
        let base = LdaConfig::new(self.lda.k);
        LdaConfig {
            alpha: self.lda.alpha.unwrap_or(base.alpha),
            beta: self.lda.beta,
            n_iterations: self.lda.iterations,
            burn_in: self.lda.burn_in,
            thin: self.lda.thin,
            seed: Stage::Lda.seed(self.seed),
            ..base
        }
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            latent: self.fusion.latent,
            hidden: self.fusion.hidden,
            epochs: self.fusion.epochs,
            learning_rate: self.fusion.learning_rate,
            momentum: self.fusion.momentum,
            seed: Stage::Fuse.seed(self.seed),
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.clustering.k,
            restarts: self.clustering.restarts,
            max_iters: self.clustering.max_iters,
            tol: self.clustering.tol,
            seed: Stage::Cluster.seed(self.seed),
        }
    }

    pub fn neighbor_config(&self) -> NeighborEmbedConfig {
        NeighborEmbedConfig {
            n_neighbors: self.projection.n_neighbors,
            min_dist: self.projection.min_dist,
            epochs: self.projection.epochs,
            seed: Stage::Project.seed(self.seed),
            ..NeighborEmbedConfig::default()
        }
    }

    /// The config values a stage depends on, as JSON.
    fn stage_settings(&self, stage: Stage) -> serde_json::Value {
        use serde_json::json;
        match stage {
            Stage::Ingest => json!({ "corpus": self.corpus }),
            Stage::Preprocess => json!({ "stoplist": self.stoplist, "exclusions": self.exclusions }),
            Stage::Vectorize => json!(self.tfidf),
            Stage::Lda => json!(self.lda),
            Stage::Embed => json!(self.embeddings),
            Stage::Fuse => json!(self.fusion),
            Stage::Cluster => json!(self.clustering),
            Stage::Project => json!(self.projection),
            Stage::Report => json!(self.report),
        }
    }

    /// Everything except `base_dir`, for the report's config snapshot.
    fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub seed: u64,
    pub config_hash: String,
    /// Upstream stage name to that stage's output digest.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to `out_dir` to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl StageEntry {
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.outputs).expect("map serializes"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub stages: BTreeMap<String, StageEntry>,
}

impl PipelineManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load(out_dir: &Path) -> Result<Self, PipelineError> {
        let path = Self::path(out_dir);
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        let path = Self::path(out_dir);
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(io_err(&path))
    }

    /// Drops entries that recorded a different digest for `stage`, and
    /// everything downstream of them.
    fn invalidate_dependents(&mut self, stage: Stage, digest: &str) {
        let mut stale = vec![(stage.name().to_owned(), digest.to_owned())];
        while let Some((name, digest)) = stale.pop() {
            let dependents: Vec<String> = self
                .stages
                .iter()
                .filter(|(_, e)| e.inputs.get(&name).is_some_and(|d| *d != digest))
                .map(|(n, _)| n.clone())
                .collect();
            for dep in dependents {
                self.stages.remove(&dep);
                stale.push((dep, String::new()));
            }
        }
    }
}

/// Runs every stage in dependency order; equivalent to calling
/// [`run_stage`] for each of [`Stage::ALL`].
pub fn run_all(config: &PipelineConfig) -> Result<PipelineManifest, PipelineError> {
    config.validate()?;
    let mut manifest = PipelineManifest::default();
    for stage in Stage::ALL {
        manifest = run_stage(stage, config)?;
    }
    Ok(manifest)
}

pub fn run_stage(stage: Stage, config: &PipelineConfig) -> Result<PipelineManifest, PipelineError> {
    config.validate()?;
    let out = config.out_path();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut manifest = PipelineManifest::load(&out)?;
    let inputs = check_upstream(stage, &manifest, &out)?;

    let dir = out.join(stage.name());
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    log::info!("running stage {stage}");
    let ctx = Ctx { config, out: &out, dir: &dir, stage };
    let result = match stage {
        Stage::Ingest => ctx.ingest(),
        Stage::Preprocess => ctx.preprocess(),
        Stage::Vectorize => ctx.vectorize(),
        Stage::Lda => ctx.lda(),
        Stage::Embed => ctx.embed(),
        Stage::Fuse => ctx.fuse(),
        Stage::Cluster => ctx.cluster(),
        Stage::Project => ctx.project(),
        Stage::Report => ctx.report(),
    };
    result.map_err(|e| match e {
        StageFailure::Pipeline(p) => p,
        StageFailure::Other(source) => PipelineError::Stage {
            stage: stage.name(),
            source,
        },
    })?;

    let entry = StageEntry {
        seed: stage.seed(config.seed),
        config_hash: sha256_hex(&serde_json::to_vec(&config.stage_settings(stage))?),
        inputs,
        outputs: hash_dir(&dir, stage.name())?,
    };
    let digest = entry.digest();
    manifest.stages.insert(stage.name().to_owned(), entry);
    manifest.invalidate_dependents(stage, &digest);
    manifest.save(&out)?;
    Ok(manifest)
}

fn check_upstream(
    stage: Stage,
    manifest: &PipelineManifest,
    out: &Path,
) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut inputs = BTreeMap::new();
    for &up in stage.upstream() {
        let missing = |reason: String| PipelineError::MissingUpstream {
            stage: up.name(),
            needed_by: stage.name(),
            reason,
        };
        let entry = manifest
            .stages
            .get(up.name())
            .ok_or_else(|| missing("no manifest entry".into()))?;
        for (rel, sha) in &entry.outputs {
            let bytes = fs::read(out.join(rel)).map_err(|_| missing(format!("{rel} is missing")))?;
            if sha256_hex(&bytes) != *sha {
                return Err(missing(format!("{rel} changed since it was written")));
            }
        }
        inputs.insert(up.name().to_owned(), entry.digest());
    }
    Ok(inputs)
}

fn hash_dir(dir: &Path, prefix: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut outputs = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_file() {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            outputs.insert(format!("{prefix}/{name}"), sha256_hex(&bytes));
        }
    }
    Ok(outputs)
}

enum StageFailure {
    Pipeline(PipelineError),
    Other(BoxError),
}

impl<E: std::error::Error + Send + Sync + 'static> From<E> for StageFailure {
    fn from(e: E) -> Self {
        StageFailure::Other(Box::new(e))
    }
}

impl StageFailure {
    fn msg(m: impl Into<String>) -> Self {
        StageFailure::Other(m.into().into())
    }
}

type StageResult<T = ()> = Result<T, StageFailure>;

struct Ctx<'a> {
    config: &'a PipelineConfig,
    out: &'a Path,
    dir: &'a Path,
    stage: Stage,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> StageResult {
    fs::write(path, bytes).map_err(|e| StageFailure::Pipeline(io_err(path)(e)))
}

fn open(path: &Path) -> StageResult<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| StageFailure::Pipeline(io_err(path)(e)))
}

fn read_ids_column<T: FromStr>(path: &Path, column: &str) -> StageResult<(Vec<String>, Vec<T>)>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let idx = rdr
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| StageFailure::msg(format!("{} has no column {column}", path.display())))?;
    let (mut ids, mut values) = (Vec::new(), Vec::new());
    for record in rdr.records() {
        let record = record?;
        ids.push(record[0].to_owned());
        values.push(record[idx].parse::<T>()?);
    }
    Ok((ids, values))
}

impl Ctx<'_> {
    fn artifact(&self, stage: Stage, name: &str) -> PathBuf {
        self.out.join(stage.name()).join(name)
    }

    fn own(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn corpus(&self) -> StageResult<Corpus> {
        Ok(corpus::parse_jsonl(open(&self.artifact(Stage::Ingest, "corpus.jsonl"))?, "ingest")?)
    }

    fn clean_docs(&self) -> StageResult<Vec<CleanDoc>> {
        let text = fs::read_to_string(self.artifact(Stage::Preprocess, "docs.jsonl"))?;
        Ok(text
            .lines()
            .map(serde_json::from_str)
            .collect::<Result<Vec<CleanDoc>, _>>()?)
    }

    fn matrix(&self, name: &str) -> StageResult<TermMatrix> {
        let m = open(&self.artifact(Stage::Vectorize, &format!("{name}.mtx")))?;
        let v = open(&self.artifact(Stage::Vectorize, &format!("{name}.vocab")))?;
        Ok(TermMatrix::read_matrix_market(m, v)?)
    }

    fn embeddings(&self, corpus: &Corpus) -> StageResult<EmbeddingMatrix> {
        let bytes = fs::read(self.artifact(Stage::Embed, "embeddings.ctme"))?;
        let tag = fs::read_to_string(self.artifact(Stage::Embed, "provider.txt"))?;
        let raw = embeddings::parse_binary(&bytes)?;
        Ok(embeddings::align_to_corpus(raw, corpus, tag.trim_end())?)
    }

    fn latent(&self, ids: &[String]) -> StageResult<Array2<f64>> {
        let m = table::read_labeled_matrix(open(&self.artifact(Stage::Fuse, "latent.csv"))?)?;
        if m.ids != ids {
            return Err(StageFailure::msg("latent.csv rows are not aligned with the corpus"));
        }
        Ok(m.values)
    }

    fn labels(&self, ids: &[String]) -> StageResult<Vec<usize>> {
        let (found, labels) = read_ids_column::<usize>(&self.artifact(Stage::Cluster, "labels.csv"), "label")?;
        if found != ids {
            return Err(StageFailure::msg("labels.csv rows are not aligned with the corpus"));
        }
        Ok(labels)
    }

    fn ingest(&self) -> StageResult {
        let path = self.config.resolve(&self.config.corpus);
        let corpus = corpus::load_corpus(&path, CorpusFormat::from_path(&path))?;
        let stats = corpus::corpus_stats(&corpus)?;
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf)?;
        write(&self.own("corpus.jsonl"), buf)?;
        write(&self.own("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
        log::info!("ingested {} documents", corpus.len());
        Ok(())
    }

    fn preprocess(&self) -> StageResult {
        let corpus = self.corpus()?;
        let clean = self.config.clean_config().map_err(StageFailure::Pipeline)?;
        let pre = preprocess::preprocess_corpus(&corpus, &clean);
        for w in &pre.warnings {
            log::warn!("{w}");
        }
        let mut text = String::new();
        for doc in &pre.docs {
            text.push_str(&serde_json::to_string(doc)?);
            text.push('\n');
        }
        write(&self.own("docs.jsonl"), text)
    }

    fn vectorize(&self) -> StageResult {
        let docs = self.clean_docs()?;
        let cfg = self.config.tfidf_config();
        let counts = tfidf::count_matrix(&docs)?;
        let filtered = tfidf::filter_df(&counts, cfg.max_df, cfg.min_df)?;
        let weighted = tfidf::fit_tfidf(&counts, &cfg)?;
        log::info!(
            "vocabulary: {} raw, {} after df thresholds, {} in tf-idf",
            counts.n_terms(),
            filtered.n_terms(),
            weighted.n_terms()
        );
        for (name, m) in [("counts", &filtered), ("tfidf", &weighted)] {
            let (mut mtx, mut vocab) = (Vec::new(), Vec::new());
            m.write_matrix_market(&mut mtx)?;
            m.write_vocabulary(&mut vocab)?;
            write(&self.own(&format!("{name}.mtx")), mtx)?;
            write(&self.own(&format!("{name}.vocab")), vocab)?;
        }
        Ok(())
    }

    fn lda(&self) -> StageResult {
        let counts = self.matrix("counts")?;
        let ids = self.corpus()?.ids();
        let model = lda::fit_lda(&counts, &self.config.lda_config())?;
        if let (Some(first), Some(last)) = (model.log_likelihood.first(), model.log_likelihood.last()) {
            log::info!("lda log-likelihood {:.1} -> {:.1}", first.1, last.1);
        }
        model.write_dir(self.dir, &ids)?;
        Ok(())
    }

    fn embed(&self) -> StageResult {
        let corpus = self.corpus()?;
        let e = &self.config.embeddings;
        let emb = match e.mode {
            EmbedMode::Hash => {
                let clean = self.config.clean_config().map_err(StageFailure::Pipeline)?;
                let seed = e.seed.unwrap_or_else(|| self.stage.seed(self.config.seed));
                embeddings::hash_embed_with(&corpus, &clean, e.dim, seed)
            }
            EmbedMode::File => {
                let path = self.config.resolve(e.path.as_deref().expect("validated"));
                embeddings::load_embeddings(&path, &corpus)?
            }
        };
        let mut buf = Vec::new();
        emb.write_binary(&mut buf)?;
        write(&self.own("embeddings.ctme"), buf)?;
        write(&self.own("provider.txt"), format!("{}\n", emb.provider_tag))
    }

    fn fuse(&self) -> StageResult {
        let corpus = self.corpus()?;
        let ids = corpus.ids();
        let theta = table::read_labeled_matrix(open(&self.artifact(Stage::Lda, "theta.csv"))?)?;
        let emb = self.embeddings(&corpus)?;
        let fused = fusion::fuse(theta.values.view(), &theta.ids, &emb, self.config.fusion.gamma)?;
        let cfg = self.config.autoencoder_config();
        if cfg.latent >= fused.width() {
            return Err(StageFailure::Pipeline(config_err(
                "fusion.latent",
                format!("must be below the fused width {}", fused.width()),
            )));
        }
        let trained = fusion::train_autoencoder(&fused, &cfg)?;
        log::info!(
            "autoencoder loss {:.4} -> {:.4}",
            trained.initial_loss(),
            trained.final_loss()
        );
        let mut latent = Vec::new();
        table::write_labeled_matrix(
            &mut latent,
            "id",
            &table::numbered("z", cfg.latent),
            &ids,
            trained.latent.view(),
        )?;
        write(&self.own("latent.csv"), latent)?;
        write(&self.own("autoencoder.json"), trained.params.to_json()?)?;
        let mut losses = String::from("epoch,loss\n");
        for (i, l) in trained.losses.iter().enumerate() {
            losses.push_str(&format!("{i},{l}\n"));
        }
        write(&self.own("losses.csv"), losses)
    }

    fn cluster(&self) -> StageResult {
        let corpus = self.corpus()?;
        let ids = corpus.ids();
        let latent = self.latent(&ids)?;
        let cfg = self.config.kmeans_config();
        let result = clustering::kmeans(latent.view(), &cfg)?;
        let margins = clustering::assignment_margins(latent.view(), result.centroids.view());
        let weighted = self.matrix("tfidf")?;
        let emb = self.embeddings(&corpus)?;
        let comparison = clustering::compare_methods(&weighted, &emb, latent.view(), &cfg)?;
        for row in &comparison.rows {
            log::info!("silhouette {}: {:.4}", row.method, row.silhouette);
        }
        let mut buf = Vec::new();
        result.write_labels_csv(&mut buf, &ids)?;
        write(&self.own("labels.csv"), buf)?;
        let mut buf = Vec::new();
        result.write_centroids_csv(&mut buf)?;
        write(&self.own("centroids.csv"), buf)?;
        let mut buf = Vec::new();
        comparison.write_csv(&mut buf)?;
        write(&self.own("comparison.csv"), buf)?;
        let mut text = String::from("id,margin\n");
        for (id, m) in ids.iter().zip(&margins) {
            text.push_str(&format!("{id},{m}\n"));
        }
        write(&self.own("margins.csv"), text)
    }

    fn project(&self) -> StageResult {
        let ids = self.corpus()?.ids();
        let latent = self.latent(&ids)?;
        let labels = self.labels(&ids)?;
        let pca = projection::pca_2d(latent.view())?;
        let mut buf = Vec::new();
        pca.write_csv(&mut buf, &ids, Some(&labels))?;
        write(&self.own("pca.csv"), buf)?;
        let layout = match self.config.projection.method {
            ProjectionMethod::Pca => pca,
            ProjectionMethod::NeighborEmbed => {
                let mut cfg = self.config.neighbor_config();
                cfg.n_neighbors = cfg.n_neighbors.min(ids.len().saturating_sub(1));
                projection::neighbor_embed_2d(latent.view(), &cfg)?
            }
        };
        let mut buf = Vec::new();
        layout.write_csv(&mut buf, &ids, Some(&labels))?;
        write(&self.own("coords.csv"), buf)?;
        let meta = serde_json::json!({
            "method": layout.method,
            "params": layout.params,
            "seed": layout.seed,
        });
        write(&self.own("params.json"), serde_json::to_string_pretty(&meta)? + "\n")
    }

    fn report(&self) -> StageResult {
        let corpus = self.corpus()?;
        let ids = corpus.ids();
        let docs = self.clean_docs()?;
        let labels = self.labels(&ids)?;
        let (_, margins) = read_ids_column::<f64>(&self.artifact(Stage::Cluster, "margins.csv"), "margin")?;
        let comparison = MethodComparison::read_csv(open(&self.artifact(Stage::Cluster, "comparison.csv"))?)?;
        let layout = self.layout(&ids)?;
        let report = TopicReport::build(ReportInputs {
            ids: &ids,
            years: &corpus.years(),
            docs: &docs,
            labels: &labels,
            margins: &margins,
            k: self.config.clustering.k,
            k_terms: self.config.report.top_terms,
            scoring: self.config.report.scoring,
            method_comparison: comparison,
            layout: Some(layout),
            config: self.config.snapshot(),
        })?;
        reporting::export_report(&report, self.dir)?;
        Ok(())
    }

    fn layout(&self, ids: &[String]) -> StageResult<Projection2D> {
        let path = self.artifact(Stage::Project, "coords.csv");
        let (found, xs) = read_ids_column::<f64>(&path, "x")?;
        let (_, ys) = read_ids_column::<f64>(&path, "y")?;
        if found != ids {
            return Err(StageFailure::msg("coords.csv rows are not aligned with the corpus"));
        }
        let params: serde_json::Value =
            serde_json::from_reader(open(&self.artifact(Stage::Project, "params.json"))?)?;
        let method: ProjectionMethod = serde_json::from_value(params["method"].clone())?;
        let coords = Array2::from_shape_fn((ids.len(), 2), |(i, j)| if j == 0 { xs[i] } else { ys[i] });
        Ok(Projection2D {
            coords,
            method,
            params: serde_json::from_value(params["params"].clone())?,
            seed: params["seed"].as_u64().unwrap_or_default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_planted, PlantedSpec};

    fn small_config(dir: &Path) -> PipelineConfig {
        let planted = generate_planted(&PlantedSpec {
            n_topics: 3,
            n_docs: 40,
            doc_length: 30,
            vocab_per_topic: 15,
            seed: 3,
            ..PlantedSpec::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        planted.corpus.write_jsonl(&mut buf).unwrap();
        fs::write(dir.join("corpus.jsonl"), buf).unwrap();
        let text = r#"
corpus = "corpus.jsonl"
seed = 7
[lda]
k = 3
iterations = 60
burn_in = 30
[embeddings]
dim = 16
[fusion]
latent = 4
hidden = 8
epochs = 20
[clustering]
k = 3
restarts = 4
[projection]
n_neighbors = 5
epochs = 30
"#;
        PipelineConfig::from_toml_str(text, dir).unwrap()
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = Stage::ALL.iter().map(|s| s.seed(1)).collect();
        assert_eq!(seeds.len(), 9);
    }

    #[test]
    fn defaults_and_unknown_fields() {
        let cfg = PipelineConfig::from_toml_str("corpus = \"c.jsonl\"\n", "/tmp").unwrap();
        assert_eq!(cfg.tfidf.max_df, 0.8);
        assert_eq!(cfg.lda_config().alpha, 50.0 / 8.0);
        assert_eq!(cfg.fusion.gamma, 15.0);
        assert_eq!(cfg.out_path(), PathBuf::from("/tmp/out"));
        let err = PipelineConfig::from_toml_str("corpus = \"c\"\n[tfidf]\nmaxdf = 1\n", "/tmp").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_names_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.tfidf.min_df = 0.9;
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tfidf.min_df") && msg.contains("tfidf.max_df"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        let mut cfg = small_config(dir.path());
        cfg.corpus = PathBuf::from("absent.jsonl");
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("absent.jsonl"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_upstream_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let err = run_stage(Stage::Fuse, &cfg).unwrap_err();
        assert!(matches!(err, PipelineError::MissingUpstream { stage: "lda", .. }), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn full_run_is_reproducible_and_composable() {
        let a = tempfile::tempdir().unwrap();
        let cfg_a = small_config(a.path());
        let all = run_all(&cfg_a).unwrap();
        assert_eq!(all.stages.len(), 9);
        assert!(all.stages.values().all(|e| !e.outputs.is_empty()));

        let b = tempfile::tempdir().unwrap();
        let cfg_b = small_config(b.path());
        let mut staged = PipelineManifest::default();
        for s in Stage::ALL {
            staged = run_stage(s, &cfg_b).unwrap();
        }
        assert_eq!(all, staged);
        assert_eq!(
            fs::read(PipelineManifest::path(&cfg_a.out_path())).unwrap(),
            fs::read(PipelineManifest::path(&cfg_b.out_path())).unwrap()
        );

        let before = fs::read(cfg_a.out_path().join("report/topics.json")).unwrap();
        let again = run_stage(Stage::Report, &cfg_a).unwrap();
        assert_eq!(again, all);
        assert_eq!(before, fs::read(cfg_a.out_path().join("report/topics.json")).unwrap());
    }

    #[test]
    fn tampered_artifact_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        run_stage(Stage::Ingest, &cfg).unwrap();
        fs::write(cfg.out_path().join("ingest/corpus.jsonl"), "{}\n").unwrap();
        let err = run_stage(Stage::Preprocess, &cfg).unwrap_err();
        assert!(err.to_string().contains("changed"), "{err}");
    }

    #[test]
    fn rerun_with_new_seed_invalidates_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        for s in &Stage::ALL[..5] {
            run_stage(*s, &cfg).unwrap();
        }
        run_stage(Stage::Fuse, &cfg).unwrap();
        cfg.seed = 8;
        let m = run_stage(Stage::Lda, &cfg).unwrap();
        assert!(!m.stages.contains_key("fuse"));
        assert!(m.stages.contains_key("embed"));
    }
}
