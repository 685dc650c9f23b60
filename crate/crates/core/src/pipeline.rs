//! Staged command pipeline behind the `topictrend` binary.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! <out>/manifest.txt        slice labels and document counts
//! <out>/documents.jsonl     normalized document store
//! <out>/slices/<label>.cache
//! <out>/models/<label>.vec
//! <out>/reports/...         trend tables, plots, neighbor and cluster reports
//! ```
//!
//! Each stage records a config hash. A stage whose recorded hash matches the
//! current configuration is reused instead of recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::cluster::{topic_cluster, ClusterError, KMeansParams};
use crate::corpus::{
    canonical_label, ingest_documents, select_slices, slice_by_period, CorpusError, CorpusFormat, Granularity,
    IngestReport,
};
use crate::embedding::{load_model, nearest_neighbors, save_model, train_slice, EmbeddingError, EmbeddingModel, TrainConfig};
use crate::preprocess::{build_vocabulary, encode, PreprocessError, Preprocessor, SliceCache, StopwordSet};
use crate::trend::{
    compute_trend, export_plot_svg, export_projection_svg, export_table_csv, export_table_json, TrendError, TrendMode,
    TrendQuery, TrendTable,
};

/// Overrides the output directory when set.
pub const OUT_DIR_ENV: &str = "TOPICTREND_OUT";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}:{line}: {reason}")]
    ConfigSyntax { path: PathBuf, line: usize, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no ingest cache in {0}; run `topictrend ingest` first")]
    MissingIngest(PathBuf),
    #[error("every selected slice has an empty vocabulary at min_count={0}")]
    EmptyEverywhere(u64),
    #[error("no trained models in {0}; run `topictrend train` first")]
    NoModels(PathBuf),
    #[error("no model for slice '{label}' (available: {available})")]
    UnknownModel { label: String, available: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Trend(#[from] TrendError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    /// 2 for queries that cannot be answered from the trained models,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Trend(TrendError::DegenerateQuery(_))
            | Self::Embedding(EmbeddingError::UnknownTerm(_))
            | Self::Cluster(ClusterError::Embedding(EmbeddingError::UnknownTerm(_)))
            | Self::Preprocess(PreprocessError::UnusableTerm(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub format: CorpusFormat,
    pub granularity: Granularity,
    /// Replacement stopword list; the bundled English list when `None`.
    pub stopwords: Option<PathBuf>,
    pub lemmatize: bool,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            format: CorpusFormat::Jsonl,
            granularity: Granularity::Month,
            stopwords: None,
            lemmatize: true,
            train: TrainConfig::default(),
            out_dir: PathBuf::from("topictrend_out"),
        }
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

impl PipelineConfig {
    pub const KEYS: &'static [&'static str] = &["corpus", "format", "granularity", "stopwords", "lemmatize", "out_dir"];

    /// Sets one key; unknown pipeline keys fall through to [`TrainConfig::set`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "format" => self.format = value.parse()?,
            "granularity" => self.granularity = value.parse()?,
            "stopwords" => self.stopwords = Some(PathBuf::from(value)),
            "lemmatize" => {
                self.lemmatize =
                    parse_bool(value).ok_or_else(|| PipelineError::Config(format!("lemmatize: '{value}' is not a boolean")))?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Relative
    /// paths are resolved against `base_dir`.
    pub fn apply_text(&mut self, text: &str, origin: &Path, base_dir: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |reason: String| PipelineError::ConfigSyntax {
                path: origin.to_path_buf(),
                line: n + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected 'key = value', got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let value = if matches!(key, "corpus" | "stopwords" | "out_dir") && Path::new(value).is_relative() {
                base_dir.join(value).to_string_lossy().into_owned()
            } else {
                value.to_string()
            };
            self.set(key, &value).map_err(|e| syntax(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::default();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.apply_text(&text, path, base)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(p) = &self.stopwords {
            if !p.is_file() {
                return Err(PipelineError::Config(format!("stopword file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn preprocessor(&self) -> Result<Preprocessor> {
        let stopwords = match &self.stopwords {
            Some(p) => StopwordSet::from_file(p)?,
            None => StopwordSet::english(),
        };
        Ok(Preprocessor {
            stopwords,
            lemmatize: self.lemmatize,
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.txt")
    }

    pub fn documents_path(&self) -> PathBuf {
        self.out_dir.join("documents.jsonl")
    }

    pub fn slice_cache_path(&self, label: &str) -> PathBuf {
        self.out_dir.join("slices").join(format!("{label}.cache"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn model_path(&self, label: &str) -> PathBuf {
        self.models_dir().join(format!("{label}.vec"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    /// Hash of everything that shapes the ingest stage: corpus bytes,
    /// format and granularity. Paths are deliberately excluded so that a
    /// copied corpus hashes identically.
    pub fn ingest_hash(&self) -> Result<String> {
        let corpus = self.corpus_path()?;
        let mut h = Sha256::new();
        h.update(format!("format={}\ngranularity={}\ncorpus=", self.format, self.granularity));
        digest_path(&mut h, corpus)?;
        Ok(short_hex(h))
    }

    /// Hash of the preprocessing stage, chained onto the ingest hash.
    pub fn preprocess_hash(&self, ingest_hash: &str) -> Result<String> {
        let mut h = Sha256::new();
        h.update(format!(
            "ingest={ingest_hash}\nlemmatize={}\nmin_count={}\nstopwords=",
            self.lemmatize, self.train.min_count
        ));
        match &self.stopwords {
            Some(p) => digest_path(&mut h, p)?,
            None => h.update(b"<english>"),
        }
        Ok(short_hex(h))
    }

    /// Hash stamped on models and every report derived from them.
    pub fn config_hash(&self, ingest_hash: &str) -> Result<String> {
        let mut h = Sha256::new();
        h.update(format!("preprocess={}\n", self.preprocess_hash(ingest_hash)?));
        for (k, v) in self.train.key_values() {
            h.update(format!("{k}={v}\n"));
        }
        Ok(short_hex(h))
    }

    fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| PipelineError::Config("corpus path is not set".into()))
    }
}

fn short_hex(h: Sha256) -> String {
    hex::encode(h.finalize())[..16].to_string()
}

/// Feeds a file's bytes, or every file under a directory in path order, to
/// the hasher.
fn digest_path(h: &mut Sha256, path: &Path) -> Result<()> {
    if path.is_dir() {
        for entry in WalkDir::new(path).sort_by_file_name() {
            let entry = entry.map_err(|e| PipelineError::Io {
                path: path.to_path_buf(),
                source: e.into(),
            })?;
            if entry.file_type().is_file() {
                let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
                h.update(rel.to_string_lossy().as_bytes());
                h.update([0u8]);
                h.update(fs::read(entry.path()).map_err(io_err(entry.path()))?);
            }
        }
        Ok(())
    } else {
        h.update(fs::read(path).map_err(io_err(path))?);
        Ok(())
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub cache_hit: bool,
    pub config_hash: String,
    /// Skip counts from parsing; `None` on a cache hit.
    pub report: Option<IngestReport>,
    pub slices: Vec<(String, usize)>,
}

struct Manifest {
    hash: String,
    slices: Vec<(String, usize)>,
}

fn read_manifest(path: &Path) -> Option<Manifest> {
    let text = fs::read_to_string(path).ok()?;
    let mut hash = None;
    let mut slices = Vec::new();
    for line in text.lines() {
        if let Some(h) = line.strip_prefix("# config_hash ") {
            hash = Some(h.trim().to_string());
        } else if let Some((label, rest)) = line.split_once(": ") {
            slices.push((label.to_string(), rest.strip_suffix(" docs")?.parse().ok()?));
        }
    }
    Some(Manifest { hash: hash?, slices })
}

fn render_manifest(hash: &str, slices: &[(String, usize)]) -> String {
    let mut s = format!("# config_hash {hash}\n");
    for (label, n) in slices {
        s.push_str(&format!("{label}: {n} docs\n"));
    }
    s
}

/// Parses the corpus, writes the document store and the slice manifest.
/// An up-to-date manifest short-circuits the whole stage.
pub fn cmd_ingest(cfg: &PipelineConfig) -> Result<IngestSummary> {
    let corpus = cfg.corpus_path()?;
    if !corpus.exists() {
        return Err(PipelineError::Config(format!("corpus {} does not exist", corpus.display())));
    }
    let hash = cfg.ingest_hash()?;
    if let Some(m) = read_manifest(&cfg.manifest_path()) {
        if m.hash == hash && cfg.documents_path().is_file() {
            info!("ingest cache hit ({hash})");
            return Ok(IngestSummary {
                cache_hit: true,
                config_hash: hash,
                report: None,
                slices: m.slices,
            });
        }
    }
    let (store, report) = ingest_documents(corpus, cfg.format)?;
    if report.skipped() > 0 {
        warn!(
            "skipped {} records ({} bad timestamp, {} malformed, {} duplicate id)",
            report.skipped(),
            report.bad_timestamp,
            report.malformed,
            report.duplicate_id
        );
    }
    ensure_dir(&cfg.out_dir)?;
    store.write_jsonl(&cfg.documents_path())?;
    let slices: Vec<(String, usize)> = slice_by_period(&store, cfg.granularity)
        .into_iter()
        .map(|s| (s.label, s.documents.len()))
        .collect();
    let manifest = cfg.manifest_path();
    fs::write(&manifest, render_manifest(&hash, &slices)).map_err(io_err(&manifest))?;
    Ok(IngestSummary {
        cache_hit: false,
        config_hash: hash,
        report: Some(report),
        slices,
    })
}

fn current_ingest_hash(cfg: &PipelineConfig) -> Result<String> {
    match read_manifest(&cfg.manifest_path()) {
        Some(m) if cfg.documents_path().is_file() => Ok(m.hash),
        _ => Err(PipelineError::MissingIngest(cfg.out_dir.clone())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceOutcome {
    Trained,
    /// An existing model with a matching config hash was kept.
    Cached,
    /// Nothing survived the min-count filter.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub config_hash: String,
    pub slices: Vec<(String, SliceOutcome)>,
}

/// Preprocesses and trains one model per selected slice (all slices when
/// `labels` is empty). Slices train in parallel.
pub fn cmd_train(cfg: &PipelineConfig, labels: &[String]) -> Result<TrainSummary> {
    cfg.validate()?;
    let ingest_hash = current_ingest_hash(cfg)?;
    let pre_hash = cfg.preprocess_hash(&ingest_hash)?;
    let hash = cfg.config_hash(&ingest_hash)?;
    let (store, _) = ingest_documents(&cfg.documents_path(), CorpusFormat::Jsonl)?;
    let all = slice_by_period(&store, cfg.granularity);
    let selected = if labels.is_empty() {
        all.iter().collect()
    } else {
        select_slices(&all, labels)?
    };
    let pre = cfg.preprocessor()?;
    ensure_dir(&cfg.out_dir.join("slices"))?;
    ensure_dir(&cfg.models_dir())?;

    let mut jobs = Vec::new();
    let mut outcomes = BTreeMap::new();
    for slice in selected {
        let cache_path = cfg.slice_cache_path(&slice.label);
        let cached = SliceCache::read(&cache_path).ok().filter(|c| c.config_hash == pre_hash);
        let cache = match cached {
            Some(c) => c,
            None => {
                let seqs: Vec<_> = slice.documents.iter().map(|d| pre.process_document(d)).collect();
                match build_vocabulary(&seqs, cfg.train.min_count) {
                    Ok(vocab) => {
                        let documents = seqs.iter().map(|s| encode(s, &vocab)).collect();
                        let c = SliceCache {
                            config_hash: pre_hash.clone(),
                            vocab,
                            documents,
                        };
                        c.write(&cache_path)?;
                        c
                    }
                    Err(PreprocessError::EmptyVocabulary(_)) if slice.documents.is_empty() => {
                        info!("skipping slice {}: no documents", slice.label);
                        outcomes.insert(slice.label.clone(), SliceOutcome::Skipped);
                        continue;
                    }
                    Err(PreprocessError::EmptyVocabulary(n)) => {
                        warn!(
                            "skipping slice {}: no token reaches min_count={n} ({} docs)",
                            slice.label,
                            slice.documents.len()
                        );
                        outcomes.insert(slice.label.clone(), SliceOutcome::Skipped);
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        jobs.push((slice.label.clone(), cache));
    }
    if jobs.is_empty() {
        return Err(PipelineError::EmptyEverywhere(cfg.train.min_count));
    }

    let trained: Vec<(String, SliceOutcome)> = jobs
        .into_par_iter()
        .map(|(label, cache)| -> Result<(String, SliceOutcome)> {
            let path = cfg.model_path(&label);
            if let Ok(existing) = load_model(&path) {
                if existing.config_hash.as_deref() == Some(hash.as_str()) {
                    info!("model {label} is up to date");
                    return Ok((label, SliceOutcome::Cached));
                }
            }
            info!("training {label}: {} tokens, V={}", cache.documents.iter().map(Vec::len).sum::<usize>(), cache.vocab.len());
            let mut model = train_slice(&cache.documents, cache.vocab, &cfg.train, &label)?;
            model.config_hash = Some(hash.clone());
            save_model(&model, &path)?;
            Ok((label, SliceOutcome::Trained))
        })
        .collect::<Result<_>>()?;
    outcomes.extend(trained);
    Ok(TrainSummary {
        config_hash: hash,
        slices: outcomes.into_iter().collect(),
    })
}

/// Labels of the trained models on disk, in chronological order.
pub fn available_models(cfg: &PipelineConfig) -> Vec<String> {
    let mut labels: Vec<String> = fs::read_dir(cfg.models_dir())
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "vec"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    labels.sort();
    labels
}

/// Loads the requested models (every model when `labels` is empty),
/// returning them with their labels in chronological order.
pub fn load_models(cfg: &PipelineConfig, labels: &[String]) -> Result<(Vec<String>, BTreeMap<String, EmbeddingModel>)> {
    let available = available_models(cfg);
    if available.is_empty() {
        return Err(PipelineError::NoModels(cfg.models_dir()));
    }
    let mut chosen: Vec<String> = if labels.is_empty() {
        available.clone()
    } else {
        labels
            .iter()
            .map(|l| {
                canonical_label(l)
                    .filter(|c| available.contains(c))
                    .ok_or_else(|| PipelineError::UnknownModel {
                        label: l.clone(),
                        available: available.join(", "),
                    })
            })
            .collect::<Result<_>>()?
    };
    chosen.sort();
    chosen.dedup();
    let expected = current_ingest_hash(cfg).and_then(|h| cfg.config_hash(&h)).ok();
    let mut models = BTreeMap::new();
    for label in &chosen {
        let model = load_model(&cfg.model_path(label))?;
        if let (Some(want), got) = (&expected, &model.config_hash) {
            if got.as_deref() != Some(want.as_str()) {
                warn!(
                    "model {label} was built with config {} but the current config hashes to {want}",
                    got.as_deref().unwrap_or("<none>")
                );
            }
        }
        models.insert(label.clone(), model);
    }
    Ok((chosen, models))
}

fn load_one(cfg: &PipelineConfig, slice: &str) -> Result<EmbeddingModel> {
    let (_, mut models) = load_models(cfg, std::slice::from_ref(&slice.to_string()))?;
    Ok(models.pop_first().expect("one model requested").1)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

/// Nearest neighbors of `term` in one slice model.
pub fn cmd_neighbors(cfg: &PipelineConfig, slice: &str, term: &str, k: usize) -> Result<serde_json::Value> {
    let model = load_one(cfg, slice)?;
    let term = cfg.preprocessor()?.normalize_term(term)?;
    let neighbors = nearest_neighbors(&model, &term, k)?;
    Ok(json!({
        "slice": model.slice_label,
        "term": term,
        "k": k,
        "neighbors": neighbors
            .iter()
            .map(|(t, c)| json!({ "term": t, "cosine": c }))
            .collect::<Vec<_>>(),
        "config_hash": model.config_hash,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRequest {
    pub slice: String,
    pub term: String,
    pub neighborhood: usize,
    pub k: usize,
    pub seed: u64,
}

/// Topic cluster of `term` with the k-means objective trace of the best
/// restart.
pub fn cmd_cluster(cfg: &PipelineConfig, req: &ClusterRequest) -> Result<serde_json::Value> {
    let model = load_one(cfg, &req.slice)?;
    let term = cfg.preprocessor()?.normalize_term(&req.term)?;
    let params = KMeansParams {
        seed: req.seed,
        ..KMeansParams::default()
    };
    let topic = topic_cluster(&model, &term, req.neighborhood, req.k, &params)?;
    Ok(json!({
        "slice": model.slice_label,
        "cluster": topic,
        "config_hash": model.config_hash,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendRequest {
    pub base: String,
    pub terms: Vec<String>,
    /// Empty means every trained slice.
    pub slices: Vec<String>,
    pub mode: TrendMode,
    pub neighborhood: usize,
    pub cluster_k: usize,
    pub seed: u64,
    /// Destination directory; `<out>/reports` when `None`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendOutputs {
    pub table: TrendTable,
    pub csv: PathBuf,
    pub json: PathBuf,
    /// `None` when fewer than two slices were requested.
    pub svg: Option<PathBuf>,
}

/// Builds the trend table for a base term and writes CSV, JSON and SVG.
pub fn cmd_trend(cfg: &PipelineConfig, req: &TrendRequest) -> Result<TrendOutputs> {
    let pre = cfg.preprocessor()?;
    let base = pre.normalize_term(&req.base)?;
    let terms: Vec<String> = req.terms.iter().map(|t| pre.normalize_term(t)).collect::<std::result::Result<_, _>>()?;
    let (labels, models) = load_models(cfg, &req.slices)?;
    let query = TrendQuery {
        base_term: base.clone(),
        relative_terms: terms,
        slice_labels: labels,
        mode: req.mode,
        neighborhood_size: req.neighborhood,
        cluster_k: req.cluster_k,
        cluster_seed: req.seed,
    };
    let mut table = compute_trend(&models, &query)?;
    table.config_hash = models.values().find_map(|m| m.config_hash.clone());

    let dir = req.out.clone().unwrap_or_else(|| cfg.reports_dir());
    ensure_dir(&dir)?;
    let stem = format!("trend_{base}");
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    export_table_csv(&table, &csv)?;
    export_table_json(&table, &json)?;
    let svg = if table.query.slice_labels.len() >= 2 {
        let p = dir.join(format!("{stem}.svg"));
        export_plot_svg(&table, &p)?;
        Some(p)
    } else {
        warn!("only one slice selected; no plot written");
        None
    };
    Ok(TrendOutputs { table, csv, json, svg })
}

/// 2-D scatter of `terms` in one slice model.
pub fn cmd_project(cfg: &PipelineConfig, slice: &str, terms: &[String], out: Option<PathBuf>) -> Result<PathBuf> {
    let model = load_one(cfg, slice)?;
    let pre = cfg.preprocessor()?;
    let terms: Vec<String> = terms.iter().map(|t| pre.normalize_term(t)).collect::<std::result::Result<_, _>>()?;
    let path = match out {
        Some(p) => p,
        None => {
            ensure_dir(&cfg.reports_dir())?;
            cfg.reports_dir().join(format!("projection_{}.svg", model.slice_label))
        }
    };
    export_projection_svg(&model, &terms, &path)?;
    Ok(path)
}

/// Writes a JSON report under `<out>/reports` and returns its path.
pub fn write_report(cfg: &PipelineConfig, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    let path = cfg.reports_dir().join(name);
    write_json(&path, value)?;
    Ok(path)
}
