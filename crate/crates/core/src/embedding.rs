//! Per-slice word embeddings trained from scratch with online gradient descent.
//!
//! Two architectures share one training loop: CBOW predicts the center word
//! from the mean of its context vectors, skip-gram predicts each context word
//! from the center vector. The default estimator is negative sampling with a
//! unigram^0.75 noise distribution; `negatives = 0` switches to the exact
//! softmax over the whole vocabulary, which is only practical for small
//! vocabularies and mainly serves as a reference path.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("term '{0}' is not in the vocabulary")]
    UnknownTerm(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed model file {path}, line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("dimension mismatch in {path}: {reason}")]
    DimensionMismatch { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Cbow,
    SkipGram,
}

impl FromStr for Architecture {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cbow" => Ok(Self::Cbow),
            "skipgram" | "skip-gram" | "sg" => Ok(Self::SkipGram),
            other => Err(EmbeddingError::InvalidConfig(format!(
                "unknown architecture '{other}' (expected cbow or skipgram)"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cbow => "cbow",
            Self::SkipGram => "skipgram",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub vector_size: usize,
    pub window: usize,
    pub min_count: u64,
    /// 0 selects exact-softmax training.
    pub negatives: usize,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub workers: usize,
    /// Frequent-word downsampling threshold; 0 disables it.
    pub subsample_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Cbow,
            vector_size: 100,
            window: 5,
            min_count: 10,
            negatives: 5,
            initial_lr: 0.025,
            final_lr: 0.0001,
            epochs: 5,
            seed: 1,
            workers: 1,
            subsample_threshold: 0.0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "architecture",
        "vector_size",
        "window",
        "min_count",
        "negatives",
        "initial_lr",
        "final_lr",
        "epochs",
        "seed",
        "workers",
        "subsample_threshold",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EmbeddingError::InvalidConfig(m.to_string()));
        if self.vector_size < 1 {
            return bad("vector_size must be >= 1");
        }
        if self.window < 1 {
            return bad("window must be >= 1");
        }
        if self.min_count < 1 {
            return bad("min_count must be >= 1");
        }
        if !(self.final_lr > 0.0 && self.initial_lr > self.final_lr) {
            return bad("learning rates must satisfy initial_lr > final_lr > 0");
        }
        if self.workers < 1 {
            return bad("workers must be >= 1");
        }
        if self.subsample_threshold.is_nan() || self.subsample_threshold < 0.0 {
            return bad("subsample_threshold must be >= 0");
        }
        Ok(())
    }

    /// Sets one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| EmbeddingError::InvalidConfig(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "architecture" | "arch" => self.architecture = value.parse()?,
            "vector_size" => self.vector_size = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "min_count" => self.min_count = num(key, value)?,
            "negatives" => self.negatives = num(key, value)?,
            "initial_lr" => self.initial_lr = num(key, value)?,
            "final_lr" => self.final_lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "subsample_threshold" => self.subsample_threshold = num(key, value)?,
            other => {
                return Err(EmbeddingError::InvalidConfig(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("architecture", self.architecture.to_string()),
            ("vector_size", self.vector_size.to_string()),
            ("window", self.window.to_string()),
            ("min_count", self.min_count.to_string()),
            ("negatives", self.negatives.to_string()),
            ("initial_lr", self.initial_lr.to_string()),
            ("final_lr", self.final_lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("subsample_threshold", self.subsample_threshold.to_string()),
        ]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub vocab: Vocabulary,
    /// Word vectors, one row per token id.
    pub input: Matrix,
    /// Prediction weights, one row per token id.
    pub output: Matrix,
    pub config: TrainConfig,
    pub slice_label: String,
    pub config_hash: Option<String>,
}

impl EmbeddingModel {
    pub fn dim(&self) -> usize {
        self.input.cols()
    }

    pub fn vector(&self, term: &str) -> Option<&[f64]> {
        self.vocab.id(term).map(|id| self.input.row(id))
    }

    /// Fresh model with the standard initialization: input rows uniform in
    /// `[-0.5/D, 0.5/D]`, output rows zero.
    pub fn initialize(
        vocab: Vocabulary,
        config: TrainConfig,
        slice_label: &str,
        rng: &mut impl Rng,
    ) -> Self {
        let (v, d) = (vocab.len(), config.vector_size);
        let mut input = Matrix::zeros(v, d);
        let half = 0.5 / d as f64;
        for x in input.data.iter_mut() {
            *x = rng.random_range(-half..half);
        }
        Self {
            vocab,
            input,
            output: Matrix::zeros(v, d),
            config,
            slice_label: slice_label.to_string(),
            config_hash: None,
        }
    }
}

/// One prediction problem: the context predicts the center (CBOW) or the
/// center predicts its single context word (skip-gram).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub center_id: TokenId,
    pub context_ids: Vec<TokenId>,
}

/// Examples at position `t` with an explicit half-width `b`.
pub fn examples_at(
    sequence: &[TokenId],
    t: usize,
    b: usize,
    architecture: Architecture,
) -> Vec<TrainingPair> {
    let lo = t.saturating_sub(b);
    let hi = (t + b).min(sequence.len().saturating_sub(1));
    let context = (lo..=hi).filter(|&p| p != t).map(|p| sequence[p]);
    match architecture {
        Architecture::SkipGram => context
            .map(|c| TrainingPair {
                center_id: sequence[t],
                context_ids: vec![c],
            })
            .collect(),
        Architecture::Cbow => {
            let context_ids: Vec<TokenId> = context.collect();
            if context_ids.is_empty() {
                Vec::new()
            } else {
                vec![TrainingPair {
                    center_id: sequence[t],
                    context_ids,
                }]
            }
        }
    }
}

/// All examples for a sequence, drawing the window half-width uniformly from
/// `1..=window` at each position.
pub fn generate_training_examples(
    sequence: &[TokenId],
    architecture: Architecture,
    window: usize,
    rng: &mut impl Rng,
) -> Vec<TrainingPair> {
    if sequence.len() < 2 || window == 0 {
        return Vec::new();
    }
    (0..sequence.len())
        .flat_map(|t| {
            let b = rng.random_range(1..=window);
            examples_at(sequence, t, b, architecture)
        })
        .collect()
}

/// The hidden vector `h` and the id whose output row is the positive target.
fn hidden(model: &EmbeddingModel, pair: &TrainingPair, architecture: Architecture) -> (Vec<f64>, TokenId) {
    match architecture {
        Architecture::SkipGram => (model.input.row(pair.center_id).to_vec(), pair.context_ids[0]),
        Architecture::Cbow => {
            let mut h = vec![0.0; model.dim()];
            for &c in &pair.context_ids {
                axpy(&mut h, 1.0, model.input.row(c));
            }
            let inv = 1.0 / pair.context_ids.len() as f64;
            h.iter_mut().for_each(|x| *x *= inv);
            (h, pair.center_id)
        }
    }
}

/// Sparse gradient: only the rows an example touches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub input: BTreeMap<TokenId, Vec<f64>>,
    pub output: BTreeMap<TokenId, Vec<f64>>,
}

impl Gradients {
    fn add(map: &mut BTreeMap<TokenId, Vec<f64>>, row: TokenId, scale: f64, x: &[f64]) {
        let entry = map.entry(row).or_insert_with(|| vec![0.0; x.len()]);
        axpy(entry, scale, x);
    }

    fn distribute_hidden(&mut self, pair: &TrainingPair, architecture: Architecture, dh: &[f64]) {
        match architecture {
            Architecture::SkipGram => Self::add(&mut self.input, pair.center_id, 1.0, dh),
            Architecture::Cbow => {
                let inv = 1.0 / pair.context_ids.len() as f64;
                for &c in &pair.context_ids {
                    Self::add(&mut self.input, c, inv, dh);
                }
            }
        }
    }

    /// Plain gradient-descent update `w -= lr * g`.
    pub fn apply(&self, model: &mut EmbeddingModel, lr: f64) {
        for (&r, g) in &self.input {
            axpy(model.input.row_mut(r), -lr, g);
        }
        for (&r, g) in &self.output {
            axpy(model.output.row_mut(r), -lr, g);
        }
    }
}

/// Negative-sampling loss `-log σ(o_pos·h) - Σ log σ(-o_neg·h)` and its
/// gradient with respect to every touched row.
pub fn loss_and_gradients_negative_sampling(
    model: &EmbeddingModel,
    pair: &TrainingPair,
    negative_ids: &[TokenId],
    architecture: Architecture,
) -> (f64, Gradients) {
    let (h, positive) = hidden(model, pair, architecture);
    let mut grads = Gradients::default();
    let mut dh = vec![0.0; h.len()];
    let mut loss = 0.0;
    let targets = std::iter::once((positive, 1.0)).chain(negative_ids.iter().map(|&n| (n, 0.0)));
    for (target, label) in targets {
        let o = model.output.row(target);
        let s = dot(o, &h);
        loss += if label > 0.0 { softplus(-s) } else { softplus(s) };
        let g = sigmoid(s) - label;
        axpy(&mut dh, g, o);
        Gradients::add(&mut grads.output, target, g, &h);
    }
    grads.distribute_hidden(pair, architecture, &dh);
    (loss, grads)
}

/// Exact softmax loss `-log P(target | h)` and its gradient.
pub fn loss_and_gradients_softmax(
    model: &EmbeddingModel,
    pair: &TrainingPair,
    architecture: Architecture,
) -> (f64, Gradients) {
    let (h, target) = hidden(model, pair, architecture);
    let probs = softmax_distribution(model, &h);
    let loss = -probs[target].ln();
    let mut grads = Gradients::default();
    let mut dh = vec![0.0; h.len()];
    for (j, &p) in probs.iter().enumerate() {
        let g = p - if j == target { 1.0 } else { 0.0 };
        axpy(&mut dh, g, model.output.row(j));
        Gradients::add(&mut grads.output, j, g, &h);
    }
    grads.distribute_hidden(pair, architecture, &dh);
    (loss, grads)
}

/// Output distribution `softmax(O h)` with max subtraction.
pub fn softmax_distribution(model: &EmbeddingModel, h: &[f64]) -> Vec<f64> {
    let scores: Vec<f64> = (0..model.output.rows())
        .map(|j| dot(model.output.row(j), h))
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `P(w_j | w_i) = exp(v'_j · v_i) / Σ_j' exp(v'_j' · v_i)`.
pub fn softmax_probability(model: &EmbeddingModel, input_id: TokenId, target_id: TokenId) -> f64 {
    softmax_distribution(model, model.input.row(input_id))[target_id]
}

/// Total exact-softmax negative log-likelihood over every example with the
/// full window (no dynamic shrinking).
pub fn corpus_nll(model: &EmbeddingModel, sequences: &[Vec<TokenId>], architecture: Architecture, window: usize) -> f64 {
    let mut nll = 0.0;
    for seq in sequences.iter().filter(|s| s.len() >= 2) {
        for t in 0..seq.len() {
            for pair in examples_at(seq, t, window, architecture) {
                let (h, target) = hidden(model, &pair, architecture);
                nll -= softmax_distribution(model, &h)[target].ln();
            }
        }
    }
    nll
}

/// Alias of the unigram^0.75 noise distribution over a vocabulary.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    dist: Option<WeightedIndex<f64>>,
    len: usize,
}

impl NoiseSampler {
    pub fn new(vocab: &Vocabulary) -> Self {
        let weights: Vec<f64> = vocab.frequencies().iter().map(|&f| (f as f64).powf(0.75)).collect();
        Self {
            dist: WeightedIndex::new(&weights).ok(),
            len: vocab.len(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TokenId {
        match &self.dist {
            Some(d) => d.sample(rng),
            None => rng.random_range(0..self.len),
        }
    }

    /// `count` draws, rejecting the positive target. Empty if the
    /// vocabulary has nothing else to offer.
    pub fn negatives(&self, count: usize, exclude: TokenId, rng: &mut impl Rng) -> Vec<TokenId> {
        if self.len < 2 {
            return Vec::new();
        }
        (0..count)
            .map(|_| loop {
                let n = self.sample(rng);
                if n != exclude {
                    break n;
                }
            })
            .collect()
    }
}

/// Row access used by the training kernel, so the same code drives the
/// single-worker path and the shared lock-free path.
trait RowStore {
    fn read_input(&self, row: TokenId, out: &mut [f64]);
    fn read_output(&self, row: TokenId, out: &mut [f64]);
    fn add_input(&mut self, row: TokenId, alpha: f64, x: &[f64]);
    fn add_output(&mut self, row: TokenId, alpha: f64, x: &[f64]);
}

struct DenseStore<'a> {
    input: &'a mut Matrix,
    output: &'a mut Matrix,
}

impl RowStore for DenseStore<'_> {
    fn read_input(&self, row: TokenId, out: &mut [f64]) {
        out.copy_from_slice(self.input.row(row));
    }

    fn read_output(&self, row: TokenId, out: &mut [f64]) {
        out.copy_from_slice(self.output.row(row));
    }

    fn add_input(&mut self, row: TokenId, alpha: f64, x: &[f64]) {
        axpy(self.input.row_mut(row), alpha, x);
    }

    fn add_output(&mut self, row: TokenId, alpha: f64, x: &[f64]) {
        axpy(self.output.row_mut(row), alpha, x);
    }
}

/// f64 bit patterns in relaxed atomics; concurrent updates may interleave
/// but never tear.
struct SharedWeights {
    input: Vec<AtomicU64>,
    output: Vec<AtomicU64>,
    dim: usize,
}

impl SharedWeights {
    fn from_matrices(input: &Matrix, output: &Matrix) -> Self {
        let wrap = |m: &Matrix| m.data.iter().map(|x| AtomicU64::new(x.to_bits())).collect();
        Self {
            input: wrap(input),
            output: wrap(output),
            dim: input.cols(),
        }
    }

    fn copy_into(&self, input: &mut Matrix, output: &mut Matrix) {
        for (dst, src) in [(input, &self.input), (output, &self.output)] {
            for (x, a) in dst.data.iter_mut().zip(src) {
                *x = f64::from_bits(a.load(Ordering::Relaxed));
            }
        }
    }
}

#[derive(Clone, Copy)]
struct SharedStore<'a>(&'a SharedWeights);

impl SharedStore<'_> {
    fn read(cells: &[AtomicU64], dim: usize, row: TokenId, out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(&cells[row * dim..(row + 1) * dim]) {
            *o = f64::from_bits(a.load(Ordering::Relaxed));
        }
    }

    fn add(cells: &[AtomicU64], dim: usize, row: TokenId, alpha: f64, x: &[f64]) {
        for (a, xi) in cells[row * dim..(row + 1) * dim].iter().zip(x) {
            let v = f64::from_bits(a.load(Ordering::Relaxed)) + alpha * xi;
            a.store(v.to_bits(), Ordering::Relaxed);
        }
    }
}

impl RowStore for SharedStore<'_> {
    fn read_input(&self, row: TokenId, out: &mut [f64]) {
        Self::read(&self.0.input, self.0.dim, row, out);
    }

    fn read_output(&self, row: TokenId, out: &mut [f64]) {
        Self::read(&self.0.output, self.0.dim, row, out);
    }

    fn add_input(&mut self, row: TokenId, alpha: f64, x: &[f64]) {
        Self::add(&self.0.input, self.0.dim, row, alpha, x);
    }

    fn add_output(&mut self, row: TokenId, alpha: f64, x: &[f64]) {
        Self::add(&self.0.output, self.0.dim, row, alpha, x);
    }
}

struct Scratch {
    h: Vec<f64>,
    dh: Vec<f64>,
    row: Vec<f64>,
    scores: Vec<f64>,
}

impl Scratch {
    fn new(dim: usize, vocab: usize) -> Self {
        Self {
            h: vec![0.0; dim],
            dh: vec![0.0; dim],
            row: vec![0.0; dim],
            scores: vec![0.0; vocab],
        }
    }
}

struct Kernel<'a> {
    architecture: Architecture,
    negatives: usize,
    vocab_len: usize,
    noise: &'a NoiseSampler,
}

impl Kernel<'_> {
    fn load_hidden(&self, store: &impl RowStore, pair: &TrainingPair, s: &mut Scratch) -> TokenId {
        match self.architecture {
            Architecture::SkipGram => {
                store.read_input(pair.center_id, &mut s.h);
                pair.context_ids[0]
            }
            Architecture::Cbow => {
                s.h.iter_mut().for_each(|x| *x = 0.0);
                for &c in &pair.context_ids {
                    store.read_input(c, &mut s.row);
                    axpy(&mut s.h, 1.0, &s.row);
                }
                let inv = 1.0 / pair.context_ids.len() as f64;
                s.h.iter_mut().for_each(|x| *x *= inv);
                pair.center_id
            }
        }
    }

    /// Every CBOW context row receives the full hidden-layer error, as in the
    /// reference word2vec trainer. That is `|C|` times the exact gradient of
    /// the averaged-input loss; without it wide windows barely move the
    /// input rows.
    fn push_hidden(&self, store: &mut impl RowStore, pair: &TrainingPair, lr: f64, s: &Scratch) {
        match self.architecture {
            Architecture::SkipGram => store.add_input(pair.center_id, -lr, &s.dh),
            Architecture::Cbow => {
                for &c in &pair.context_ids {
                    store.add_input(c, -lr, &s.dh);
                }
            }
        }
    }

    /// One SGD step in place; returns the example's loss before the update.
    fn step(&self, store: &mut impl RowStore, pair: &TrainingPair, lr: f64, rng: &mut impl Rng, s: &mut Scratch) -> f64 {
        let target = self.load_hidden(store, pair, s);
        s.dh.iter_mut().for_each(|x| *x = 0.0);
        let mut loss = 0.0;
        if self.negatives == 0 {
            for j in 0..self.vocab_len {
                store.read_output(j, &mut s.row);
                s.scores[j] = dot(&s.row, &s.h);
            }
            let max = s.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.scores.iter().map(|x| (x - max).exp()).sum();
            loss = -(s.scores[target] - max - z.ln());
            for j in 0..self.vocab_len {
                let p = (s.scores[j] - max).exp() / z;
                let g = p - if j == target { 1.0 } else { 0.0 };
                store.read_output(j, &mut s.row);
                axpy(&mut s.dh, g, &s.row);
                store.add_output(j, -lr * g, &s.h);
            }
        } else {
            let negs = self.noise.negatives(self.negatives, target, rng);
            for (t, label) in std::iter::once((target, 1.0)).chain(negs.into_iter().map(|n| (n, 0.0))) {
                store.read_output(t, &mut s.row);
                let score = dot(&s.row, &s.h);
                loss += if label > 0.0 { softplus(-score) } else { softplus(score) };
                let g = sigmoid(score) - label;
                axpy(&mut s.dh, g, &s.row);
                store.add_output(t, -lr * g, &s.h);
            }
        }
        self.push_hidden(store, pair, lr, s);
        loss
    }
}

/// Linear decay from `initial_lr` at the start to `final_lr` at the end.
pub fn learning_rate(config: &TrainConfig, processed: u64, total: u64) -> f64 {
    if total == 0 {
        return config.initial_lr;
    }
    let progress = (processed as f64 / total as f64).min(1.0);
    config.initial_lr - (config.initial_lr - config.final_lr) * progress
}

fn subsample(seq: &[TokenId], keep_prob: &[f64], rng: &mut impl Rng) -> Vec<TokenId> {
    seq.iter()
        .copied()
        .filter(|&id| {
            let p = keep_prob[id];
            p >= 1.0 || rng.random::<f64>() < p
        })
        .collect()
}

fn keep_probabilities(vocab: &Vocabulary, threshold: f64) -> Vec<f64> {
    let total: u64 = vocab.frequencies().iter().sum();
    vocab
        .frequencies()
        .iter()
        .map(|&f| {
            if threshold <= 0.0 || f == 0 {
                return 1.0;
            }
            let t = threshold * total as f64;
            let f = f as f64;
            ((f / t).sqrt() + 1.0) * t / f
        })
        .collect()
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub examples: u64,
    pub mean_loss: f64,
}

/// Trains a model for one slice. With `workers == 1` the result is a pure
/// function of the inputs and `config.seed`.
pub fn train_slice(
    sequences: &[Vec<TokenId>],
    vocab: Vocabulary,
    config: &TrainConfig,
    slice_label: &str,
) -> Result<EmbeddingModel> {
    train_slice_with_stats(sequences, vocab, config, slice_label).map(|(m, _)| m)
}

pub fn train_slice_with_stats(
    sequences: &[Vec<TokenId>],
    vocab: Vocabulary,
    config: &TrainConfig,
    slice_label: &str,
) -> Result<(EmbeddingModel, Vec<EpochStats>)> {
    train_slice_observed(sequences, vocab, config, slice_label, |_, _| {})
}

/// Like [`train_slice_with_stats`], calling `on_epoch(epoch, model)` after
/// every completed epoch.
pub fn train_slice_observed(
    sequences: &[Vec<TokenId>],
    vocab: Vocabulary,
    config: &TrainConfig,
    slice_label: &str,
    mut on_epoch: impl FnMut(usize, &EmbeddingModel),
) -> Result<(EmbeddingModel, Vec<EpochStats>)> {
    if vocab.is_empty() {
        return Err(EmbeddingError::EmptyVocabulary);
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = EmbeddingModel::initialize(vocab, config.clone(), slice_label, &mut rng);
    let noise = NoiseSampler::new(&model.vocab);
    let keep = keep_probabilities(&model.vocab, config.subsample_threshold);
    let kernel = Kernel {
        architecture: config.architecture,
        negatives: config.negatives,
        vocab_len: model.vocab.len(),
        noise: &noise,
    };
    let tokens_per_epoch: u64 = sequences.iter().map(|s| s.len() as u64).sum();
    let total = tokens_per_epoch * config.epochs as u64;
    let dim = model.dim();

    let mut stats = Vec::with_capacity(config.epochs);
    if config.workers == 1 {
        let mut scratch = Scratch::new(dim, kernel.vocab_len);
        let mut processed = 0u64;
        for epoch in 0..config.epochs {
            let mut store = DenseStore {
                input: &mut model.input,
                output: &mut model.output,
            };
            let (mut loss, mut examples) = (0.0, 0u64);
            for seq in sequences {
                let seq_len = seq.len() as u64;
                let kept;
                let seq: &[TokenId] = if config.subsample_threshold > 0.0 {
                    kept = subsample(seq, &keep, &mut rng);
                    &kept
                } else {
                    seq
                };
                if seq.len() >= 2 {
                    for t in 0..seq.len() {
                        let lr = learning_rate(config, processed + t as u64, total);
                        let b = rng.random_range(1..=config.window);
                        for pair in examples_at(seq, t, b, config.architecture) {
                            loss += kernel.step(&mut store, &pair, lr, &mut rng, &mut scratch);
                            examples += 1;
                        }
                    }
                }
                processed += seq_len;
            }
            stats.push(EpochStats {
                examples,
                mean_loss: if examples > 0 { loss / examples as f64 } else { 0.0 },
            });
            on_epoch(epoch, &model);
        }
    } else {
        let shared = SharedWeights::from_matrices(&model.input, &model.output);
        let processed = AtomicU64::new(0);
        let next_seq = AtomicUsize::new(0);
        for epoch in 0..config.epochs {
            next_seq.store(0, Ordering::Relaxed);
            let results: Vec<(f64, u64)> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..config.workers)
                    .map(|w| {
                        let (kernel, keep, shared) = (&kernel, &keep, &shared);
                        let (processed, next_seq) = (&processed, &next_seq);
                        scope.spawn(move || {
                            let seed = config.seed ^ ((epoch as u64) << 32) ^ (w as u64 + 1);
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            let mut store = SharedStore(shared);
                            let mut scratch = Scratch::new(dim, kernel.vocab_len);
                            let (mut loss, mut examples) = (0.0, 0u64);
                            loop {
                                let i = next_seq.fetch_add(1, Ordering::Relaxed);
                                let Some(seq) = sequences.get(i) else { break };
                                let base = processed.fetch_add(seq.len() as u64, Ordering::Relaxed);
                                let seq = if config.subsample_threshold > 0.0 {
                                    subsample(seq, keep, &mut rng)
                                } else {
                                    seq.clone()
                                };
                                if seq.len() < 2 {
                                    continue;
                                }
                                for t in 0..seq.len() {
                                    let lr = learning_rate(config, base + t as u64, total);
                                    let b = rng.random_range(1..=config.window);
                                    for pair in examples_at(&seq, t, b, config.architecture) {
                                        loss += kernel.step(&mut store, &pair, lr, &mut rng, &mut scratch);
                                        examples += 1;
                                    }
                                }
                            }
                            (loss, examples)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            let loss: f64 = results.iter().map(|r| r.0).sum();
            let examples: u64 = results.iter().map(|r| r.1).sum();
            stats.push(EpochStats {
                examples,
                mean_loss: if examples > 0 { loss / examples as f64 } else { 0.0 },
            });
            shared.copy_into(&mut model.input, &mut model.output);
            on_epoch(epoch, &model);
        }
    }
    Ok((model, stats))
}

/// Applies one exact gradient-descent step to `model` for `pair` with the
/// given negatives (or exact softmax if `negative_ids` is `None`). Returns the
/// loss before the update. Unlike the trainer, CBOW context rows get the true
/// `1/|C|` share of the hidden gradient.
pub fn sgd_step(
    model: &mut EmbeddingModel,
    pair: &TrainingPair,
    negative_ids: Option<&[TokenId]>,
    architecture: Architecture,
    lr: f64,
) -> f64 {
    let grads = match negative_ids {
        Some(negs) => loss_and_gradients_negative_sampling(model, pair, negs, architecture),
        None => loss_and_gradients_softmax(model, pair, architecture),
    };
    grads.1.apply(model, lr);
    grads.0
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, i.e. `-ln σ(-x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scaled cosine distance between two terms, or missing when a term is not
/// in the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum PairDistance {
    Value(f64),
    Missing,
}

impl PairDistance {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(v),
            Self::Missing => None,
        }
    }

    pub fn is_missing(self) -> bool {
        matches!(self, Self::Missing)
    }
}

/// Maps cosine similarity onto `[0, 1]`: 0 for parallel vectors, 1 for
/// opposite ones.
pub fn scaled_distance(cosine: f64) -> f64 {
    ((1.0 - cosine) / 2.0).clamp(0.0, 1.0)
}

/// Terms must already be normalized. A term that is absent (or has a zero
/// vector) yields `Missing`.
pub fn pair_distance(model: &EmbeddingModel, term_a: &str, term_b: &str) -> PairDistance {
    match (model.vector(term_a), model.vector(term_b)) {
        (Some(a), Some(b)) => match cosine_similarity(a, b) {
            Ok(c) => PairDistance::Value(scaled_distance(c)),
            Err(_) => PairDistance::Missing,
        },
        _ => PairDistance::Missing,
    }
}

/// The `k` tokens with highest cosine to `term`, excluding the term itself.
/// `k` is capped at `V - 1`; ties go to the lower token id.
pub fn nearest_neighbors(model: &EmbeddingModel, term: &str, k: usize) -> Result<Vec<(String, f64)>> {
    let query_id = model
        .vocab
        .id(term)
        .ok_or_else(|| EmbeddingError::UnknownTerm(term.to_string()))?;
    let query = model.input.row(query_id);
    let qn = norm(query);
    let mut scored: Vec<(TokenId, f64)> = (0..model.vocab.len())
        .filter(|&id| id != query_id)
        .map(|id| {
            let row = model.input.row(id);
            let n = norm(row);
            let c = if qn == 0.0 || n == 0.0 {
                0.0
            } else {
                (dot(query, row) / (qn * n)).clamp(-1.0, 1.0)
            };
            (id, c)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(id, c)| (model.vocab.token(id).expect("id in range").to_string(), c))
        .collect())
}

fn write_row(out: &mut impl Write, prefix: &str, token: &str, row: &[f64]) -> io::Result<()> {
    write!(out, "{prefix}{token}")?;
    for x in row {
        // `Display` for f64 prints the shortest string that parses back to
        // the same bits.
        write!(out, " {x}")?;
    }
    writeln!(out)
}

/// Writes the text model format: `V D`, then `V` input rows, then `V`
/// `#out`-prefixed output rows, then optional `#meta key value` lines.
pub fn save_model(model: &EmbeddingModel, path: &Path) -> Result<()> {
    let io_err = |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    let write = |out: &mut BufWriter<fs::File>| -> io::Result<()> {
        writeln!(out, "{} {}", model.vocab.len(), model.dim())?;
        for (id, token) in model.vocab.tokens().iter().enumerate() {
            write_row(out, "", token, model.input.row(id))?;
        }
        for (id, token) in model.vocab.tokens().iter().enumerate() {
            write_row(out, "#out ", token, model.output.row(id))?;
        }
        writeln!(out, "#meta slice_label {}", model.slice_label)?;
        if let Some(hash) = &model.config_hash {
            writeln!(out, "#meta config_hash {hash}")?;
        }
        for (k, v) in model.config.key_values() {
            writeln!(out, "#meta {k} {v}")?;
        }
        out.flush()
    };
    write(&mut out).map_err(io_err)
}

pub fn load_model(path: &Path) -> Result<EmbeddingModel> {
    let file = fs::File::open(path).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |line: usize, reason: String| EmbeddingError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mismatch = |reason: String| EmbeddingError::DimensionMismatch {
        path: path.to_path_buf(),
        reason,
    };

    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| malformed(1, "empty file".into()))?;
    let header = header.map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| malformed(1, format!("header: {e}")))?;
    let [v, d] = dims[..] else {
        return Err(malformed(1, format!("header must be 'V D', got '{header}'")));
    };

    let parse_row = |lineno: usize, rest: &str| -> Result<(String, Vec<f64>)> {
        let mut parts = rest.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| malformed(lineno, "empty vector line".into()))?
            .to_string();
        let values: Vec<f64> = parts
            .map(|s| s.parse::<f64>().map_err(|e| malformed(lineno, format!("'{s}': {e}"))))
            .collect::<Result<_>>()?;
        if values.len() != d {
            return Err(mismatch(format!(
                "line {lineno} has {} values, header says D={d}",
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(malformed(lineno, "non-finite value".into()));
        }
        Ok((token, values))
    };

    let mut tokens = Vec::with_capacity(v);
    let mut input = Vec::with_capacity(v);
    let mut out_tokens = Vec::new();
    let mut output = Vec::new();
    let mut meta = BTreeMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#out ") {
            let (t, row) = parse_row(lineno, rest)?;
            out_tokens.push(t);
            output.push(row);
        } else if let Some(rest) = line.strip_prefix("#meta ") {
            let (k, val) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.insert(k.to_string(), val.to_string());
        } else if line.starts_with('#') {
            continue;
        } else {
            if !output.is_empty() {
                return Err(malformed(lineno, "input row after output rows".into()));
            }
            let (t, row) = parse_row(lineno, &line)?;
            tokens.push(t);
            input.push(row);
        }
    }
    if tokens.len() != v {
        return Err(mismatch(format!("header says V={v} but found {} vector lines", tokens.len())));
    }
    if output.is_empty() {
        output = vec![vec![0.0; d]; v];
    } else if out_tokens != tokens {
        return Err(mismatch(format!(
            "{} output rows do not match the {v} input tokens",
            out_tokens.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
        return Err(malformed(0, format!("duplicate token '{dup}'")));
    }

    let mut config = TrainConfig {
        vector_size: d,
        ..TrainConfig::default()
    };
    for key in TrainConfig::KEYS {
        if let Some(val) = meta.get(key) {
            config
                .set(key, val)
                .map_err(|e| malformed(0, format!("meta {key}: {e}")))?;
        }
    }
    let slice_label = meta.get("slice_label").cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let (input, output) = if v == 0 {
        (Matrix::zeros(0, d), Matrix::zeros(0, d))
    } else {
        (Matrix::from_rows(&input), Matrix::from_rows(&output))
    };
    Ok(EmbeddingModel {
        vocab: Vocabulary::from_ordered_tokens(tokens),
        input,
        output,
        config,
        slice_label,
        config_hash: meta.get("config_hash").cloned(),
    })
}
