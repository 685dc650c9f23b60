//! Text normalization and per-slice vocabularies.
//!
//! The pipeline is `tokenize -> remove_stopwords -> lemmatize -> encode`; no
//! stage ever adds tokens. Query terms go through the same steps so that
//! `"CDC"` and `"cdc"` resolve to the same vocabulary entry.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::Document;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("vocabulary is empty after applying min_count={0}")]
    EmptyVocabulary(u64),
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("term '{0}' does not reduce to exactly one token after preprocessing")]
    UnusableTerm(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

pub type TokenId = usize;

/// Splits on non-alphanumeric boundaries, lowercases, and drops all-digit pieces.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .filter(|piece| !piece.chars().all(|c| c.is_numeric()))
        .map(|piece| piece.to_lowercase())
        .collect()
}

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopwordSet {
    words: HashSet<String>,
}

impl StopwordSet {
    pub fn english() -> Self {
        Self::parse(BUNDLED_STOPWORDS)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(contents: &str) -> Self {
        let words = contents
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { words }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let contents = fs::read_to_string(path).map_err(|source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::parse(&contents))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn remove_stopwords(tokens: Vec<String>, stopwords: &StopwordSet) -> Vec<String> {
    tokens.into_iter().filter(|t| !stopwords.contains(t)).collect()
}

// Irregular forms plus words the suffix rules would mangle.
const LEMMA_EXCEPTIONS: &[(&str, &str)] = &[
    ("always", "always"),
    ("anything", "anything"),
    ("began", "begin"),
    ("begun", "begin"),
    ("being", "be"),
    ("bought", "buy"),
    ("brought", "bring"),
    ("came", "come"),
    ("children", "child"),
    ("christmas", "christmas"),
    ("compared", "compare"),
    ("comparing", "compare"),
    ("does", "do"),
    ("during", "during"),
    ("evening", "evening"),
    ("everything", "everything"),
    ("explored", "explore"),
    ("exploring", "explore"),
    ("feet", "foot"),
    ("found", "find"),
    ("gave", "give"),
    ("geese", "goose"),
    ("given", "give"),
    ("goes", "go"),
    ("going", "go"),
    ("gone", "go"),
    ("got", "get"),
    ("ignored", "ignore"),
    ("ignoring", "ignore"),
    ("knew", "know"),
    ("known", "know"),
    ("less", "less"),
    ("made", "make"),
    ("men", "man"),
    ("mice", "mouse"),
    ("morning", "morning"),
    ("news", "news"),
    ("nothing", "nothing"),
    ("people", "people"),
    ("perhaps", "perhaps"),
    ("prepared", "prepare"),
    ("preparing", "prepare"),
    ("ran", "run"),
    ("said", "say"),
    ("saw", "see"),
    ("scored", "score"),
    ("scoring", "score"),
    ("seen", "see"),
    ("series", "series"),
    ("shared", "share"),
    ("sharing", "share"),
    ("something", "something"),
    ("species", "species"),
    ("stored", "store"),
    ("storing", "store"),
    ("taken", "take"),
    ("teeth", "tooth"),
    ("thought", "think"),
    ("told", "tell"),
    ("took", "take"),
    ("unless", "unless"),
    ("used", "use"),
    ("using", "use"),
    ("went", "go"),
    ("women", "woman"),
    ("written", "write"),
    ("wrote", "write"),
    ("yes", "yes"),
];

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

fn has_vowel(s: &[u8]) -> bool {
    s.iter().any(|&c| is_vowel(c) || c == b'y')
}

/// Short consonant-vowel-consonant stems take a trailing `e` back
/// (`mak` -> `make`).
fn is_short_cvc(s: &[u8]) -> bool {
    s.len() == 3
        && !is_vowel(s[0])
        && is_vowel(s[1])
        && !is_vowel(s[2])
        && !matches!(s[2], b'w' | b'x' | b'y')
}

/// Stem endings that almost always lost a final `e` (`believ`, `produc`,
/// `charg`, `rais`).
const E_RESTORING_ENDINGS: &[&str] = &["at", "iz", "v", "uc", "nc", "rc", "rg", "dg", "ais", "aus", "ois", "uis", "ous"];

fn restore_verb_stem(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2 && b[n - 1] == b[n - 2] && !is_vowel(b[n - 1]) && !matches!(b[n - 1], b'l' | b's' | b'z') {
        return stem[..n - 1].to_string();
    }
    let consonant = |c: u8| !is_vowel(c) && c != b'y';
    // handl, settl; consonant + ur: measur, captur
    let consonant_l = n >= 2 && b[n - 1] == b'l' && consonant(b[n - 2]) && !matches!(b[n - 2], b'l' | b'r' | b'w');
    let consonant_ur = n >= 3 && stem.ends_with("ur") && consonant(b[n - 3]);
    if is_short_cvc(b) || consonant_l || consonant_ur || E_RESTORING_ENDINGS.iter().any(|e| stem.ends_with(e)) {
        return format!("{stem}e");
    }
    stem.to_string()
}

/// Maps a normalized token to its lemma with a fixed exception table and a
/// handful of English suffix rules. Tokens the rules do not cover come back
/// unchanged.
pub fn lemmatize(token: &str) -> String {
    if let Ok(i) = LEMMA_EXCEPTIONS.binary_search_by(|(k, _)| k.cmp(&token)) {
        return LEMMA_EXCEPTIONS[i].1.to_string();
    }
    if token.len() <= 3 || !token.bytes().all(|b| b.is_ascii_lowercase()) {
        return token.to_string();
    }
    let n = token.len();

    if let Some(stem) = token.strip_suffix("ies") {
        if n > 4 {
            return format!("{stem}y");
        }
    }
    if token.ends_with("sses") || ["xes", "ches", "shes", "zzes"].iter().any(|s| token.ends_with(s)) {
        return token[..n - 2].to_string();
    }
    if token.ends_with('s')
        && !["ss", "us", "is", "ics", "ous"].iter().any(|s| token.ends_with(s))
    {
        return token[..n - 1].to_string();
    }

    if let Some(stem) = token.strip_suffix("ing") {
        if n > 5 && stem.len() >= 3 && has_vowel(stem.as_bytes()) {
            return restore_verb_stem(stem);
        }
        return token.to_string();
    }
    if token.ends_with("eed") {
        return token.to_string();
    }
    if let Some(stem) = token.strip_suffix("ied") {
        if n > 4 {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = token.strip_suffix("ed") {
        if n > 4 && stem.len() >= 3 && has_vowel(stem.as_bytes()) {
            return restore_verb_stem(stem);
        }
    }
    token.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub doc_id: String,
    pub tokens: Vec<String>,
}

/// Tokenizer + stopword filter + lemmatizer bundle.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub stopwords: StopwordSet,
    pub lemmatize: bool,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self {
            stopwords: StopwordSet::english(),
            lemmatize: true,
        }
    }
}

impl Preprocessor {
    pub fn process(&self, text: &str) -> Vec<String> {
        let tokens = remove_stopwords(tokenize(text), &self.stopwords);
        if self.lemmatize {
            tokens.iter().map(|t| lemmatize(t)).collect()
        } else {
            tokens
        }
    }

    pub fn process_document(&self, doc: &Document) -> TokenSequence {
        TokenSequence {
            doc_id: doc.id.clone(),
            tokens: self.process(&doc.text),
        }
    }

    /// Normalizes a user-supplied query term. A term must reduce to exactly
    /// one token; multi-word input is rejected along with stopwords.
    pub fn normalize_term(&self, term: &str) -> Result<String> {
        let mut tokens = self.process(term);
        match tokens.len() {
            1 => Ok(tokens.pop().expect("one token")),
            _ => Err(PreprocessError::UnusableTerm(term.to_string())),
        }
    }
}

/// Bijective token/id map with per-slice frequencies.
///
/// Ids run `0..len()` in descending frequency order, ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    frequency: Vec<u64>,
    min_count: u64,
}

impl Vocabulary {
    fn from_counts(mut counts: Vec<(String, u64)>, min_count: u64) -> Self {
        counts.sort_by(|(ta, fa), (tb, fb)| fb.cmp(fa).then_with(|| ta.cmp(tb)));
        let index = counts
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        let (tokens, frequency) = counts.into_iter().unzip();
        Self {
            tokens,
            index,
            frequency,
            min_count,
        }
    }

    /// Vocabulary in the given id order without frequency information, as
    /// recovered from a saved model.
    pub fn from_ordered_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let frequency = vec![0; tokens.len()];
        Self {
            tokens,
            index,
            frequency,
            min_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: TokenId) -> u64 {
        self.frequency[id]
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequency
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

pub fn build_vocabulary(sequences: &[TokenSequence], min_count: u64) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(PreprocessError::InvalidMinCount);
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for seq in sequences {
        for token in &seq.tokens {
            *counts.entry(token.as_str()).or_default() += 1;
        }
    }
    let kept: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(t, c)| (t.to_string(), c))
        .collect();
    if kept.is_empty() {
        return Err(PreprocessError::EmptyVocabulary(min_count));
    }
    Ok(Vocabulary::from_counts(kept, min_count))
}

/// Maps tokens to ids, silently dropping out-of-vocabulary tokens.
pub fn encode(sequence: &TokenSequence, vocab: &Vocabulary) -> Vec<TokenId> {
    sequence.tokens.iter().filter_map(|t| vocab.id(t)).collect()
}

pub fn decode(ids: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter_map(|&i| vocab.token(i).map(str::to_string))
        .collect()
}

/// Preprocessed slice on disk: vocabulary block followed by one line of ids
/// per document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceCache {
    pub config_hash: String,
    pub vocab: Vocabulary,
    pub documents: Vec<Vec<TokenId>>,
}

impl SliceCache {
    pub fn write(&self, path: &Path) -> Result<()> {
        let io_err = |source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
        writeln!(out, "#config {}", self.config_hash).map_err(io_err)?;
        writeln!(out, "{}", self.vocab.len()).map_err(io_err)?;
        for (token, freq) in self.vocab.tokens.iter().zip(&self.vocab.frequency) {
            writeln!(out, "{token} {freq}").map_err(io_err)?;
        }
        for doc in &self.documents {
            let line = doc.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |reason: String| PreprocessError::Cache {
            path: path.to_path_buf(),
            reason,
        };
        let file = fs::File::open(path).map_err(|source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines();
        let mut next = || -> Result<Option<String>> {
            lines.next().transpose().map_err(|source| PreprocessError::Io {
                path: path.to_path_buf(),
                source,
            })
        };
        let header = next()?.ok_or_else(|| bad("empty file".into()))?;
        let config_hash = header
            .strip_prefix("#config ")
            .ok_or_else(|| bad("missing #config line".into()))?
            .to_string();
        let v: usize = next()?
            .ok_or_else(|| bad("missing vocabulary size".into()))?
            .trim()
            .parse()
            .map_err(|e| bad(format!("vocabulary size: {e}")))?;
        let mut counts = Vec::with_capacity(v);
        for _ in 0..v {
            let line = next()?.ok_or_else(|| bad("truncated vocabulary block".into()))?;
            let (token, freq) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("bad vocabulary line '{line}'")))?;
            let freq = freq.parse().map_err(|e| bad(format!("frequency: {e}")))?;
            counts.push((token.to_string(), freq));
        }
        let min_count = counts.iter().map(|&(_, f)| f).min().unwrap_or(1);
        let tokens: Vec<String> = counts.iter().map(|(t, _)| t.clone()).collect();
        let mut vocab = Vocabulary::from_ordered_tokens(tokens);
        vocab.frequency = counts.into_iter().map(|(_, f)| f).collect();
        vocab.min_count = min_count;
        let mut documents = Vec::new();
        while let Some(line) = next()? {
            let ids = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<TokenId>()
                        .ok()
                        .filter(|&i| i < v)
                        .ok_or_else(|| bad(format!("bad token id '{s}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            documents.push(ids);
        }
        Ok(Self {
            config_hash,
            vocab,
            documents,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence {
            doc_id: "d".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn exception_table_is_sorted() {
        assert!(LEMMA_EXCEPTIONS.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn tokenize_fixtures() {
        assert_eq!(tokenize("The CDC's report, 2020!"), ["the", "cdc", "s", "report"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("New York"), ["new", "york"]);
        assert_eq!(tokenize("Zürich--über  covid19 42"), ["zürich", "über", "covid19"]);
        assert!(tokenize("!!! ... 123").is_empty());
    }

    #[test]
    fn stopword_filtering() {
        let en = StopwordSet::english();
        assert!(en.len() > 100 && en.len() < 200);
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(remove_stopwords(toks(&["the", "cdc", "is", "unofficial"]), &en), ["cdc", "unofficial"]);
        assert_eq!(remove_stopwords(toks(&["the", "cdc"]), &StopwordSet::empty()), ["the", "cdc"]);
        assert!(remove_stopwords(toks(&["the", "is", "a"]), &en).is_empty());
    }

    #[test]
    fn stopword_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stop.txt");
        fs::write(&p, "# custom\nCDC\n\nfoo\n").unwrap();
        let set = StopwordSet::from_file(&p).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.contains("cdc"));
    }

    #[test]
    fn lemma_fixtures() {
        assert_eq!(lemmatize("olympics"), "olympics");
        assert_eq!(lemmatize("running"), "run");
        assert_eq!(lemmatize("cdc"), "cdc");
        assert_eq!(lemmatize("experts"), "expert");
        assert_eq!(lemmatize("studies"), "study");
        assert_eq!(lemmatize("classes"), "class");
        assert_eq!(lemmatize("matches"), "match");
        assert_eq!(lemmatize("making"), "make");
        assert_eq!(lemmatize("stopped"), "stop");
        assert_eq!(lemmatize("played"), "play");
        assert_eq!(lemmatize("related"), "relate");
        assert_eq!(lemmatize("falling"), "fall");
        assert_eq!(lemmatize("tennis"), "tennis");
        assert_eq!(lemmatize("gymnastics"), "gymnastics");
        assert_eq!(lemmatize("thing"), "thing");
        assert_eq!(lemmatize("string"), "string");
        assert_eq!(lemmatize("children"), "child");
        assert_eq!(lemmatize("news"), "news");
        assert_eq!(lemmatize("speed"), "speed");
    }

    #[test]
    fn lemma_restores_final_e() {
        for (word, lemma) in [
            ("believed", "believe"),
            ("produced", "produce"),
            ("charging", "charge"),
            ("raised", "raise"),
            ("handled", "handle"),
            ("measured", "measure"),
            ("caused", "cause"),
            ("scoring", "score"),
            ("having", "have"),
            ("called", "call"),
            ("played", "play"),
            ("occurred", "occur"),
            ("helped", "help"),
            ("worked", "work"),
            ("bowled", "bowl"),
            ("turned", "turn"),
        ] {
            assert_eq!(lemmatize(word), lemma, "{word}");
        }
    }

    #[test]
    fn normalize_query_terms() {
        let p = Preprocessor::default();
        assert_eq!(p.normalize_term("CDC").unwrap(), "cdc");
        assert_eq!(p.normalize_term("Experts").unwrap(), "expert");
        assert!(p.normalize_term("the").is_err());
        assert!(p.normalize_term("new york").is_err());
    }

    #[test]
    fn vocabulary_threshold() {
        let mut toks = vec!["cdc"; 12];
        toks.extend(vec!["fauci"; 9]);
        let v = build_vocabulary(&[seq(&toks)], 10).unwrap();
        assert!(v.contains("cdc"));
        assert!(!v.contains("fauci"));
        assert_eq!(v.frequency(v.id("cdc").unwrap()), 12);
    }

    #[test]
    fn vocabulary_min_count_one_keeps_everything() {
        let v = build_vocabulary(&[seq(&["a", "b"]), seq(&["c", "a"])], 1).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vocabulary_tie_break_is_lexicographic() {
        let mut toks = vec!["b"; 5];
        toks.extend(vec!["c"; 2]);
        toks.extend(vec!["a"; 5]);
        let v = build_vocabulary(&[seq(&toks)], 3).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.id("a"), Some(0));
        assert_eq!(v.id("b"), Some(1));
        assert_eq!(v.token(1), Some("b"));
    }

    #[test]
    fn vocabulary_errors() {
        assert!(matches!(
            build_vocabulary(&[seq(&["a"])], 2),
            Err(PreprocessError::EmptyVocabulary(2))
        ));
        assert!(matches!(build_vocabulary(&[seq(&["a"])], 0), Err(PreprocessError::InvalidMinCount)));
    }

    #[test]
    fn encode_drops_oov() {
        let v = build_vocabulary(&[seq(&["cdc"])], 1).unwrap();
        assert_eq!(encode(&seq(&["cdc", "zzz", "cdc"]), &v), [0, 0]);
        assert!(encode(&seq(&[]), &v).is_empty());
    }

    #[test]
    fn cache_roundtrip() {
        let v = build_vocabulary(&[seq(&["a", "b", "a", "c"])], 1).unwrap();
        let cache = SliceCache {
            config_hash: "abc123".into(),
            documents: vec![encode(&seq(&["a", "c"]), &v), vec![], vec![1, 0, 1]],
            vocab: v,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tok");
        cache.write(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("#config abc123\n3\na 2\nb 1\nc 1\n0 2\n\n1 0 1\n"));
        assert_eq!(SliceCache::read(&p).unwrap(), cache);
    }

    #[test]
    fn cache_rejects_out_of_range_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tok");
        fs::write(&p, "#config x\n1\na 3\n0 1\n").unwrap();
        assert!(matches!(SliceCache::read(&p), Err(PreprocessError::Cache { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pipeline_never_grows(text in "[a-zA-Z0-9 ,.'!-]{0,200}") {
                let stop = StopwordSet::english();
                let toks = tokenize(&text);
                let n0 = toks.len();
                for t in &toks {
                    prop_assert!(!t.is_empty());
                    prop_assert!(t.chars().any(|c| !c.is_numeric()));
                    prop_assert_eq!(t.to_lowercase(), t.clone());
                }
                let kept = remove_stopwords(toks, &stop);
                prop_assert!(kept.len() <= n0);
                let lemmas: Vec<String> = kept.iter().map(|t| lemmatize(t)).collect();
                prop_assert_eq!(lemmas.len(), kept.len());
                prop_assert!(lemmas.iter().all(|l| !l.is_empty()));
                let s = TokenSequence { doc_id: "x".into(), tokens: lemmas.clone() };
                if let Ok(v) = build_vocabulary(std::slice::from_ref(&s), 2) {
                    let ids = encode(&s, &v);
                    prop_assert!(ids.len() <= lemmas.len());
                    let back = decode(&ids, &v);
                    let expected: Vec<String> = lemmas.iter().filter(|t| v.contains(t)).cloned().collect();
                    prop_assert_eq!(back, expected);
                    for id in 0..v.len() {
                        prop_assert!(v.frequency(id) >= 2);
                        prop_assert_eq!(v.id(v.token(id).unwrap()), Some(id));
                    }
                }
            }
        }
    }
}
