//! Time-stamped document ingestion and partitioning into calendar periods.
//!
//! Two input formats are understood: JSON lines (`{id, timestamp, text, source?}`
//! per line) and raw newsgroup directory trees where each file is one post with
//! a `Date:` header. Documents whose date cannot be recovered are skipped and
//! counted rather than guessed.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("zero parseable documents in {0}")]
    Empty(PathBuf),
    #[error("unknown slice label '{label}' (available: {available})")]
    UnknownLabel { label: String, available: String },
    #[error("unknown corpus format '{0}' (expected jsonl or newsgroups_dir)")]
    UnknownFormat(String),
    #[error("unknown granularity '{0}' (expected year or month)")]
    UnknownGranularity(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub timestamp: NaiveDate,
    pub text: String,
    pub source: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Jsonl,
    NewsgroupsDir,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "newsgroups_dir" | "newsgroups" => Ok(Self::NewsgroupsDir),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Jsonl => "jsonl",
            Self::NewsgroupsDir => "newsgroups_dir",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: PathBuf,
    pub format: CorpusFormat,
}

/// Counts of records that were read but not admitted into the store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub bad_timestamp: usize,
    pub malformed: usize,
    pub duplicate_id: usize,
}

impl IngestReport {
    pub fn skipped(&self) -> usize {
        self.bad_timestamp + self.malformed + self.duplicate_id
    }
}

/// Documents in ascending timestamp order, ties broken by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentStore {
    documents: Vec<Document>,
    pub provenance: Provenance,
}

impl DocumentStore {
    /// Builds a store from arbitrary documents, sorting them and dropping
    /// repeated ids (first occurrence wins).
    pub fn new(documents: Vec<Document>, provenance: Provenance) -> Self {
        let mut seen = HashSet::new();
        let mut documents: Vec<Document> = documents
            .into_iter()
            .filter(|d| seen.insert(d.id.clone()))
            .collect();
        documents.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
        Self {
            documents,
            provenance,
        }
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

    /// Writes the store as JSON lines, the canonical interchange format.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut out = BufWriter::new(file);
        for doc in &self.documents {
            let record = JsonRecord {
                id: doc.id.clone(),
                timestamp: doc.timestamp.format("%Y-%m-%d").to_string(),
                text: doc.text.clone(),
                source: doc.source.clone(),
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    timestamp: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// Reads a corpus and returns it sorted by date along with skip counts.
pub fn ingest_documents(path: &Path, format: CorpusFormat) -> Result<(DocumentStore, IngestReport)> {
    let (documents, mut report) = match format {
        CorpusFormat::Jsonl => read_jsonl(path)?,
        CorpusFormat::NewsgroupsDir => read_newsgroups_dir(path)?,
    };
    let before = documents.len();
    let store = DocumentStore::new(
        documents,
        Provenance {
            path: path.to_path_buf(),
            format,
        },
    );
    report.duplicate_id += before - store.len();
    report.accepted = store.len();
    if report.duplicate_id > 0 {
        warn!("{}: skipped {} documents with duplicate ids", path.display(), report.duplicate_id);
    }
    if store.is_empty() {
        return Err(CorpusError::Empty(path.to_path_buf()));
    }
    Ok((store, report))
}

fn read_jsonl(path: &Path) -> Result<(Vec<Document>, IngestReport)> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut report = IngestReport::default();
    let mut documents = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                warn!("{}:{}: malformed record: {e}", path.display(), lineno + 1);
                report.malformed += 1;
                continue;
            }
        };
        let Some(timestamp) = parse_iso_date(&record.timestamp) else {
            warn!(
                "{}:{}: unparseable timestamp '{}'",
                path.display(),
                lineno + 1,
                record.timestamp
            );
            report.bad_timestamp += 1;
            continue;
        };
        documents.push(Document {
            id: record.id,
            timestamp,
            text: record.text,
            source: record.source,
        });
    }
    Ok((documents, report))
}

/// Accepts `YYYY-MM-DD` or a full RFC 3339 timestamp (reduced to its UTC date).
pub fn parse_iso_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d);
    }
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|dt| dt.naive_utc().date())
}

fn read_newsgroups_dir(root: &Path) -> Result<(Vec<Document>, IngestReport)> {
    if !root.is_dir() {
        return Err(CorpusError::Io {
            path: root.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut report = IngestReport::default();
    let mut documents = Vec::new();
    let walker = WalkDir::new(root).sort_by_file_name();
    for entry in walker {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let bytes = fs::read(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        // Newsgroup archives contain Latin-1 bytes here and there.
        let raw = String::from_utf8_lossy(&bytes);
        let Some((headers, body)) = split_post(&raw) else {
            warn!("{}: no header block", path.display());
            report.malformed += 1;
            continue;
        };
        let Some(timestamp) = header_value(headers, "Date").and_then(parse_post_date) else {
            warn!("{}: missing or unparseable Date header", path.display());
            report.bad_timestamp += 1;
            continue;
        };
        let source = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned());
        let rel = path.strip_prefix(root).unwrap_or(path);
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let subject = header_value(headers, "Subject").unwrap_or("");
        let text = if subject.is_empty() {
            body.trim().to_string()
        } else {
            format!("{}\n{}", subject.trim(), body.trim())
        };
        documents.push(Document {
            id,
            timestamp,
            text,
            source,
        });
    }
    Ok((documents, report))
}

fn split_post(raw: &str) -> Option<(&str, &str)> {
    let raw = raw.strip_prefix('\u{feff}').unwrap_or(raw);
    let idx = raw.find("\n\n").or_else(|| raw.find("\r\n\r\n"))?;
    let (head, body) = raw.split_at(idx);
    if !head.lines().any(|l| l.contains(':')) {
        return None;
    }
    Some((head, body))
}

fn header_value<'a>(headers: &'a str, name: &str) -> Option<&'a str> {
    headers.lines().find_map(|line| {
        let (key, value) = line.split_once(':')?;
        key.trim().eq_ignore_ascii_case(name).then(|| value.trim())
    })
}

/// Parses the loose date formats seen in Usenet `Date:` headers.
///
/// RFC 2822 is tried first; otherwise the first day/month-name/year triple in
/// the string is used. Two-digit years below 70 map to 20xx.
pub fn parse_post_date(value: &str) -> Option<NaiveDate> {
    if let Ok(dt) = DateTime::parse_from_rfc2822(value.trim()) {
        return Some(dt.naive_utc().date());
    }
    let tokens: Vec<&str> = value
        .split(|c: char| c.is_whitespace() || c == ',' || c == '-')
        .filter(|t| !t.is_empty())
        .collect();
    for w in tokens.windows(3) {
        let day = w[0].parse::<u32>().ok();
        let month = month_from_name(w[1]);
        let year = w[2].parse::<i32>().ok().filter(|_| w[2].len() == 2 || w[2].len() == 4);
        if let (Some(day), Some(month), Some(year)) = (day, month, year) {
            if let Some(d) = NaiveDate::from_ymd_opt(expand_year(year), month, day) {
                return Some(d);
            }
        }
    }
    None
}

fn expand_year(year: i32) -> i32 {
    match year {
        0..=69 => 2000 + year,
        70..=99 => 1900 + year,
        y => y,
    }
}

const MONTHS: [&str; 12] = [
    "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
];

fn month_from_name(s: &str) -> Option<u32> {
    let lower = s.to_ascii_lowercase();
    let prefix = lower.get(..3)?;
    MONTHS.iter().position(|m| *m == prefix).map(|i| i as u32 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Year,
    Month,
}

impl FromStr for Granularity {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "year" => Ok(Self::Year),
            "month" => Ok(Self::Month),
            other => Err(CorpusError::UnknownGranularity(other.to_string())),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Year => "year",
            Self::Month => "month",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeSlice {
    pub label: String,
    pub period_start: NaiveDate,
    /// Exclusive.
    pub period_end: NaiveDate,
    pub documents: Vec<Document>,
}

impl TimeSlice {
    /// Compact label in the `Jun'20` style used for table headers; yearly
    /// slices keep the four-digit year.
    pub fn short_label(&self) -> String {
        if self.label.len() == 4 {
            return self.label.clone();
        }
        let m = MONTHS[self.period_start.month0() as usize];
        let mut cap = m.to_string();
        cap[..1].make_ascii_uppercase();
        format!("{cap}'{:02}", self.period_start.year().rem_euclid(100))
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.period_start <= date && date < self.period_end
    }
}

fn period_start(date: NaiveDate, granularity: Granularity) -> NaiveDate {
    match granularity {
        Granularity::Year => NaiveDate::from_ymd_opt(date.year(), 1, 1),
        Granularity::Month => NaiveDate::from_ymd_opt(date.year(), date.month(), 1),
    }
    .expect("first of month is valid")
}

fn next_period(start: NaiveDate, granularity: Granularity) -> NaiveDate {
    let (y, m) = match granularity {
        Granularity::Year => (start.year() + 1, 1),
        Granularity::Month if start.month() == 12 => (start.year() + 1, 1),
        Granularity::Month => (start.year(), start.month() + 1),
    };
    NaiveDate::from_ymd_opt(y, m, 1).expect("first of month is valid")
}

fn period_label(start: NaiveDate, granularity: Granularity) -> String {
    match granularity {
        Granularity::Year => format!("{:04}", start.year()),
        Granularity::Month => format!("{:04}-{:02}", start.year(), start.month()),
    }
}

/// Partitions the store into consecutive periods covering its full date range.
/// Periods with no documents inside the range are kept as empty slices.
pub fn slice_by_period(store: &DocumentStore, granularity: Granularity) -> Vec<TimeSlice> {
    let docs = store.documents();
    let (Some(first), Some(last)) = (docs.first(), docs.last()) else {
        return Vec::new();
    };
    let mut slices = Vec::new();
    let mut start = period_start(first.timestamp, granularity);
    let end_of_range = next_period(period_start(last.timestamp, granularity), granularity);
    let mut cursor = 0;
    while start < end_of_range {
        let end = next_period(start, granularity);
        let take = docs[cursor..]
            .iter()
            .take_while(|d| d.timestamp < end)
            .count();
        slices.push(TimeSlice {
            label: period_label(start, granularity),
            period_start: start,
            period_end: end,
            documents: docs[cursor..cursor + take].to_vec(),
        });
        cursor += take;
        start = end;
    }
    debug_assert_eq!(cursor, docs.len());
    slices
}

/// Resolves a user-supplied label to a canonical one. Accepts the canonical
/// `2020-06` / `2016` forms and the short `Jun'20` form.
pub fn canonical_label(label: &str) -> Option<String> {
    let label = label.trim();
    if let Some((mon, yy)) = label.split_once('\'') {
        let month = month_from_name(mon).filter(|_| mon.len() == 3)?;
        let year = match yy.len() {
            2 => expand_year(yy.parse().ok()?),
            4 => yy.parse().ok()?,
            _ => return None,
        };
        return Some(format!("{year:04}-{month:02}"));
    }
    if let Some((y, m)) = label.split_once('-') {
        let (y, m): (i32, u32) = (y.parse().ok()?, m.parse().ok()?);
        NaiveDate::from_ymd_opt(y, m, 1)?;
        return Some(format!("{y:04}-{m:02}"));
    }
    let y: i32 = label.parse().ok()?;
    Some(format!("{y:04}"))
}

/// Picks the named slices and returns them in chronological order regardless
/// of the order requested.
pub fn select_slices<'a, S: AsRef<str>>(
    slices: &'a [TimeSlice],
    labels: &[S],
) -> Result<Vec<&'a TimeSlice>> {
    let mut picked = Vec::with_capacity(labels.len());
    for label in labels {
        let label = label.as_ref();
        let found = canonical_label(label)
            .and_then(|canon| slices.iter().position(|s| s.label == canon));
        match found {
            Some(idx) => picked.push(idx),
            None => {
                return Err(CorpusError::UnknownLabel {
                    label: label.to_string(),
                    available: slices
                        .iter()
                        .map(|s| s.label.as_str())
                        .collect::<Vec<_>>()
                        .join(", "),
                })
            }
        }
    }
    picked.sort_unstable();
    picked.dedup();
    Ok(picked.into_iter().map(|i| &slices[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, date: &str) -> Document {
        Document {
            id: id.to_string(),
            timestamp: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
            text: String::new(),
            source: None,
        }
    }

    fn store(docs: Vec<Document>) -> DocumentStore {
        DocumentStore::new(
            docs,
            Provenance {
                path: PathBuf::from("mem"),
                format: CorpusFormat::Jsonl,
            },
        )
    }

    #[test]
    fn jsonl_is_sorted_by_date() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"id":"a","timestamp":"2020-01-05","text":"x"}"#, "\n",
                r#"{"id":"b","timestamp":"2020-06-10","text":"y"}"#, "\n",
                r#"{"id":"c","timestamp":"2020-01-02","text":"z","source":"s"}"#, "\n",
            ),
        )
        .unwrap();
        let (store, report) = ingest_documents(&path, CorpusFormat::Jsonl).unwrap();
        let dates: Vec<String> = store
            .documents()
            .iter()
            .map(|d| d.timestamp.to_string())
            .collect();
        assert_eq!(dates, ["2020-01-02", "2020-01-05", "2020-06-10"]);
        assert_eq!(report.accepted, 3);
        assert_eq!(store.documents()[0].source.as_deref(), Some("s"));
    }

    #[test]
    fn empty_jsonl_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let err = ingest_documents(&path, CorpusFormat::Jsonl).unwrap_err();
        assert!(err.to_string().contains("zero parseable documents"));
    }

    #[test]
    fn bad_records_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"id":"a","timestamp":"2020-01-05","text":"x"}"#, "\n",
                "not json\n",
                r#"{"id":"b","timestamp":"2020-13-40","text":"y"}"#, "\n",
                r#"{"id":"a","timestamp":"2020-02-01","text":"dup"}"#, "\n",
            ),
        )
        .unwrap();
        let (store, report) = ingest_documents(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(report.malformed, 1);
        assert_eq!(report.bad_timestamp, 1);
        assert_eq!(report.duplicate_id, 1);
    }

    #[test]
    fn missing_path_is_an_io_error() {
        let err = ingest_documents(Path::new("/nonexistent/x.jsonl"), CorpusFormat::Jsonl);
        assert!(matches!(err, Err(CorpusError::Io { .. })));
    }

    #[test]
    fn newsgroups_fixture_fields() {
        let dir = tempfile::tempdir().unwrap();
        let group = dir.path().join("rec.sport.hockey");
        fs::create_dir(&group).unwrap();
        fs::write(
            group.join("52550"),
            "From: a@b.c\nSubject: Playoffs\nDate: Mon, 5 Apr 1993 21:06:47 GMT\n\nGreat game last night.\n",
        )
        .unwrap();
        fs::write(
            group.join("52551"),
            "From: d@e.f\nSubject: Re: Playoffs\nDate: 3 Apr 93 14:00:00 EST\n\nAgreed.\n",
        )
        .unwrap();
        fs::write(
            group.join("52552"),
            "From: g@h.i\nSubject: no date here\n\nbody\n",
        )
        .unwrap();
        let (store, report) = ingest_documents(dir.path(), CorpusFormat::NewsgroupsDir).unwrap();
        assert_eq!(report.accepted, 2);
        assert_eq!(report.bad_timestamp, 1);
        let docs = store.documents();
        assert_eq!(docs[0].id, "rec.sport.hockey/52551");
        assert_eq!(docs[0].timestamp, NaiveDate::from_ymd_opt(1993, 4, 3).unwrap());
        assert_eq!(docs[1].timestamp, NaiveDate::from_ymd_opt(1993, 4, 5).unwrap());
        assert!(docs.iter().all(|d| d.source.as_deref() == Some("rec.sport.hockey")));
        assert_eq!(docs[1].text, "Playoffs\nGreat game last night.");
    }

    #[test]
    fn post_dates() {
        let d = |y, m, dd| NaiveDate::from_ymd_opt(y, m, dd);
        assert_eq!(parse_post_date("Fri, 16 Apr 1993 13:52:20 -0400"), d(1993, 4, 16));
        assert_eq!(parse_post_date("Tue, 20 Apr 1993 17:55:23 EDT"), d(1993, 4, 20));
        assert_eq!(parse_post_date("20 April 93 11:00"), d(1993, 4, 20));
        assert_eq!(parse_post_date("garbage"), None);
    }

    #[test]
    fn monthly_slices_keep_empty_months() {
        let s = store(vec![doc("a", "2020-01-05"), doc("b", "2020-01-20"), doc("c", "2020-06-10")]);
        let slices = slice_by_period(&s, Granularity::Month);
        let labels: Vec<&str> = slices.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["2020-01", "2020-02", "2020-03", "2020-04", "2020-05", "2020-06"]);
        let counts: Vec<usize> = slices.iter().map(|s| s.documents.len()).collect();
        assert_eq!(counts, [2, 0, 0, 0, 0, 1]);
        for sl in &slices {
            assert!(sl.period_start < sl.period_end);
            assert!(sl.documents.iter().all(|d| sl.contains(d.timestamp)));
        }
    }

    #[test]
    fn single_document_single_slice() {
        let s = store(vec![doc("a", "2021-12-31")]);
        let slices = slice_by_period(&s, Granularity::Month);
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].documents.len(), 1);
        assert_eq!(slices[0].period_end, NaiveDate::from_ymd_opt(2022, 1, 1).unwrap());
    }

    #[test]
    fn yearly_slices_count_per_year() {
        let s = store(vec![
            doc("a", "2016-02-01"),
            doc("b", "2016-12-31"),
            doc("c", "2017-01-01"),
            doc("d", "2016-07-04"),
            doc("e", "2017-09-09"),
        ]);
        let slices = slice_by_period(&s, Granularity::Year);
        assert_eq!(slices.len(), 2);
        assert_eq!((slices[0].label.as_str(), slices[0].documents.len()), ("2016", 3));
        assert_eq!((slices[1].label.as_str(), slices[1].documents.len()), ("2017", 2));
    }

    #[test]
    fn select_reorders_chronologically() {
        let s = store(vec![doc("a", "2020-01-05"), doc("b", "2020-12-05")]);
        let slices = slice_by_period(&s, Granularity::Month);
        let picked = select_slices(&slices, &["Dec'20", "Jan'20"]).unwrap();
        let labels: Vec<String> = picked.iter().map(|s| s.short_label()).collect();
        assert_eq!(labels, ["Jan'20", "Dec'20"]);

        let all: Vec<&str> = slices.iter().map(|s| s.label.as_str()).collect();
        let picked = select_slices(&slices, &all).unwrap();
        assert_eq!(picked.len(), slices.len());
        assert!(picked.iter().zip(&slices).all(|(a, b)| *a == b));

        let err = select_slices(&slices, &["2020-13"]).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { .. }));
    }

    #[test]
    fn canonical_labels() {
        assert_eq!(canonical_label("Jun'20").as_deref(), Some("2020-06"));
        assert_eq!(canonical_label("Apr'93").as_deref(), Some("1993-04"));
        assert_eq!(canonical_label("2016").as_deref(), Some("2016"));
        assert_eq!(canonical_label("2020-6").as_deref(), Some("2020-06"));
        assert_eq!(canonical_label("2020-13"), None);
        assert_eq!(canonical_label("Foo'20"), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_docs() -> impl Strategy<Value = Vec<Document>> {
            prop::collection::vec((0i64..2000, 0u32..1000), 1..60).prop_map(|v| {
                let base = NaiveDate::from_ymd_opt(2015, 3, 1).unwrap();
                v.into_iter()
                    .map(|(days, id)| Document {
                        id: format!("d{id}"),
                        timestamp: base + chrono::Duration::days(days),
                        text: String::new(),
                        source: None,
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn slicing_partitions_the_store(docs in arb_docs(), monthly in any::<bool>()) {
                let g = if monthly { Granularity::Month } else { Granularity::Year };
                let s = store(docs);
                let slices = slice_by_period(&s, g);
                let total: usize = slices.iter().map(|s| s.documents.len()).sum();
                prop_assert_eq!(total, s.len());
                let mut ids = HashSet::new();
                for sl in &slices {
                    for d in &sl.documents {
                        prop_assert!(ids.insert(d.id.clone()));
                        prop_assert!(sl.contains(d.timestamp));
                    }
                }
                for w in slices.windows(2) {
                    prop_assert!(w[0].period_start < w[1].period_start);
                    prop_assert_eq!(w[0].period_end, w[1].period_start);
                }
                let again = slice_by_period(&s, g);
                prop_assert_eq!(slices, again);
            }
        }
    }
}
