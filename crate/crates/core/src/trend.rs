//! Base-term vs. relative-term distance series across slice models.
//!
//! Each cell holds the scaled cosine distance `(1 - cos) / 2` between the base
//! term and one relative term in one slice's model. Cells where either term is
//! absent stay `Missing` internally and are written as `0.0` only on export.
//! Per row, the largest present value is flagged `max` and the smallest `min`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cluster::{topic_cluster, ClusterError, KMeansParams, TopicCluster};
use crate::embedding::{cosine_similarity, pair_distance, scaled_distance, EmbeddingModel, PairDistance};

#[derive(Debug, Error)]
pub enum TrendError {
    #[error("no model for slice '{0}'")]
    NoModel(String),
    #[error("base term '{0}' is absent from every requested model")]
    DegenerateQuery(String),
    #[error("a trend query needs at least one relative term and one slice")]
    EmptyQuery,
    #[error("a plot needs at least 2 slices, got {0}")]
    TooFewSlices(usize),
    #[error("need at least 2 terms present in the model, found {0}")]
    TooFewTerms(usize),
    #[error("unknown trend mode '{0}' (expected word_pair or centroid_pair)")]
    UnknownMode(String),
    #[error("malformed trend CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrendError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMode {
    /// Distance between the two word vectors.
    #[default]
    WordPair,
    /// Distance between the topic centroids of the two terms.
    CentroidPair,
}

impl FromStr for TrendMode {
    type Err = TrendError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word_pair" | "word" => Ok(Self::WordPair),
            "centroid_pair" | "centroid" => Ok(Self::CentroidPair),
            other => Err(TrendError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendQuery {
    pub base_term: String,
    pub relative_terms: Vec<String>,
    /// Chronological.
    pub slice_labels: Vec<String>,
    pub mode: TrendMode,
    /// Neighborhood size and k for `CentroidPair` mode.
    pub neighborhood_size: usize,
    pub cluster_k: usize,
    pub cluster_seed: u64,
}

impl TrendQuery {
    pub fn word_pair(base: &str, relative: &[&str], labels: &[&str]) -> Self {
        Self {
            base_term: base.to_string(),
            relative_terms: relative.iter().map(|s| s.to_string()).collect(),
            slice_labels: labels.iter().map(|s| s.to_string()).collect(),
            mode: TrendMode::WordPair,
            neighborhood_size: 100,
            cluster_k: 1,
            cluster_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellFlag {
    None,
    Max,
    Min,
    Missing,
}

impl CellFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Max => "max",
            Self::Min => "min",
            Self::Missing => "missing",
        }
    }
}

impl FromStr for CellFlag {
    type Err = TrendError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            "missing" => Ok(Self::Missing),
            other => Err(TrendError::Csv(format!("unknown flag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendCell {
    pub value: PairDistance,
    pub flag: CellFlag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub term: String,
    pub cells: Vec<TrendCell>,
}

impl TrendRow {
    pub fn values(&self) -> Vec<PairDistance> {
        self.cells.iter().map(|c| c.value).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendTable {
    pub query: TrendQuery,
    pub rows: Vec<TrendRow>,
    pub config_hash: Option<String>,
}

/// Flags the first maximum and, among the remaining cells, the first minimum
/// of the present values. Rows with fewer than two present values get no
/// extrema flags.
pub fn annotate_extrema(values: &[PairDistance]) -> Vec<TrendCell> {
    let present: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.value().map(|x| (i, x)))
        .collect();
    let mut flags: Vec<CellFlag> = values
        .iter()
        .map(|v| if v.is_missing() { CellFlag::Missing } else { CellFlag::None })
        .collect();
    if present.len() >= 2 {
        let max = present
            .iter()
            .fold(present[0], |best, &cur| if cur.1 > best.1 { cur } else { best });
        let min = present
            .iter()
            .filter(|(i, _)| *i != max.0)
            .fold(None, |best: Option<(usize, f64)>, &cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            })
            .expect("at least one other present cell");
        flags[max.0] = CellFlag::Max;
        flags[min.0] = CellFlag::Min;
    }
    values
        .iter()
        .zip(flags)
        .map(|(&value, flag)| TrendCell { value, flag })
        .collect()
}

/// Builds the annotated table for `query` from the per-slice models.
pub fn compute_trend(models: &BTreeMap<String, EmbeddingModel>, query: &TrendQuery) -> Result<TrendTable> {
    if query.relative_terms.is_empty() || query.slice_labels.is_empty() {
        return Err(TrendError::EmptyQuery);
    }
    let slice_models: Vec<&EmbeddingModel> = query
        .slice_labels
        .iter()
        .map(|l| models.get(l).ok_or_else(|| TrendError::NoModel(l.clone())))
        .collect::<Result<_>>()?;
    if slice_models.iter().all(|m| !m.vocab.contains(&query.base_term)) {
        return Err(TrendError::DegenerateQuery(query.base_term.clone()));
    }

    let params = KMeansParams {
        seed: query.cluster_seed,
        ..KMeansParams::default()
    };
    let cluster = |m: &EmbeddingModel, term: &str| -> Result<Option<TopicCluster>> {
        if !m.vocab.contains(term) {
            return Ok(None);
        }
        Ok(Some(topic_cluster(m, term, query.neighborhood_size, query.cluster_k, &params)?))
    };
    let base_clusters: Vec<Option<TopicCluster>> = match query.mode {
        TrendMode::WordPair => vec![None; slice_models.len()],
        TrendMode::CentroidPair => slice_models
            .iter()
            .map(|m| cluster(m, &query.base_term))
            .collect::<Result<_>>()?,
    };

    let mut rows = Vec::with_capacity(query.relative_terms.len());
    for term in &query.relative_terms {
        let mut values = Vec::with_capacity(slice_models.len());
        for (m, base_cluster) in slice_models.iter().zip(&base_clusters) {
            let v = match query.mode {
                TrendMode::WordPair => pair_distance(m, &query.base_term, term),
                TrendMode::CentroidPair => match (base_cluster, cluster(m, term)?) {
                    (Some(b), Some(r)) => cosine_similarity(&b.centroid_of_topic, &r.centroid_of_topic)
                        .map(|c| PairDistance::Value(scaled_distance(c)))
                        .unwrap_or(PairDistance::Missing),
                    _ => PairDistance::Missing,
                },
            };
            values.push(v);
        }
        rows.push(TrendRow {
            term: term.clone(),
            cells: annotate_extrema(&values),
        });
    }
    Ok(TrendTable {
        query: query.clone(),
        rows,
        config_hash: None,
    })
}

fn format_value(v: PairDistance) -> String {
    match v {
        PairDistance::Value(x) => format!("{x:.3}"),
        PairDistance::Missing => "0.0".to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| TrendError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// CSV body: a header row, then per term a value row and a `<term>#flags` row.
pub fn render_table_csv(table: &TrendTable) -> String {
    let mut out = String::from("term");
    for label in &table.query.slice_labels {
        write!(out, ",{label}").unwrap();
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&row.term);
        for c in &row.cells {
            write!(out, ",{}", format_value(c.value)).unwrap();
        }
        out.push('\n');
        write!(out, "{}#flags", row.term).unwrap();
        for c in &row.cells {
            write!(out, ",{}", c.flag.as_str()).unwrap();
        }
        out.push('\n');
    }
    if let Some(hash) = &table.config_hash {
        writeln!(out, "# config_hash {hash}").unwrap();
    }
    out
}

pub fn export_table_csv(table: &TrendTable, path: &Path) -> Result<()> {
    write_file(path, &render_table_csv(table))
}

/// Table as read back from CSV; values carry 3 fractional digits.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable {
    pub labels: Vec<String>,
    pub rows: Vec<(String, Vec<TrendCell>)>,
}

pub fn parse_table_csv(text: &str) -> Result<ParsedTable> {
    let bad = |m: String| TrendError::Csv(m);
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("term") {
        return Err(bad("header must start with 'term'".into()));
    }
    let labels: Vec<String> = cols.map(str::to_string).collect();
    let mut rows = Vec::new();
    while let Some(values_line) = lines.next() {
        let flags_line = lines
            .next()
            .ok_or_else(|| bad(format!("no flags row after '{values_line}'")))?;
        let mut v = values_line.split(',');
        let mut f = flags_line.split(',');
        let term = v.next().unwrap_or_default().to_string();
        if f.next() != Some(format!("{term}#flags").as_str()) {
            return Err(bad(format!("expected '{term}#flags' row")));
        }
        let values: Vec<&str> = v.collect();
        let flags: Vec<CellFlag> = f.map(str::parse).collect::<Result<_>>()?;
        if values.len() != labels.len() || flags.len() != labels.len() {
            return Err(bad(format!("row '{term}' has the wrong number of cells")));
        }
        let cells = values
            .iter()
            .zip(flags)
            .map(|(s, flag)| {
                let value = if flag == CellFlag::Missing {
                    PairDistance::Missing
                } else {
                    PairDistance::Value(s.parse().map_err(|e| bad(format!("'{s}': {e}")))?)
                };
                Ok(TrendCell { value, flag })
            })
            .collect::<Result<_>>()?;
        rows.push((term, cells));
    }
    Ok(ParsedTable { labels, rows })
}

pub fn render_table_json(table: &TrendTable) -> String {
    let rows: Vec<_> = table
        .rows
        .iter()
        .map(|r| {
            json!({
                "term": r.term,
                "cells": r.cells.iter().map(|c| json!({
                    "value": c.value.value(),
                    "flag": c.flag.as_str(),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let doc = json!({
        "metric": "pair distance (0 = interchangeable, 1 = unrelated)",
        "query": table.query,
        "rows": rows,
        "config_hash": table.config_hash,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("json value serializes");
    s.push('\n');
    s
}

pub fn export_table_json(table: &TrendTable, path: &Path) -> Result<()> {
    write_file(path, &render_table_json(table))
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart of every row against the slice axis, y fixed to `[0, 1]`.
/// Missing cells break a row's line; isolated points are drawn as markers only.
pub fn render_plot_svg(table: &TrendTable) -> Result<String> {
    let labels = &table.query.slice_labels;
    if labels.len() < 2 {
        return Err(TrendError::TooFewSlices(labels.len()));
    }
    let (width, height) = (760.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 50.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_of = |i: usize| left + plot_w * i as f64 / (labels.len() - 1) as f64;
    let y_of = |v: f64| top + plot_h * (1.0 - v);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    if let Some(hash) = &table.config_hash {
        writeln!(s, "<!-- config_hash {} -->", xml_escape(hash)).unwrap();
    }
    writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">Base term: {}</text>"#,
        left + plot_w / 2.0,
        xml_escape(&table.query.base_term)
    )
    .unwrap();

    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = y_of(v);
        writeln!(
            s,
            r##"<line x1="{left:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            left + plot_w
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            left - 8.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<line x1="{left:.2}" y1="{top:.2}" x2="{left:.2}" y2="{:.2}" stroke="#333333"/>"##,
        top + plot_h
    )
    .unwrap();
    writeln!(
        s,
        r##"<line x1="{left:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#333333"/>"##,
        top + plot_h,
        left + plot_w,
        top + plot_h
    )
    .unwrap();
    for (i, label) in labels.iter().enumerate() {
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x_of(i),
            top + plot_h + 20.0,
            xml_escape(label)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">pair distance (0 = interchangeable, 1 = unrelated)</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    )
    .unwrap();

    for (r, row) in table.rows.iter().enumerate() {
        let color = PALETTE[r % PALETTE.len()];
        writeln!(s, r#"<g class="series" data-term="{}">"#, xml_escape(&row.term)).unwrap();
        let mut segment: Vec<(f64, f64)> = Vec::new();
        let flush = |segment: &mut Vec<(f64, f64)>, s: &mut String| {
            if segment.len() >= 2 {
                let pts: Vec<String> = segment.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    pts.join(" ")
                )
                .unwrap();
            }
            segment.clear();
        };
        for (i, cell) in row.cells.iter().enumerate() {
            match cell.value {
                PairDistance::Value(v) => segment.push((x_of(i), y_of(v))),
                PairDistance::Missing => flush(&mut segment, &mut s),
            }
        }
        flush(&mut segment, &mut s);
        for (i, cell) in row.cells.iter().enumerate() {
            let (fill, y) = match (cell.flag, cell.value) {
                (CellFlag::Missing, _) => ("#3366ff", y_of(0.0)),
                (CellFlag::Max, PairDistance::Value(v)) => ("#e03131", y_of(v)),
                (CellFlag::Min, PairDistance::Value(v)) => ("#2f9e44", y_of(v)),
                (_, PairDistance::Value(v)) => (color, y_of(v)),
                (_, PairDistance::Missing) => unreachable!("missing values carry the missing flag"),
            };
            writeln!(
                s,
                r#"<circle class="{}" cx="{:.2}" cy="{y:.2}" r="4" fill="{fill}" stroke="{color}"/>"#,
                cell.flag.as_str(),
                x_of(i)
            )
            .unwrap();
        }
        writeln!(s, "</g>").unwrap();

        let ly = top + 10.0 + 22.0 * r as f64;
        let lx = left + plot_w + 20.0;
        writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#,
            lx + 24.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            xml_escape(&row.term)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn export_plot_svg(table: &TrendTable, path: &Path) -> Result<()> {
    write_file(path, &render_plot_svg(table)?)
}

/// 2-D coordinates of the present `terms` on the top two principal axes of
/// their vectors. Each axis is oriented so its largest-magnitude loading is
/// positive.
pub fn project_terms(model: &EmbeddingModel, terms: &[String]) -> Result<Vec<(String, [f64; 2])>> {
    let present: Vec<(&String, &[f64])> = terms
        .iter()
        .filter_map(|t| model.vector(t).map(|v| (t, v)))
        .collect();
    let n = present.len();
    if n < 2 {
        return Err(TrendError::TooFewTerms(n));
    }
    let d = model.dim();
    let mean: Vec<f64> = (0..d)
        .map(|j| present.iter().map(|(_, v)| v[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| present[i].1[j] - mean[j]);
    // Eigen-decomposing the n×n Gram matrix is cheaper than the d×d
    // covariance when only a handful of terms are plotted.
    let gram = &centered * centered.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let mut coords = vec![[0.0; 2]; n];
    for (c, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 * scale || lambda <= 0.0 {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        let axis = centered.transpose() * u / lambda.sqrt();
        let lead = axis
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (j, &x)| if x.abs() > best.1.abs() { (j, x) } else { best });
        let sign = if lead.1 < 0.0 { -1.0 } else { 1.0 };
        for (i, row) in coords.iter_mut().enumerate() {
            row[c] = sign * u[i] * lambda.sqrt();
        }
    }
    Ok(present
        .into_iter()
        .zip(coords)
        .map(|((t, _), xy)| (t.clone(), xy))
        .collect())
}

pub fn render_projection_svg(model: &EmbeddingModel, terms: &[String]) -> Result<String> {
    let points = project_terms(model, terms)?;
    let (width, height, pad) = (560.0, 560.0, 60.0);
    let extent = points
        .iter()
        .flat_map(|(_, p)| p.iter().map(|x| x.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let half = (width - 2.0 * pad) / 2.0;
    let to_px = |p: [f64; 2]| {
        (
            width / 2.0 + half * p[0] / extent,
            height / 2.0 - half * p[1] / extent,
        )
    };
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="13">"#
    )
    .unwrap();
    writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="28" text-anchor="middle" font-size="15">{}</text>"#,
        width / 2.0,
        xml_escape(&model.slice_label)
    )
    .unwrap();
    writeln!(
        s,
        r##"<line x1="{pad}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#cccccc"/>"##,
        height / 2.0,
        width - pad,
        height / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r##"<line x1="{:.2}" y1="{pad}" x2="{:.2}" y2="{:.2}" stroke="#cccccc"/>"##,
        width / 2.0,
        width / 2.0,
        height - pad
    )
    .unwrap();
    for (term, p) in &points {
        let (x, y) = to_px(*p);
        writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="#1f77b4"/>"##).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 8.0, y - 6.0, xml_escape(term)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn export_projection_svg(model: &EmbeddingModel, terms: &[String], path: &Path) -> Result<()> {
    write_file(path, &render_projection_svg(model, terms)?)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
