use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use topictrend::corpus::{CorpusFormat, Granularity};
use topictrend::embedding::Architecture;
use topictrend::pipeline::{
    cmd_cluster, cmd_ingest, cmd_neighbors, cmd_project, cmd_train, cmd_trend, write_report, ClusterRequest,
    PipelineConfig, PipelineError, SliceOutcome, TrendRequest, OUT_DIR_ENV,
};
use topictrend::trend::TrendMode;

/// Track how topic terms drift toward or away from a base term across time
/// slices of a corpus.
#[derive(Debug, Parser)]
#[command(name = "topictrend", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every stage. Flags override the config file.
#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    format: Option<CorpusFormat>,
    #[arg(long, global = true)]
    granularity: Option<Granularity>,
    /// Stopword file, one word per line
    #[arg(long, global = true)]
    stopwords: Option<PathBuf>,
    #[arg(long, global = true)]
    no_lemmatize: bool,
    #[arg(long, global = true)]
    arch: Option<Architecture>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    vector_size: Option<usize>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    min_count: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Any other training key, e.g. `--set negatives=10`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the corpus and write the document store and slice manifest
    Ingest,
    /// Train one model per slice
    Train {
        /// Slice labels, default all
        #[arg(long, value_delimiter = ',')]
        slices: Vec<String>,
    },
    /// Nearest neighbors of a term in one slice
    Neighbors {
        #[arg(long)]
        slice: String,
        #[arg(long)]
        term: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// k-means over a term's neighborhood in one slice
    Cluster {
        #[arg(long)]
        slice: String,
        #[arg(long)]
        term: String,
        #[arg(long, default_value_t = 100)]
        neighborhood: usize,
        #[arg(long, default_value_t = 1)]
        kmeans_k: usize,
        #[arg(long, default_value_t = 0)]
        kmeans_seed: u64,
    },
    /// Distance of relative terms to a base term across slices
    Trend {
        #[arg(long)]
        base: String,
        #[arg(long, value_delimiter = ',', required = true)]
        terms: Vec<String>,
        /// Slice labels, default all trained slices
        #[arg(long, value_delimiter = ',')]
        slices: Vec<String>,
        #[arg(long, default_value = "word_pair", value_parser = ["word_pair", "centroid_pair"])]
        mode: String,
        #[arg(long, default_value_t = 100)]
        neighborhood: usize,
        #[arg(long, default_value_t = 1)]
        kmeans_k: usize,
        #[arg(long, default_value_t = 0)]
        kmeans_seed: u64,
        /// Directory for the CSV, JSON and SVG files
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 2-D principal-component scatter of terms in one slice
    Project {
        #[arg(long)]
        slice: String,
        #[arg(long, value_delimiter = ',', required = true)]
        terms: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &c.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &c.corpus {
        cfg.corpus = Some(v.clone());
    }
    if let Some(v) = c.format {
        cfg.format = v;
    }
    if let Some(v) = c.granularity {
        cfg.granularity = v;
    }
    if let Some(v) = &c.stopwords {
        cfg.stopwords = Some(v.clone());
    }
    if c.no_lemmatize {
        cfg.lemmatize = false;
    }
    let t = &mut cfg.train;
    if let Some(v) = c.arch {
        t.architecture = v;
    }
    if let Some(v) = c.seed {
        t.seed = v;
    }
    if let Some(v) = c.vector_size {
        t.vector_size = v;
    }
    if let Some(v) = c.window {
        t.window = v;
    }
    if let Some(v) = c.min_count {
        t.min_count = v;
    }
    if let Some(v) = c.epochs {
        t.epochs = v;
    }
    if let Some(v) = c.workers {
        t.workers = v;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Ingest => {
            let s = cmd_ingest(&cfg)?;
            if s.cache_hit {
                println!("cache hit ({}), nothing to do", s.config_hash);
            }
            if let Some(r) = &s.report {
                println!("{} documents accepted, {} skipped", r.accepted, r.skipped());
            }
            for (label, n) in &s.slices {
                println!("{label}: {n} docs");
            }
        }
        Command::Train { slices } => {
            let s = cmd_train(&cfg, &slices)?;
            for (label, outcome) in &s.slices {
                let what = match outcome {
                    SliceOutcome::Trained => "trained",
                    SliceOutcome::Cached => "up to date",
                    SliceOutcome::Skipped => "skipped",
                };
                println!("{label}: {what}");
            }
        }
        Command::Neighbors { slice, term, k } => {
            let report = cmd_neighbors(&cfg, &slice, &term, k)?;
            let name = format!("neighbors_{}_{}.json", report["slice"].as_str().unwrap_or(&slice), report["term"].as_str().unwrap_or(&term));
            let path = write_report(&cfg, &name, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("wrote {}", path.display());
        }
        Command::Cluster {
            slice,
            term,
            neighborhood,
            kmeans_k,
            kmeans_seed,
        } => {
            let req = ClusterRequest {
                slice,
                term,
                neighborhood,
                k: kmeans_k,
                seed: kmeans_seed,
            };
            let report = cmd_cluster(&cfg, &req)?;
            let name = format!(
                "cluster_{}_{}.json",
                report["slice"].as_str().unwrap_or(&req.slice),
                report["cluster"]["seed_term"].as_str().unwrap_or(&req.term)
            );
            let path = write_report(&cfg, &name, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("wrote {}", path.display());
        }
        Command::Trend {
            base,
            terms,
            slices,
            mode,
            neighborhood,
            kmeans_k,
            kmeans_seed,
            out,
        } => {
            let req = TrendRequest {
                base,
                terms,
                slices,
                mode: mode.parse::<TrendMode>()?,
                neighborhood,
                cluster_k: kmeans_k,
                seed: kmeans_seed,
                out,
            };
            let o = cmd_trend(&cfg, &req)?;
            print!("{}", topictrend::trend::render_table_csv(&o.table));
            for p in [Some(&o.csv), Some(&o.json), o.svg.as_ref()].into_iter().flatten() {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Project { slice, terms, out } => {
            let p = cmd_project(&cfg, &slice, &terms, out)?;
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
