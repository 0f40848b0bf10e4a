use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use contextgpt::pipeline::{BackendKind, EmbedderKind, HttpConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "contextgpt",
    version,
    about = "Context-consistent activity vectors from a chat model"
)]
pub struct Cli {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderArg {
    Hash,
    Http,
}

/// Inputs shared by every command. Individual paths override the files
/// found in `--dataset-dir`.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Directory holding schema.json, phrases.json, template.json,
    /// pool.jsonl and rules.json.
    #[arg(long, global = true, env = "CONTEXTGPT_DATASET_DIR")]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    #[arg(long, global = true)]
    pub phrases: Option<PathBuf>,
    #[arg(long, global = true)]
    pub template: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pool: Option<PathBuf>,
    #[arg(long, global = true)]
    pub rules: Option<PathBuf>,
    /// Similarity threshold for example selection.
    #[arg(long, global = true, default_value_t = 0.5)]
    pub k: f64,
    #[arg(long, global = true, value_enum, default_value_t = BackendArg::Mock)]
    pub backend: BackendArg,
    #[arg(long, global = true, value_enum, default_value_t = EmbedderArg::Hash)]
    pub embedder: EmbedderArg,
    /// Response cache (JSONL). In-memory when omitted.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Embedding side-table; defaults to `<pool>.embeddings.jsonl`.
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 4)]
    pub max_inflight: usize,
    /// JSON file with endpoint, model and retry settings for HTTP backends.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

impl PipelineArgs {
    pub fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.dataset_dir {
            Some(dir) => RunConfig::for_dataset(dir),
            None => {
                let need = |p: &Option<PathBuf>, flag: &str| {
                    p.clone()
                        .ok_or_else(|| anyhow::anyhow!("--{flag} or --dataset-dir is required"))
                };
                RunConfig {
                    schema: need(&self.schema, "schema")?,
                    phrases: need(&self.phrases, "phrases")?,
                    template: need(&self.template, "template")?,
                    pool: need(&self.pool, "pool")?,
                    rules: None,
                    ..RunConfig::for_dataset(".")
                }
            }
        };
        if let Some(p) = &self.schema {
            cfg.schema = p.clone();
        }
        if let Some(p) = &self.phrases {
            cfg.phrases = p.clone();
        }
        if let Some(p) = &self.template {
            cfg.template = p.clone();
        }
        if let Some(p) = &self.pool {
            cfg.pool = p.clone();
        }
        if let Some(p) = &self.rules {
            cfg.rules = Some(p.clone());
        }
        cfg.k = self.k;
        cfg.backend = match self.backend {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Http => BackendKind::Http,
        };
        cfg.embedder = match self.embedder {
            EmbedderArg::Hash => EmbedderKind::Hash,
            EmbedderArg::Http => EmbedderKind::Http,
        };
        cfg.cache = self.cache.clone();
        cfg.embeddings = self.embeddings.clone();
        cfg.max_in_flight = self.max_inflight;
        if let Some(path) = &self.config {
            cfg.http = HttpConfig::load(path)?;
        }
        Ok(cfg)
    }
}

/// A context given inline as JSON or as `@file`.
#[derive(Debug, Clone, Args)]
pub struct ContextArg {
    /// Variable assignments, e.g. '{"speed":"low","environment":"outdoor"}',
    /// or @path to a file holding them.
    #[arg(long)]
    pub context: String,
    /// Window length in seconds; the schema default when omitted.
    #[arg(long)]
    pub z: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the natural-language description of a context.
    Render(ContextArg),
    /// Show the pool examples selected for a context.
    Select(ContextArg),
    /// Run the whole pipeline for one context and print every step.
    Probe {
        #[command(flatten)]
        context: ContextArg,
        /// Stop before calling the model.
        #[arg(long)]
        dry_run: bool,
    },
    /// Produce consistency vectors for a windows file.
    Batch {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run summary JSON; defaults to `<out>.summary.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Compare a vectors file against the rule set.
    Compare {
        #[arg(long = "in")]
        input: PathBuf,
        /// Per-context CSV; the aggregate JSON goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect or edit the example pool.
    #[command(subcommand)]
    Pool(PoolCommand),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum PoolCommand {
    List,
    /// Add one example given as JSON or @file.
    Add {
        #[arg(long)]
        example: String,
    },
    Rm {
        id: String,
    },
    /// Compute missing or stale embeddings.
    Embed,
}
