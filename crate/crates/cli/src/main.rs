//! `rumex`: rumour verification with post-hoc explanation generation and
//! LLM-judged evaluation, staged as resumable subcommands with on-disk
//! handoff.

mod commands;
mod config;
mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{EvaluateArgs, ExplainArgs, IngestArgs};
use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "rumex", version, about = "Rumour verification and explanation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON pipeline configuration; CLI flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (threads.jsonl + feature sidecars).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Fixture kind: separable | suitability.
        #[arg(long, default_value = "separable")]
        kind: String,
        #[arg(long, default_value_t = 30)]
        threads: usize,
        #[arg(long, default_value_t = 8)]
        embed_dim: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Comma-separated event (fold) names.
        #[arg(long, value_delimiter = ',', default_values_t = vec!["alpha".to_string(), "beta".to_string()])]
        events: Vec<String>,
    },
    /// Parse threads, clean text, apply the suitability filter, attach
    /// feature sidecars, and write the canonical thread store.
    Ingest {
        /// PHEME-style directory (event/thread-id/...).
        #[arg(long, conflicts_with = "jsonl")]
        pheme_dir: Option<PathBuf>,
        /// JSONL thread file.
        #[arg(long)]
        jsonl: Option<PathBuf>,
        /// Embedding sidecar (JSON: post_id -> vector).
        #[arg(long, requires = "stance")]
        embeddings: Option<PathBuf>,
        /// Stance sidecar (JSON: post_id -> vector).
        #[arg(long, requires = "embeddings")]
        stance: Option<PathBuf>,
        /// Label-mapping overrides (JSON, thread_id -> label).
        #[arg(long)]
        label_overrides: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the verifier; optionally run leave-one-event-out evaluation.
    Train {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also run leave-one-event-out cross-validation.
        #[arg(long)]
        loco: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        hidden_branch: Option<usize>,
        #[arg(long)]
        hidden_stance: Option<usize>,
        #[arg(long)]
        attention_heads: Option<usize>,
        #[arg(long)]
        edge_dropout: Option<f64>,
    },
    /// Score post importance and generate explanation candidates.
    Explain {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attribution methods to run (ig, sv).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Integration steps for integrated gradients.
        #[arg(long)]
        steps: Option<usize>,
        /// Sampled permutations for Shapley values.
        #[arg(long)]
        permutations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Shapley mode: auto (sampling) or exact (refuses > 12 posts).
        #[arg(long, default_value = "auto")]
        sv_mode: String,
        /// Only process threads passing the suitability filter.
        #[arg(long)]
        suitable_only: bool,
        /// External summarizer endpoint; omitted = deterministic stub.
        #[arg(long)]
        summarizer_endpoint: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Judge explanation candidates with the configured evaluator and build
    /// the per-kind report.
    Evaluate {
        #[arg(long)]
        candidates_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluator mode: stub | http.
        #[arg(long)]
        evaluator: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        base_url: Option<String>,
        /// Environment variable holding the API key (http mode).
        #[arg(long)]
        api_key_env: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        runs: Option<usize>,
        /// Also run the temperature-consistency probe.
        #[arg(long)]
        probe: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rebuild the evaluation report from stored verdicts.
    Report {
        #[arg(long)]
        verdicts_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn base_config(cfg: &ConfigArgs) -> anyhow::Result<PipelineConfig> {
    match &cfg.config {
        Some(path) => PipelineConfig::load(path),
        None => Ok(PipelineConfig::default()),
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out,
            kind,
            threads,
            embed_dim,
            seed,
            events,
        } => commands::cmd_synth(&out, &kind, threads, embed_dim, seed, &events),
        Command::Ingest {
            pheme_dir,
            jsonl,
            embeddings,
            stance,
            label_overrides,
            out,
        } => commands::cmd_ingest(IngestArgs {
            pheme_dir: pheme_dir.as_deref(),
            jsonl: jsonl.as_deref(),
            embeddings: embeddings.as_deref(),
            stance: stance.as_deref(),
            label_overrides: label_overrides.as_deref(),
            out: &out,
        }),
        Command::Train {
            store,
            out,
            loco,
            cfg,
            epochs,
            lr,
            seed,
            batch_size,
            hidden_branch,
            hidden_stance,
            attention_heads,
            edge_dropout,
        } => {
            let mut config = base_config(&cfg)?;
            let m = &mut config.model;
            if let Some(v) = epochs {
                m.epochs = v;
            }
            if let Some(v) = lr {
                m.lr = v;
            }
            if let Some(v) = seed {
                m.seed = v;
            }
            if let Some(v) = batch_size {
                m.batch_size = v;
            }
            if let Some(v) = hidden_branch {
                m.hidden_branch = v;
            }
            if let Some(v) = hidden_stance {
                m.hidden_stance = v;
            }
            if let Some(v) = attention_heads {
                m.attention_heads = v;
            }
            if let Some(v) = edge_dropout {
                m.edge_dropout = v;
            }
            commands::cmd_train(&store, &out, &config, loco)
        }
        Command::Explain {
            store,
            checkpoint,
            out,
            methods,
            steps,
            permutations,
            seed,
            sv_mode,
            suitable_only,
            summarizer_endpoint,
            cfg,
        } => {
            let mut config = base_config(&cfg)?;
            if let Some(methods) = methods {
                config.methods = methods
                    .iter()
                    .map(|m| m.parse().map_err(|e: String| anyhow::anyhow!(e)))
                    .collect::<anyhow::Result<_>>()?;
            }
            if let Some(v) = steps {
                config.attribution.ig_steps = v;
            }
            if let Some(v) = permutations {
                config.attribution.sv_permutations = v;
            }
            if let Some(v) = seed {
                config.attribution.seed = v;
            }
            if let Some(endpoint) = summarizer_endpoint {
                config.summarizer.endpoint = Some(endpoint);
            }
            commands::cmd_explain(
                ExplainArgs {
                    store: &store,
                    checkpoint: &checkpoint,
                    out: &out,
                    suitable_only,
                    sv_mode: &sv_mode,
                },
                &config,
            )
        }
        Command::Evaluate {
            candidates_dir,
            out,
            evaluator,
            model,
            base_url,
            api_key_env,
            temperature,
            runs,
            probe,
            cfg,
        } => {
            let mut config = base_config(&cfg)?;
            let e = &mut config.evaluator;
            if let Some(v) = evaluator {
                e.mode = v;
            }
            if let Some(v) = model {
                e.model = v;
            }
            if let Some(v) = base_url {
                e.base_url = v;
            }
            if let Some(v) = api_key_env {
                e.api_key_env = v;
            }
            if let Some(v) = temperature {
                e.temperature = v;
            }
            if let Some(v) = runs {
                e.runs = v;
            }
            commands::cmd_evaluate(
                EvaluateArgs {
                    candidates_dir: &candidates_dir,
                    out: &out,
                    probe,
                },
                &config,
            )
        }
        Command::Report { verdicts_dir, out } => commands::cmd_report(&verdicts_dir, &out),
    }
}
