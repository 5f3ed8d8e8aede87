//! Batch CLI over the recommendation pipeline. Stages communicate through
//! artifacts under `--artifacts`; progress and notes go to stderr, structured
//! payloads (single-user records, reports) to stdout.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use motiverec_core::eval::{format_ablation_table, format_metrics_table};
use motiverec_core::gateway::Gateway;
use motiverec_core::ingest::{ColumnRef, ColumnSpec, TableFormat};
use motiverec_core::pipeline::{
    build_gateway, config_fingerprint, load_config, run_ablate, run_annotate, run_augment,
    run_evaluate, run_ingest, run_recommend, Artifacts, BackendChoice, Engine, IngestInputs,
};
use motiverec_core::{Error, Result};

#[derive(Parser)]
#[command(name = "motiverec", version, about = "Motive-annotated retrieval recommender pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Pipeline configuration file (TOML or JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory shared by all stages.
    #[arg(long, global = true, default_value = "artifacts")]
    artifacts: PathBuf,

    /// Text/embedding backend. `http` reads MOTIVEREC_API_BASE,
    /// MOTIVEREC_API_KEY, MOTIVEREC_CHAT_MODEL, MOTIVEREC_EMBED_MODEL and
    /// MOTIVEREC_EMBED_DIM from the environment.
    #[arg(long, global = true, value_enum, default_value_t = Backend::Mock)]
    backend: Backend,

    /// Worker threads; also bounds in-flight backend requests.
    #[arg(long, global = true, default_value_t = 4)]
    jobs: usize,

    /// Seed for the deterministic mock backend.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Reuse cached generations instead of re-calling the backend (augment).
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw interaction/metadata files into the filtered, split dataset.
    Ingest(IngestArgs),
    /// Generate item descriptions and build the item vector index.
    Augment,
    /// Infer motive annotations over chronological interaction bundles.
    Annotate,
    /// Produce ranked recommendations for all users, or one user ad hoc.
    Recommend(RecommendArgs),
    /// Score persisted recommendations against the test split.
    Evaluate,
    /// Run the four-variant feature-removal grid and write the delta report.
    Ablate,
}

#[derive(Args)]
struct IngestArgs {
    /// Interaction table, one event per line.
    #[arg(long)]
    interactions: PathBuf,

    /// Item metadata JSONL (objects with an `item_id` field).
    #[arg(long)]
    items: Option<PathBuf>,

    /// User metadata JSONL (objects with a `user_id` field).
    #[arg(long)]
    users: Option<PathBuf>,

    /// Field delimiter; may be multi-character (e.g. `::`).
    #[arg(long, default_value = "\t")]
    delimiter: String,

    /// The table has no header row; address columns by zero-based index.
    #[arg(long)]
    no_header: bool,

    /// User column: header name, or zero-based index.
    #[arg(long, default_value = "user_id")]
    user_col: String,

    /// Item column: header name, or zero-based index.
    #[arg(long, default_value = "item_id")]
    item_col: String,

    /// Rating column: header name, zero-based index, or `none` for unrated data.
    #[arg(long, default_value = "rating")]
    rating_col: String,

    /// Timestamp column: header name, or zero-based index.
    #[arg(long, default_value = "timestamp")]
    time_col: String,
}

#[derive(Args)]
struct RecommendArgs {
    /// Single-user mode: print one record as JSON instead of writing the
    /// batch artifact.
    #[arg(long)]
    user: Option<String>,

    /// Explicit query text (single-user mode only).
    #[arg(long, requires = "user")]
    query: Option<String>,
}

impl IngestArgs {
    fn into_inputs(self) -> IngestInputs {
        let rating = if self.rating_col.eq_ignore_ascii_case("none") {
            None
        } else {
            Some(ColumnRef::parse(&self.rating_col))
        };
        IngestInputs {
            interactions: self.interactions,
            items: self.items,
            users: self.users,
            format: TableFormat { delimiter: self.delimiter, has_header: !self.no_header },
            columns: ColumnSpec {
                user: ColumnRef::parse(&self.user_col),
                item: ColumnRef::parse(&self.item_col),
                rating,
                timestamp: ColumnRef::parse(&self.time_col),
            },
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.jobs == 0 {
        return Err(Error::Invalid("--jobs must be >= 1".into()));
    }
    let cfg = load_config(cli.global.config.as_deref())?;
    eprintln!("config fingerprint: {}", config_fingerprint(&cfg));
    let artifacts = Artifacts::new(&cli.global.artifacts);

    // The CLI owns the worker pool; stages parallelize inside it, and the
    // gateway separately caps in-flight backend requests at the same bound.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
    pool.install(|| dispatch(cli, cfg, artifacts))
}

fn dispatch(cli: Cli, cfg: motiverec_core::PipelineConfig, artifacts: Artifacts) -> Result<()> {
    let gateway = |cfg: &motiverec_core::PipelineConfig| -> Result<Gateway> {
        let choice = match cli.global.backend {
            Backend::Mock => BackendChoice::Mock,
            Backend::Http => BackendChoice::Http,
        };
        build_gateway(choice, cfg, cli.global.seed, cli.global.jobs)
    };

    match cli.command {
        Command::Ingest(args) => {
            let bundle = run_ingest(&cfg, &artifacts, &args.into_inputs())?;
            let s = &bundle.stats;
            println!(
                "ingest: {} users, {} items, {} events (train/valid/test = {}/{}/{})",
                s.users, s.items, s.interactions, s.train_events, s.valid_events, s.test_events
            );
            println!(
                "filtered: {} rows rejected, {} events under rating gate, {} events by {}-core ({} rounds)",
                s.rejected_rows, s.removed_by_rating, s.removed_by_core, cfg.min_core, s.filter_rounds
            );
        }
        Command::Augment => {
            let report = run_augment(&artifacts, &gateway(&cfg)?, cli.global.resume)?;
            println!(
                "augment: {} items ({} generated, {} degraded, {} from cache)",
                report.total, report.generated, report.degraded, report.from_cache
            );
        }
        Command::Annotate => {
            let report = run_annotate(&cfg, &artifacts, &gateway(&cfg)?)?;
            println!(
                "annotate: {}/{} bundles annotated over {} users ({} skipped, {} users without train events)",
                report.bundles_annotated,
                report.bundles_total,
                report.users_total,
                report.bundles_skipped,
                report.users_without_train_events
            );
            for note in &report.notices {
                eprintln!("note: {note}");
            }
        }
        Command::Recommend(args) => match args.user {
            Some(user) => {
                let engine = Engine::open(cfg.clone(), &artifacts, Arc::new(gateway(&cfg)?))?;
                let record = engine.recommend(&user, args.query.as_deref())?;
                println!("{}", serde_json::to_string_pretty(&record)?);
            }
            None => {
                let report = run_recommend(&cfg, &artifacts, Arc::new(gateway(&cfg)?))?;
                println!("recommend: {} records written", report.records);
                for note in &report.skipped {
                    eprintln!("note: skipped {note}");
                }
            }
        },
        Command::Evaluate => {
            let result = run_evaluate(&cfg, &artifacts)?;
            print!("{}", format_metrics_table(&result, &cfg.top_k_eval));
        }
        Command::Ablate => {
            let report = run_ablate(&cfg, &artifacts, Arc::new(gateway(&cfg)?))?;
            print!("{}", format_ablation_table(&report));
        }
    }
    Ok(())
}
