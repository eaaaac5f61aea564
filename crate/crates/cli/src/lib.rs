//! `hdlink` command-line interface.
//!
//! Exit status: 0 on success, 1 when inputs fail validation or a stage
//! fails, 2 on usage errors.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hdlink_core::kb::ParseOptions;

mod commands;
pub mod config;
pub mod manifest;

pub use config::RunConfig;
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "hdlink", version, about = "Homonym disambiguation and name-based entity linking")]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for weight initialisation and data order
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Reject KBs whose entities lack exactly one preferred name (default)
    #[arg(long, global = true, conflicts_with = "lenient")]
    strict: bool,
    /// Accept such KBs and report the violations
    #[arg(long, global = true)]
    lenient: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Homonym statistics for a KB
    Stats {
        #[arg(long)]
        kb: PathBuf,
        /// Key-value report
        #[arg(long)]
        out: PathBuf,
        /// Per-homonym table
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Rewrite homonymous names with disambiguators
    Disambiguate {
        #[arg(long)]
        kb: PathBuf,
        /// Two-column species table; required when the KB has a species column
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Audit table (default: <out>.audit.tsv)
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Share of corpus mentions whose gold entity has a homonymous exact-match name
    EstimateAffected {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder
    Train {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Encoder checkpoint
        #[arg(long)]
        out: PathBuf,
        /// TOML file with [encoder] and [train] tables
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss log (default: <out>.loss.tsv)
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also save the final name index
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Link corpus mentions to KB entities
    Link {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prebuilt index; re-encoded from the model when absent
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Strict recall@1 of a predictions file
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tsv: Option<PathBuf>,
        /// KB used to split the score by affected mentions
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// disambiguate, train, link and evaluate in one run
    Pipeline {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip disambiguation and train on the KB as given
        #[arg(long)]
        no_hd: bool,
    },
}

/// Errors that map to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

struct Context {
    seed: u64,
    parse: ParseOptions,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Context {
        seed: cli.global.seed,
        parse: if cli.global.lenient {
            ParseOptions::lenient()
        } else {
            ParseOptions::default()
        },
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    pool.install(|| match cli.command {
        Command::Stats { kb, out, tsv } => commands::stats(&ctx, &kb, &out, tsv.as_deref()),
        Command::Disambiguate { kb, taxonomy, out, audit } => {
            commands::disambiguate(&ctx, &kb, taxonomy.as_deref(), &out, audit.as_deref())
        }
        Command::EstimateAffected { kb, corpus, out } => commands::estimate_affected(&ctx, &kb, &corpus, &out),
        Command::Train { kb, corpus, out, config, epochs, log, index } => commands::train(
            &ctx,
            &commands::TrainArgs {
                kb,
                corpus,
                out,
                config,
                epochs,
                log,
                index,
            },
        ),
        Command::Link { kb, model, corpus, out, index } => {
            commands::link(&ctx, &kb, &model, &corpus, &out, index.as_deref())
        }
        Command::Evaluate { pred, corpus, out, tsv, kb } => {
            commands::evaluate(&ctx, &pred, &corpus, &out, tsv.as_deref(), kb.as_deref())
        }
        Command::Pipeline { kb, taxonomy, train, test, out_dir, config, epochs, no_hd } => commands::pipeline(
            &ctx,
            &commands::PipelineArgs {
                kb,
                taxonomy,
                train,
                test,
                out_dir,
                config,
                epochs,
                no_hd,
            },
        ),
    })
}
