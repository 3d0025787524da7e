use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vfcfinder_cli::commands::{self, BuildOptions};
use vfcfinder_cli::service::{self, AppState, ServiceConfig, STORE_ENV};
use vfcfinder_core::dataset::{DEFAULT_FOLDS, DEFAULT_HOLDOUT_FRACTION, DEFAULT_NEGATIVE_RATIO};
use vfcfinder_core::pipeline::Ensemble;
use vfcfinder_core::ranker::{load_model, RankParams};

#[derive(Parser)]
#[command(name = "vfcfinder", version, about = "Rank candidate fixing commits for security advisories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the source repository of a registry package.
    Resolve {
        /// PyPI, npm, RubyGems, Packagist, NuGet, crates.io or Maven.
        ecosystem: String,
        /// Package name; `groupId:artifactId` for Maven.
        package: String,
        /// Answer from recorded responses instead of the network.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Rank the commits of an advisory's release windows.
    Rank {
        advisory: PathBuf,
        /// Local clone or clone URL.
        #[arg(long)]
        repo: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, default_value = ".vfcfinder/repos")]
        cache: PathBuf,
    },
    /// Mine a directory of OSV documents into a training corpus.
    BuildDataset {
        advisory_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clones live at `<repos>/<owner>/<repo>`; missing ones are cloned.
        #[arg(long, default_value = ".vfcfinder/repos")]
        repos: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        #[arg(long, default_value_t = DEFAULT_HOLDOUT_FRACTION)]
        holdout: f64,
        #[arg(long, default_value_t = DEFAULT_NEGATIVE_RATIO)]
        negative_ratio: usize,
    },
    /// Train the ranking model on the development part of a corpus.
    Train {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a model on the corpus holdout.
    Evaluate {
        corpus: PathBuf,
        model: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Permutation feature importance on the corpus holdout.
    Importance {
        corpus: PathBuf,
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a random sample of negatives for a manual audit.
    AuditSample {
        corpus: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the triage HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, env = STORE_ENV, default_value = "vfcfinder-store.ndjson")]
        store: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = ".vfcfinder/repos")]
        repos: PathBuf,
        /// Static files served under /ui.
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long, default_value_t = service::DEFAULT_WORKERS)]
        workers: usize,
        /// Only rank on explicit request.
        #[arg(long)]
        no_auto_rank: bool,
    },
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Resolve { ecosystem, package, fixtures } => {
            println!("{}", commands::resolve(&ecosystem, &package, fixtures.as_deref())?);
        }
        Command::Rank { advisory, repo, model, top, cache } => {
            print_json(&commands::rank(&advisory, &repo, &model, top, &cache)?)?;
        }
        Command::BuildDataset { advisory_dir, out, repos, seed, folds, holdout, negative_ratio } => {
            let opts = BuildOptions { repos, seed, folds, holdout, negative_ratio };
            let s = commands::build_dataset(&advisory_dir, &out, &opts)?;
            eprintln!(
                "{} advisories, {} rows, {} skipped, {} short of negatives",
                s.advisories,
                s.rows,
                s.skipped.len(),
                s.insufficient_negatives
            );
        }
        Command::Train { corpus, out, rounds, learning_rate, max_depth, seed } => {
            let d = RankParams::default();
            let params = RankParams {
                rounds: rounds.unwrap_or(d.rounds),
                learning_rate: learning_rate.unwrap_or(d.learning_rate),
                max_depth: max_depth.unwrap_or(d.max_depth),
                seed,
                ..d
            };
            print_json(&commands::train(&corpus, &out, &params)?)?;
        }
        Command::Evaluate { corpus, model, json, threshold } => {
            let report = commands::evaluate(&corpus, &model, threshold)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_flat_text());
            }
        }
        Command::Importance { corpus, model, seed } => {
            for (name, v) in commands::importance(&corpus, &model, seed)? {
                println!("{name}\t{v:.6}");
            }
        }
        Command::AuditSample { corpus, n, seed } => {
            print!("{}", commands::audit_sample(&corpus, n, seed)?);
        }
        Command::Serve { port, bind, store, model, repos, ui, workers, no_auto_rank } => {
            let model = match model {
                Some(p) => Some(Ensemble::single(
                    load_model(&p).with_context(|| format!("loading model {}", p.display()))?,
                )),
                None => None,
            };
            let mut cfg = ServiceConfig::new(repos);
            cfg.model = model;
            cfg.ui_dir = ui;
            cfg.workers = workers;
            cfg.auto_rank = !no_auto_rank;
            let addr: SocketAddr = format!("{bind}:{port}").parse().context("bind address")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let state = AppState::open(store.clone(), cfg)
                    .with_context(|| format!("opening store {}", store.display()))?;
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, service::router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
