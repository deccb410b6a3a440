//! `cryoloop` command-line interface.
//!
//! Every subcommand works on a project directory (see `--project-dir`).
//! Success exits 0; failure exits 1 with a single JSON line on stderr:
//! `{"error":{"kind":"...","message":"..."}}`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cryoloop::campaign::{Project, UpdateOutcome};
use cryoloop::optimizer::{PoolKind, SearchMode};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cryoloop", version, about = "Closed-loop cryoprotectant formulation discovery")]
struct Cli {
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file (defaults to <project-dir>/cryoloop.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Project directory.
    #[arg(long, global = true, default_value = ".")]
    project_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pool {
    General,
    DmsoFree,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Random,
    Bo,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw literature records into data/parsed.csv.
    Parse {
        /// Raw records CSV (defaults to the configured literature path).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit the literature-only stage-0 checkpoint.
    Train {
        /// Refit stage 0 even if it exists (only before later stages).
        #[arg(long)]
        force: bool,
    },
    /// Refit on literature plus all wet-lab rows into a new checkpoint.
    Update,
    /// Generate a candidate table for the latest stage.
    Candidates {
        #[arg(long, value_enum)]
        pool: Pool,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Number of candidates (defaults to the configured count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Build the 20-row slate and validation template for the latest stage.
    NextBatch {
        /// Also write a template for this wet-lab capacity (6 to 12).
        #[arg(long)]
        capacity: Option<usize>,
    },
    /// Ingest a filled validation template and refit.
    Ingest { filled_template: PathBuf },
    /// Frozen-checkpoint evaluation across stages.
    Evaluate,
    /// Interpretability artifacts for the latest checkpoint.
    Explain,
    /// Run parse, fit, candidates, slate, evaluation and explanation.
    RunStage,
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::FAILURE
}

fn describe(o: &UpdateOutcome) -> String {
    match o {
        UpdateOutcome::Created { stage } => format!("wrote stage_{stage}/checkpoint.json"),
        UpdateOutcome::UpToDate { stage } => format!("stage {stage} checkpoint is up to date"),
    }
}

fn run(cli: Cli) -> cryoloop::Result<()> {
    let project = Project::open(&cli.project_dir, cli.config.as_deref(), cli.seed)?;
    let show = |paths: &[PathBuf]| {
        for p in paths {
            println!("wrote {}", p.display());
        }
    };
    match cli.command {
        Command::Parse { input } => {
            let (s, written) = project.parse(input.as_deref())?;
            show(&written);
            println!(
                "{} records, {} rejected, {} warnings; {} unique formulations, {} features ({} active)",
                s.records, s.rejected, s.warnings, s.unique_formulations, s.features, s.active_features
            );
        }
        Command::Train { force } => println!("{}", describe(&project.train(force)?)),
        Command::Update => println!("{}", describe(&project.update()?)),
        Command::Candidates { pool, mode, count } => {
            let pool = match pool {
                Pool::General => PoolKind::General,
                Pool::DmsoFree => PoolKind::DmsoFree,
            };
            let mode = match mode {
                Mode::Random => SearchMode::Random,
                Mode::Bo => SearchMode::BayesOpt,
            };
            show(&[project.candidates(pool, mode, count)?]);
        }
        Command::NextBatch { capacity } => show(&project.next_batch(capacity)?),
        Command::Ingest { filled_template } => {
            let s = project.ingest(&filled_template)?;
            for w in &s.warnings {
                println!("warning: {w}");
            }
            for r in &s.rejected {
                println!("rejected: {r}");
            }
            println!(
                "accepted {} rows, rejected {}, skipped {} blank",
                s.accepted,
                s.rejected.len(),
                s.skipped_blank
            );
            if let Some(u) = &s.update {
                println!("{}", describe(u));
            }
        }
        Command::Evaluate => {
            let (reports, written) = project.evaluate()?;
            show(&written);
            for r in reports {
                println!(
                    "stage {}: n={} rmse={:.2} mae={:.2} coverage_1s={:.2} cumulative_r2={}",
                    r.stage,
                    r.batch.n,
                    r.batch.rmse,
                    r.batch.mae,
                    r.batch.coverage_1s,
                    r.prospective_cumulative_r2.map_or("n/a".into(), |v| format!("{v:.3}"))
                );
            }
        }
        Command::Explain => show(&project.explain()?),
        Command::RunStage => {
            let m = project.run_stage()?;
            for s in &m.steps {
                for a in &s.artifacts {
                    println!("{}: wrote {a}", s.step);
                }
            }
            if let Some(k) = m.stage {
                println!("stage {k} complete");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
