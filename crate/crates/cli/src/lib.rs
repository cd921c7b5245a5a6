//! Command-line runner for the taxifed simulator: synthetic corpus
//! generation, sample preparation, single and federated training, the
//! experiment sweep and metric comparison.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taxifed::eval::Patience;
use taxifed::nn::{AdamConfig, LocalOptimizer};

use crate::commands::default_out;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{Mode, SAMPLES_DIR};

#[derive(Debug, Parser)]
#[command(name = "taxifed", version, about = "Federated taxi-demand prediction simulator")]
pub struct Cli {
    #[command(flatten)]
    pub globals: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON). Defaults apply to every missing field.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `master_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for this command's outputs.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty run directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for local updates within a round.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trajectory and event corpus.
    Generate,
    /// Locate events and write labelled per-facility samples.
    Prepare {
        /// Corpus directory holding trajectories.csv and events.csv.
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
    },
    /// Train a single pooled model or a federated model.
    Train {
        /// `single` (one pooled model) or `federated` (FedAvg).
        #[arg(long, value_parser = clap::value_parser!(Mode))]
        mode: Mode,
        /// Directory of per-facility samples written by `prepare`.
        #[arg(long, value_name = "DIR")]
        samples: Option<PathBuf>,
        /// Number of facilities to train on.
        #[arg(long)]
        facilities: Option<usize>,
        /// Early-stopping patience in rounds, or `inf`.
        #[arg(long, value_parser = clap::value_parser!(Patience))]
        patience: Option<Patience>,
        /// Maximum number of global rounds.
        #[arg(long)]
        rounds: Option<u32>,
        /// Local optimizer; keeps the configured learning rate.
        #[arg(long, value_enum)]
        local_optimizer: Option<OptimizerKind>,
    },
    /// Run the facilities x patience x seeds experiment matrix.
    Sweep {
        /// Directory of per-facility samples written by `prepare`.
        #[arg(long, value_name = "DIR")]
        samples: Option<PathBuf>,
        /// Number of seeds per configuration.
        #[arg(long)]
        seeds: Option<u32>,
        /// Maximum number of global rounds.
        #[arg(long)]
        rounds: Option<u32>,
    },
    /// Compare a single-model and a federated metrics file.
    Compare {
        single: PathBuf,
        federated: PathBuf,
    },
}

fn learning_rate(opt: &LocalOptimizer) -> f64 {
    match *opt {
        LocalOptimizer::Adam(a) => a.learning_rate,
        LocalOptimizer::Sgd { learning_rate } => learning_rate,
    }
}

/// Loads the config and applies global and per-command flag overrides.
pub fn resolve_config(globals: &GlobalArgs, command: &Command) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &globals.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = globals.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = globals.threads {
        cfg.fed.threads = t;
    }
    match command {
        Command::Train {
            facilities,
            patience,
            rounds,
            local_optimizer,
            ..
        } => {
            if facilities.is_some() {
                cfg.fed.facilities = *facilities;
            }
            if let Some(p) = patience {
                cfg.fed.patience = *p;
            }
            if let Some(r) = rounds {
                cfg.fed.n_rounds = *r;
            }
            if let Some(kind) = local_optimizer {
                let lr = learning_rate(&cfg.model.optimizer);
                cfg.model.optimizer = match (kind, cfg.model.optimizer) {
                    (OptimizerKind::Adam, LocalOptimizer::Adam(a)) => LocalOptimizer::Adam(a),
                    (OptimizerKind::Adam, _) => LocalOptimizer::Adam(AdamConfig {
                        learning_rate: lr,
                        ..AdamConfig::default()
                    }),
                    (OptimizerKind::Sgd, _) => LocalOptimizer::Sgd { learning_rate: lr },
                };
            }
        }
        Command::Sweep { seeds, rounds, .. } => {
            if let Some(s) = seeds {
                cfg.sweep.seeds = *s;
            }
            if let Some(r) = rounds {
                cfg.fed.n_rounds = *r;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes one parsed command line. Progress goes to `progress`, results
/// to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write, progress: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.globals, &cli.command)?;
    let g = &cli.globals;
    let out_or = |name: &str| g.out.clone().unwrap_or_else(|| default_out(&cfg, name));
    let samples_or = |given: &Option<PathBuf>| {
        given
            .clone()
            .unwrap_or_else(|| default_out(&cfg, "prepared").join(SAMPLES_DIR))
    };
    let say = |stdout: &mut dyn Write, text: String| {
        let _ = writeln!(stdout, "{text}");
    };
    match &cli.command {
        Command::Generate => {
            let out = out_or("corpus");
            let s = commands::generate(&cfg, &out, g.force)?;
            say(
                stdout,
                format!(
                    "generated {} trips, {} events, {} fixes for {} facilities into {}",
                    s.trips,
                    s.events,
                    s.fixes,
                    s.facility_ids.len(),
                    out.display()
                ),
            );
        }
        Command::Prepare { corpus } => {
            let corpus = corpus.clone().unwrap_or_else(|| default_out(&cfg, "corpus"));
            let out = out_or("prepared");
            let s = commands::prepare(&cfg, &corpus, &out, g.force)?;
            say(
                stdout,
                format!(
                    "trips {}  events {}  located {}  omitted {}  facilities {}  -> {}",
                    s.trips,
                    s.events,
                    s.located,
                    s.omitted,
                    s.facilities.len(),
                    out.display()
                ),
            );
        }
        Command::Train { mode, samples, .. } => {
            let out = out_or(&format!("train-{mode}"));
            let m = commands::train(&cfg, *mode, &samples_or(samples), &out, g.force, progress)?;
            say(
                stdout,
                format!(
                    "{mode}: accuracy {:.4}  balanced_accuracy {:.4}  best_round {}  rounds {}  -> {}",
                    m.test.accuracy,
                    m.test.balanced_accuracy,
                    m.best_round,
                    m.rounds_ran,
                    out.display()
                ),
            );
        }
        Command::Sweep { samples, .. } => {
            let out = out_or("sweep");
            let rows = commands::sweep(&cfg, &samples_or(samples), &out, g.force, progress)?;
            say(stdout, format!("{} sweep rows -> {}", rows.len(), out.join(commands::RESULTS_FILE).display()));
        }
        Command::Compare { single, federated } => {
            let out = out_or("compare");
            let report = commands::compare_files(&cfg, single, federated, &out, g.force)?;
            say(stdout, report.table());
        }
    }
    Ok(())
}
