//! The five subcommands. Each one writes into its own run directory and
//! finishes with a manifest listing the files it emitted.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taxifed::eval::{compare, ComparisonReport, MetricsReport, Patience};
use taxifed::fed::history_csv;
use taxifed::ingest::{generate_corpus, write_events, write_trajectories};
use taxifed::nn::Checkpoint;

use crate::artifacts::Run;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{
    self, load_samples, prepare_corpus, samples_csv, samples_rel_path, Mode, PrepareSummary, TrainMetrics,
    EVENTS_FILE, SUMMARY_FILE, TRAJECTORIES_FILE,
};

pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoints/best.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const PARTIAL_RESULTS_FILE: &str = "results.partial.csv";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const MEANS_FILE: &str = "means.csv";
pub const SWEEP_HEADER: &str = "mode,facilities,patience,seed,accuracy,balanced_accuracy,rounds_ran";
pub const MEANS_HEADER: &str = "mode,facilities,patience,n_seeds,mean_accuracy,mean_balanced_accuracy,mean_rounds_ran";

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub trips: usize,
    pub events: usize,
    pub fixes: usize,
    pub facility_ids: Vec<String>,
}

/// Writes a synthetic corpus: `trajectories.csv` and `events.csv`.
pub fn generate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<GenerateSummary, CliError> {
    let corpus = generate_corpus(&cfg.synthetic_config(), cfg.master_seed)?;
    let mut run = Run::start(out, force, "generate", cfg)?;
    let mut buf = Vec::new();
    write_trajectories(&mut buf, &corpus.fixes)?;
    run.write(TRAJECTORIES_FILE, &buf)?;
    buf.clear();
    write_events(&mut buf, &corpus.events)?;
    run.write(EVENTS_FILE, &buf)?;
    run.finish()?;
    Ok(GenerateSummary {
        trips: corpus.n_trips,
        events: corpus.events.len(),
        fixes: corpus.fixes.len(),
        facility_ids: corpus.facility_ids,
    })
}

/// Turns a corpus into per-facility `samples/<id>/samples.csv` files plus
/// `summary.json`.
pub fn prepare(cfg: &ExperimentConfig, corpus: &Path, out: &Path, force: bool) -> Result<PrepareSummary, CliError> {
    let prepared = prepare_corpus(corpus, cfg)?;
    let mut run = Run::start(out, force, "prepare", cfg)?;
    for d in &prepared.datasets {
        run.write(&samples_rel_path(&d.facility_id), &samples_csv(d)?)?;
    }
    run.write(SUMMARY_FILE, &to_json(&prepared.summary))?;
    run.finish()?;
    Ok(prepared.summary)
}

/// Trains one model and writes its best checkpoint, round history and
/// test metrics.
pub fn train(
    cfg: &ExperimentConfig,
    mode: Mode,
    samples: &Path,
    out: &Path,
    force: bool,
    progress: &mut dyn Write,
) -> Result<TrainMetrics, CliError> {
    let datasets = load_samples(samples, &cfg.grid)?;
    let mut run = Run::start(out, force, &format!("train --mode {mode}"), cfg)?;
    let result = pipeline::train(&datasets, cfg, mode, &mut |r, _| {
        let _ = writeln!(
            progress,
            "round {:>4}  val_loss {:.6}  val_bal_acc {:.4}  clients {}",
            r.round,
            r.global_val_loss,
            r.global_val_balanced_accuracy,
            r.participants.len()
        );
    })?;
    let ckpt = Checkpoint::new(&result.outcome.params, cfg.master_seed, None);
    run.write(CHECKPOINT_FILE, ckpt.to_json().as_bytes())?;
    run.write(HISTORY_FILE, history_csv(&result.outcome.history).as_bytes())?;
    run.write(METRICS_FILE, &to_json(&result.metrics))?;
    run.finish()?;
    Ok(result.metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepJob {
    pub mode: Mode,
    /// `None` means every prepared facility.
    pub facilities: Option<usize>,
    pub patience: Patience,
    pub seed: u64,
}

/// Per seed: one single-model job over all facilities, then every
/// (facility count, patience) federated job.
pub fn sweep_plan(cfg: &ExperimentConfig) -> Vec<SweepJob> {
    let mut jobs = Vec::new();
    for i in 0..cfg.sweep.seeds as u64 {
        let seed = cfg.master_seed.wrapping_add(i);
        jobs.push(SweepJob {
            mode: Mode::Single,
            facilities: None,
            patience: cfg.fed.patience,
            seed,
        });
        for &f in &cfg.sweep.facilities {
            for &p in &cfg.sweep.patience {
                jobs.push(SweepJob {
                    mode: Mode::Federated,
                    facilities: Some(f),
                    patience: p,
                    seed,
                });
            }
        }
    }
    jobs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub facilities: usize,
    pub patience: Patience,
    pub seed: u64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub rounds_ran: u32,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mode, self.facilities, self.patience, self.seed, self.accuracy, self.balanced_accuracy, self.rounds_ran
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepMean {
    pub mode: Mode,
    pub facilities: usize,
    pub patience: Patience,
    pub n_seeds: usize,
    pub mean_accuracy: f64,
    pub mean_balanced_accuracy: f64,
    pub mean_rounds_ran: f64,
}

impl SweepMean {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mode,
            self.facilities,
            self.patience,
            self.n_seeds,
            self.mean_accuracy,
            self.mean_balanced_accuracy,
            self.mean_rounds_ran
        )
    }
}

/// Means over seeds per (mode, facilities, patience), in order of first
/// appearance.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<SweepMean> {
    let mut groups: Vec<((Mode, usize, Patience), Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        let key = (r.mode, r.facilities, r.patience);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((mode, facilities, patience), members)| {
            let n = members.len() as f64;
            let mean = |f: fn(&SweepRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
            SweepMean {
                mode,
                facilities,
                patience,
                n_seeds: members.len(),
                mean_accuracy: mean(|r| r.accuracy),
                mean_balanced_accuracy: mean(|r| r.balanced_accuracy),
                mean_rounds_ran: mean(|r| r.rounds_ran as f64),
            }
        })
        .collect()
}

/// Parses a results file written by `sweep`.
pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>, CliError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad = |what: &str| CliError::Data(format!("bad sweep {what} `{}`", rec.iter().collect::<Vec<_>>().join(",")));
        rows.push(SweepRow {
            mode: field(0).parse().map_err(|_| bad("mode"))?,
            facilities: field(1).parse().map_err(|_| bad("facilities"))?,
            patience: field(2).parse().map_err(|_| bad("patience"))?,
            seed: field(3).parse().map_err(|_| bad("seed"))?,
            accuracy: field(4).parse().map_err(|_| bad("accuracy"))?,
            balanced_accuracy: field(5).parse().map_err(|_| bad("balanced_accuracy"))?,
            rounds_ran: field(6).parse().map_err(|_| bad("rounds_ran"))?,
        });
    }
    Ok(rows)
}

/// Runs the sweep matrix. Rows are appended and flushed to
/// `results.partial.csv` as they finish; the complete table is then written
/// atomically to `results.csv` with per-configuration means in `means.csv`,
/// and the partial file is removed.
pub fn sweep(
    cfg: &ExperimentConfig,
    samples: &Path,
    out: &Path,
    force: bool,
    progress: &mut dyn Write,
) -> Result<Vec<SweepRow>, CliError> {
    let datasets = load_samples(samples, &cfg.grid)?;
    let mut run = Run::start(out, force, "sweep", cfg)?;
    let partial_path = out.join(PARTIAL_RESULTS_FILE);
    let mut partial = File::create(&partial_path).map_err(|e| CliError::io(&partial_path, e))?;
    let mut append = |line: &str| -> Result<(), CliError> {
        writeln!(partial, "{line}")
            .and_then(|_| partial.flush())
            .map_err(|e| CliError::io(&partial_path, e))
    };
    append(SWEEP_HEADER)?;

    let jobs = sweep_plan(cfg);
    let mut rows = Vec::with_capacity(jobs.len());
    for (i, job) in jobs.iter().enumerate() {
        let mut job_cfg = cfg.clone();
        job_cfg.master_seed = job.seed;
        job_cfg.fed.facilities = job.facilities;
        job_cfg.fed.patience = job.patience;
        let result = pipeline::train(&datasets, &job_cfg, job.mode, &mut |_, _| {})?;
        let row = SweepRow {
            mode: job.mode,
            facilities: result.metrics.facilities.len(),
            patience: job.patience,
            seed: job.seed,
            accuracy: result.metrics.test.accuracy,
            balanced_accuracy: result.metrics.test.balanced_accuracy,
            rounds_ran: result.metrics.rounds_ran,
        };
        append(&row.csv_line())?;
        let _ = writeln!(progress, "[{}/{}] {}", i + 1, jobs.len(), row.csv_line());
        rows.push(row);
    }

    let mut table = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        table += &r.csv_line();
        table.push('\n');
    }
    run.write(RESULTS_FILE, table.as_bytes())?;
    let mut means = format!("{MEANS_HEADER}\n");
    for m in sweep_means(&rows) {
        means += &m.csv_line();
        means.push('\n');
    }
    run.write(MEANS_FILE, means.as_bytes())?;
    std::fs::remove_file(&partial_path).map_err(|e| CliError::io(&partial_path, e))?;
    run.finish()?;
    Ok(rows)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MetricsFile {
    Train(Box<TrainMetrics>),
    Report(MetricsReport),
}

/// Loads either a `train` metrics file or a bare metrics report.
pub fn read_metrics(path: &Path) -> Result<MetricsReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed: MetricsFile = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(match parsed {
        MetricsFile::Train(t) => t.test,
        MetricsFile::Report(r) => r,
    })
}

/// Compares a single-model and a federated metrics file.
pub fn compare_files(
    cfg: &ExperimentConfig,
    single: &Path,
    federated: &Path,
    out: &Path,
    force: bool,
) -> Result<ComparisonReport, CliError> {
    let report = compare(&read_metrics(single)?, &read_metrics(federated)?)?;
    let mut run = Run::start(out, force, "compare", cfg)?;
    run.write(COMPARISON_FILE, &to_json(&report))?;
    run.finish()?;
    Ok(report)
}

/// Default run directory for a command under the configured output root.
pub fn default_out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_is_the_full_matrix() {
        let cfg = ExperimentConfig::default();
        let jobs = sweep_plan(&cfg);
        let seeds = cfg.sweep.seeds as usize;
        assert_eq!(jobs.len(), 3 * 3 * seeds + seeds);
        assert_eq!(jobs.iter().filter(|j| j.mode == Mode::Single).count(), seeds);
        let mut combos: Vec<(usize, Patience)> = jobs
            .iter()
            .filter(|j| j.mode == Mode::Federated && j.seed == 0)
            .map(|j| (j.facilities.unwrap(), j.patience))
            .collect();
        combos.dedup();
        assert_eq!(combos.len(), 9);
        assert!(combos.contains(&(16, Patience::Infinite)));
        assert!(combos.contains(&(4, Patience::Rounds(10))));
    }

    #[test]
    fn sweep_rows_round_trip() {
        let row = SweepRow {
            mode: Mode::Federated,
            facilities: 8,
            patience: Patience::Infinite,
            seed: 3,
            accuracy: 0.1 + 0.2,
            balanced_accuracy: 0.5,
            rounds_ran: 300,
        };
        let text = format!("{SWEEP_HEADER}\n{}\n", row.csv_line());
        assert_eq!(read_sweep_csv(&text).unwrap(), vec![row]);
    }

    #[test]
    fn means_group_by_configuration() {
        let row = |mode, facilities, seed, accuracy| SweepRow {
            mode,
            facilities,
            patience: Patience::Rounds(10),
            seed,
            accuracy,
            balanced_accuracy: accuracy / 2.0,
            rounds_ran: seed as u32 + 1,
        };
        let rows = [
            row(Mode::Single, 4, 0, 0.5),
            row(Mode::Federated, 4, 0, 0.25),
            row(Mode::Single, 4, 1, 1.0),
            row(Mode::Federated, 4, 1, 0.75),
        ];
        let means = sweep_means(&rows);
        assert_eq!(means.len(), 2);
        assert_eq!(means[0].mode, Mode::Single);
        assert_eq!(means[0].mean_accuracy, 0.75);
        assert_eq!(means[1].mean_accuracy, 0.5);
        assert_eq!(means[1].mean_balanced_accuracy, 0.25);
        assert_eq!(means[1].mean_rounds_ran, 1.5);
        assert_eq!(means[1].n_seeds, 2);
    }
}
