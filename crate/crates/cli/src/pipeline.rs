//! Corpus preparation and the train/evaluate pipeline shared by the
//! `prepare`, `train` and `sweep` commands.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use taxifed::eval::{self, MetricsReport, Patience, Split};
use taxifed::fed::{
    overlap_expand, partition_by_facility, pool_clients, run_federated_observed, run_single_observed, to_train_set,
    ClientState, FedOutcome, RoundRecord, Transfer,
};
use taxifed::grid::GridSpec;
use taxifed::ingest::{
    build_facility_datasets, merge, parse_events, parse_trajectories, read_samples, write_samples, EventKind,
    FacilityDataset, LabeledSample,
};
use taxifed::nn::{init_params, predict_batch, ModelParams};
use taxifed::seed::{derive_rng, derive_seed};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const SAMPLES_DIR: &str = "samples";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Federated,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Federated => "federated",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Mode::Single),
            "federated" | "fed" => Ok(Mode::Federated),
            _ => Err(format!("unknown mode `{s}`, expected `single` or `federated`")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacilitySummary {
    pub facility_id: String,
    pub samples: usize,
}

/// Counts reported by `prepare`. `located + omitted = events` always holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareSummary {
    /// Pickup events, one per trip.
    pub trips: usize,
    pub events: usize,
    pub located: usize,
    pub omitted: usize,
    /// Located events that fall outside the grid.
    pub skipped: usize,
    pub facilities: Vec<FacilitySummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub datasets: Vec<FacilityDataset>,
    pub summary: PrepareSummary,
}

fn open(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path).map_err(|e| CliError::io(path, e))
}

/// Parses a corpus directory and runs merge, locate, aggregate and label.
pub fn prepare_corpus(dir: &Path, cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let tpath = dir.join(TRAJECTORIES_FILE);
    let epath = dir.join(EVENTS_FILE);
    let fixes = parse_trajectories(open(&tpath)?).map_err(|source| CliError::Input { path: tpath, source })?;
    let events = parse_events(open(&epath)?).map_err(|source| CliError::Input { path: epath, source })?;
    let merged = merge(&fixes, &events);
    let (datasets, skipped) =
        build_facility_datasets(&merged.located, &cfg.grid, &cfg.thresholds, &cfg.synthetic.samples);
    let summary = PrepareSummary {
        trips: events.iter().filter(|e| e.kind == EventKind::Pickup).count(),
        events: events.len(),
        located: merged.located.len(),
        omitted: merged.omitted,
        skipped,
        facilities: datasets
            .iter()
            .map(|d| FacilitySummary {
                facility_id: d.facility_id.clone(),
                samples: d.samples.len(),
            })
            .collect(),
    };
    Ok(Prepared { datasets, summary })
}

/// Relative path of one facility's samples file inside a run directory.
pub fn samples_rel_path(facility_id: &str) -> String {
    format!("{SAMPLES_DIR}/{facility_id}/{SAMPLES_FILE}")
}

pub fn samples_csv(dataset: &FacilityDataset) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_samples(&mut buf, std::slice::from_ref(dataset))?;
    Ok(buf)
}

/// Reads every `<id>/samples.csv` under a samples directory, sorted by id.
pub fn load_samples(dir: &Path, spec: &GridSpec) -> Result<Vec<FacilityDataset>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let file = entry.path().join(SAMPLES_FILE);
        if file.is_file() {
            files.push(file);
        }
    }
    files.sort();
    let mut out: Vec<FacilityDataset> = Vec::new();
    for file in files {
        let sets = read_samples(open(&file)?, spec).map_err(|source| CliError::Input { path: file.clone(), source })?;
        out.extend(sets);
    }
    out.sort_by(|a, b| a.facility_id.cmp(&b.facility_id));
    if let Some(w) = out.windows(2).find(|w| w[0].facility_id == w[1].facility_id) {
        return Err(CliError::Data(format!("facility `{}` appears in more than one samples file", w[0].facility_id)));
    }
    Ok(out)
}

/// Picks `k` facilities uniformly at random (seeded), returned in id order.
/// `None` or `k` equal to the count keeps all of them.
pub fn select_facilities(
    datasets: &[FacilityDataset],
    k: Option<usize>,
    seed: u64,
) -> Result<Vec<FacilityDataset>, CliError> {
    let n = datasets.len();
    if n == 0 {
        return Err(CliError::Data("no prepared facilities".into()));
    }
    let k = k.unwrap_or(n);
    if k == 0 || k > n {
        return Err(CliError::Data(format!("requested {k} facilities but the samples hold {n}")));
    }
    if k == n {
        return Ok(datasets.to_vec());
    }
    let mut rng = derive_rng(seed, "facilities", None, Some(k as u64));
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| datasets[i].clone()).collect())
}

/// Per-facility split with a sub-seed keyed by the facility id.
pub fn split_facilities(
    datasets: &[FacilityDataset],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<Split>, CliError> {
    datasets
        .iter()
        .map(|d| {
            eval::split(d.samples.len(), &cfg.split, derive_seed(seed, "split", Some(&d.facility_id), None)).map_err(
                |e| CliError::Data(format!("facility `{}`: {e}", d.facility_id)),
            )
        })
        .collect()
}

/// Pooled test set: every facility's test samples, in facility order.
pub fn pooled_test(datasets: &[FacilityDataset], splits: &[Split]) -> Vec<LabeledSample> {
    datasets
        .iter()
        .zip(splits)
        .flat_map(|(d, s)| s.test_idx.iter().map(|&i| d.samples[i].clone()))
        .collect()
}

/// Everything `train` writes to `metrics.json`. Mode-agnostic, so a
/// one-facility federated run and the single run compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub test: MetricsReport,
    pub facilities: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub best_round: u32,
    pub rounds_ran: u32,
    pub stopped_early: bool,
    pub patience: Patience,
    pub cross_client_transfers: usize,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub outcome: FedOutcome,
    pub metrics: TrainMetrics,
    /// Clients before any overlap expansion.
    pub clients: Vec<ClientState>,
    pub transfers: Vec<Transfer>,
}

/// Splits, trains in the requested mode, and scores the best-validation
/// parameters on the pooled test set.
pub fn train(
    datasets: &[FacilityDataset],
    cfg: &ExperimentConfig,
    mode: Mode,
    observe: &mut dyn FnMut(&RoundRecord, &ModelParams),
) -> Result<TrainResult, CliError> {
    let seed = cfg.master_seed;
    let chosen = select_facilities(datasets, cfg.fed.facilities, seed)?;
    let splits = split_facilities(&chosen, cfg, seed)?;
    let clients = partition_by_facility(&chosen, &splits)?;
    let test = pooled_test(&chosen, &splits);
    let fed = cfg.fed_config();
    let init = init_params(&cfg.model.layer_widths, derive_seed(seed, "init", None, None))?;

    let (outcome, transfers) = match mode {
        Mode::Single => {
            let pooled = pool_clients(&clients)?;
            (run_single_observed(&pooled, &fed, init, observe)?, Vec::new())
        }
        Mode::Federated => {
            let (expanded, transfers) = overlap_expand(&clients, &cfg.grid, fed.overlap_margin);
            (run_federated_observed(&expanded, &fed, init, observe)?, transfers)
        }
    };

    let test_set = to_train_set(&test);
    let preds = predict_batch(&outcome.params, test_set.x.view());
    let report = MetricsReport::from_predictions(&preds, &test_set.y)?;
    let metrics = TrainMetrics {
        test: report,
        facilities: chosen.iter().map(|d| d.facility_id.clone()).collect(),
        n_train: clients.iter().map(|c| c.train.len()).sum(),
        n_val: clients.iter().map(|c| c.val.len()).sum(),
        best_round: outcome.best_round,
        rounds_ran: outcome.rounds_ran,
        stopped_early: outcome.stopped_early,
        patience: fed.patience,
        cross_client_transfers: transfers.len(),
    };
    Ok(TrainResult {
        outcome,
        metrics,
        clients,
        transfers,
    })
}

/// Balanced accuracy of always predicting the most frequent test label.
pub fn majority_baseline(report: &MetricsReport) -> f64 {
    let rows: Vec<u64> = report.confusion.iter().map(|r| r.iter().sum()).collect();
    let majority = (0..rows.len()).max_by_key(|&k| (rows[k], std::cmp::Reverse(k))).unwrap_or(0);
    let mut truth = Vec::new();
    for (k, &n) in rows.iter().enumerate() {
        truth.extend(std::iter::repeat_n(k, n as usize));
    }
    let preds = vec![majority; truth.len()];
    eval::balanced_accuracy(&preds, &truth).unwrap_or(0.0)
}
