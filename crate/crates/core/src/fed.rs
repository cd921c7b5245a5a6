//! FedAvg orchestration: facility clients, local training, sample-count
//! weighted aggregation, the optional overlap margin, and the pooled
//! single-model baseline run through the same loop.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::Zip;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, Decision, EarlyStopState, Patience, Split};
use crate::grid::{CellId, CellRect, GridSpec};
use crate::ingest::{FacilityDataset, LabeledSample};
use crate::nn::{loss_batch, predict_batch, train_epoch, BatchPolicy, LocalOptimizer, ModelParams, NnError, TrainSet};
use crate::seed;

pub const HISTORY_HEADER: &str = "round,global_val_loss,global_val_bal_acc,n_participants,elapsed_ms";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("facility id `{0}` appears more than once")]
    DuplicateFacilityId(String),
    #[error("client `{0}` has no training data")]
    EmptyClientData(String),
    #[error("no client updates to aggregate")]
    EmptyUpdateSet,
    #[error("client updates have mismatched parameter shapes")]
    ShapeMismatch,
    #[error("client updates carry zero total samples")]
    ZeroWeight,
    #[error("no clients")]
    NoClients,
    #[error("no validation samples on any client")]
    EmptyValidation,
    #[error("validation loss diverged to {0}")]
    Diverged(f64),
    #[error("{0} datasets but {1} splits")]
    SplitMismatch(usize, usize),
    #[error("invalid federated config: {0}")]
    InvalidConfig(String),
    #[error("round {round}: {source}")]
    Round { round: u32, source: Box<FedError> },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub n_rounds: u32,
    pub local_epochs: u32,
    pub client_fraction: f64,
    pub patience: Patience,
    pub seed: u64,
    /// Overlap expansion in cells; 0 disables sample sharing.
    pub overlap_margin: u32,
    pub optimizer: LocalOptimizer,
    pub batch: BatchPolicy,
    /// Worker threads for local updates within a round.
    pub threads: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_rounds: 300,
            local_epochs: 1,
            client_fraction: 1.0,
            patience: Patience::default(),
            seed: 0,
            overlap_margin: 0,
            optimizer: LocalOptimizer::default(),
            batch: BatchPolicy::default(),
            threads: 1,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: &str| Err(FedError::InvalidConfig(m.to_string()));
        if self.n_rounds < 1 {
            return bad("n_rounds must be >= 1");
        }
        if self.local_epochs < 1 {
            return bad("local_epochs must be >= 1");
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad("client_fraction must lie in (0, 1]");
        }
        if self.batch.batch_size == 0 {
            return bad("batch.batch_size must be >= 1");
        }
        if self.threads == 0 {
            return bad("threads must be >= 1");
        }
        let lr = match self.optimizer {
            LocalOptimizer::Adam(a) => {
                if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
                    return bad("adam betas must lie in [0, 1) and epsilon must be positive");
                }
                a.learning_rate
            }
            LocalOptimizer::Sgd { learning_rate } => learning_rate,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Where a training sample originally lives: its facility and its index in
/// that facility's own training list.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub facility_id: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub facility_id: String,
    pub train: Vec<LabeledSample>,
    /// Origin of each entry of `train`, index-aligned.
    pub train_origin: Vec<SampleRef>,
    pub val: Vec<LabeledSample>,
    pub n_k: usize,
}

impl ClientState {
    pub fn new(facility_id: impl Into<String>, train: Vec<LabeledSample>, val: Vec<LabeledSample>) -> Self {
        let facility_id = facility_id.into();
        let train_origin = (0..train.len())
            .map(|index| SampleRef {
                facility_id: facility_id.clone(),
                index,
            })
            .collect();
        Self {
            n_k: train.len(),
            facility_id,
            train,
            train_origin,
            val,
        }
    }

    fn train_set(&self) -> TrainSet {
        to_train_set(&self.train)
    }

    fn own_train_cells(&self) -> impl Iterator<Item = CellId> + '_ {
        self.train
            .iter()
            .zip(&self.train_origin)
            .filter(|(_, o)| o.facility_id == self.facility_id)
            .map(|(s, _)| s.cell)
    }
}

pub fn to_train_set(samples: &[LabeledSample]) -> TrainSet {
    TrainSet::from_features(samples.iter().map(|s| (&s.features, s.label.index())))
}

/// One client per facility, holding the train and val parts of its split.
pub fn partition_by_facility(datasets: &[FacilityDataset], splits: &[Split]) -> Result<Vec<ClientState>, FedError> {
    if datasets.len() != splits.len() {
        return Err(FedError::SplitMismatch(datasets.len(), splits.len()));
    }
    let mut seen = BTreeSet::new();
    let mut clients = Vec::with_capacity(datasets.len());
    for (ds, sp) in datasets.iter().zip(splits) {
        if !seen.insert(ds.facility_id.as_str()) {
            return Err(FedError::DuplicateFacilityId(ds.facility_id.clone()));
        }
        let pick = |idx: &[usize]| idx.iter().map(|&i| ds.samples[i].clone()).collect::<Vec<_>>();
        clients.push(ClientState::new(ds.facility_id.clone(), pick(&sp.train_idx), pick(&sp.val_idx)));
    }
    Ok(clients)
}

/// A training sample copied from one client into another.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transfer {
    pub from: SampleRef,
    pub to: String,
    pub cell: CellId,
}

/// The rectangle a client's domain grows to under `margin`.
pub fn expanded_domain(client: &ClientState, margin: u32, spec: &GridSpec) -> Option<CellRect> {
    CellRect::bounding(client.own_train_cells()).map(|r| r.expand(margin, spec))
}

/// Copies into each client every other client's original training sample
/// whose cell lies in the client's expanded bounding rectangle. Returns the
/// expanded clients and a log of every copy made.
pub fn overlap_expand(clients: &[ClientState], spec: &GridSpec, margin: u32) -> (Vec<ClientState>, Vec<Transfer>) {
    if margin == 0 {
        return (clients.to_vec(), Vec::new());
    }
    let mut out = clients.to_vec();
    let mut log = Vec::new();
    for (i, target) in out.iter_mut().enumerate() {
        let Some(rect) = expanded_domain(&clients[i], margin, spec) else {
            continue;
        };
        for (j, donor) in clients.iter().enumerate() {
            if i == j {
                continue;
            }
            for (s, origin) in donor
                .train
                .iter()
                .zip(&donor.train_origin)
                .filter(|(s, o)| o.facility_id == donor.facility_id && rect.contains(s.cell))
            {
                target.train.push(s.clone());
                target.train_origin.push(origin.clone());
                log.push(Transfer {
                    from: origin.clone(),
                    to: target.facility_id.clone(),
                    cell: s.cell,
                });
            }
        }
        target.n_k = target.train.len();
    }
    (out, log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub facility_id: String,
    pub params: ModelParams,
    pub n_k: usize,
}

/// Copies `global`, runs `cfg.local_epochs` epochs with a fresh optimizer on
/// the client's training data and returns the result.
pub fn local_update(global: &ModelParams, client: &ClientState, cfg: &FedConfig, round: u32) -> Result<ClientUpdate, FedError> {
    local_update_on(global, &client.facility_id, &client.train_set(), cfg, round)
}

fn local_update_on(global: &ModelParams, facility_id: &str, data: &TrainSet, cfg: &FedConfig, round: u32) -> Result<ClientUpdate, FedError> {
    if data.is_empty() {
        return Err(FedError::EmptyClientData(facility_id.to_string()));
    }
    let mut params = global.clone();
    let mut opt = cfg.optimizer.start(&params);
    let mut rng = seed::derive_rng(cfg.seed, "local", Some(facility_id), Some(round as u64));
    for _ in 0..cfg.local_epochs {
        train_epoch(&mut params, data, &mut opt, cfg.batch, &mut rng)?;
    }
    Ok(ClientUpdate {
        facility_id: facility_id.to_string(),
        params,
        n_k: data.len(),
    })
}

/// Sample-count weighted mean of the updates, summed in ascending
/// facility-id order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ModelParams, FedError> {
    let first = updates.first().ok_or(FedError::EmptyUpdateSet)?;
    if updates.iter().any(|u| !u.params.same_shape(&first.params)) {
        return Err(FedError::ShapeMismatch);
    }
    let n: usize = updates.iter().map(|u| u.n_k).sum();
    if n == 0 {
        return Err(FedError::ZeroWeight);
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by(|a, b| a.facility_id.cmp(&b.facility_id));
    let mut out = first.params.zeros_like();
    for u in order {
        let w = u.n_k as f64 / n as f64;
        for (acc, src) in out.layers.iter_mut().zip(&u.params.layers) {
            Zip::from(&mut acc.weight).and(&src.weight).for_each(|a, &s| *a += w * s);
            Zip::from(&mut acc.bias).and(&src.bias).for_each(|a, &s| *a += w * s);
        }
    }
    Ok(out)
}

/// `ceil(fraction * n_clients)` distinct sorted indices; all indices without
/// touching the generator when `fraction >= 1`.
pub fn select_clients(n_clients: usize, fraction: f64, rng: &mut seed::Rng) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n_clients).collect();
    }
    let k = ((fraction * n_clients as f64).ceil() as usize).clamp(1.min(n_clients), n_clients);
    let mut idx = rand::seq::index::sample(rng, n_clients, k).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub global_val_loss: f64,
    pub global_val_balanced_accuracy: f64,
    pub participants: Vec<String>,
    pub elapsed_ms: u64,
}

pub fn history_csv(history: &[RoundRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.round,
            r.global_val_loss,
            r.global_val_balanced_accuracy,
            r.participants.len(),
            r.elapsed_ms
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedOutcome {
    /// Parameters at the best validation round.
    pub params: ModelParams,
    pub history: Vec<RoundRecord>,
    pub best_round: u32,
    pub rounds_ran: u32,
    pub stopped_early: bool,
}

struct Prepared {
    id: String,
    train: TrainSet,
    val: TrainSet,
    weight: usize,
}

fn prepare(clients: &[ClientState]) -> Result<Vec<Prepared>, FedError> {
    if clients.is_empty() {
        return Err(FedError::NoClients);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(clients.len());
    for c in clients {
        if !seen.insert(c.facility_id.as_str()) {
            return Err(FedError::DuplicateFacilityId(c.facility_id.clone()));
        }
        out.push(Prepared {
            id: c.facility_id.clone(),
            train: c.train_set(),
            val: to_train_set(&c.val),
            weight: c.n_k,
        });
    }
    if out.iter().all(|p| p.val.is_empty()) {
        return Err(FedError::EmptyValidation);
    }
    Ok(out)
}

/// Validation loss averaged over clients weighted by `n_k`, and balanced
/// accuracy over the union of validation sets.
fn validate_global(params: &ModelParams, clients: &[Prepared]) -> Result<(f64, f64), FedError> {
    let mut loss = 0.0;
    let mut weight = 0usize;
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for c in clients.iter().filter(|c| !c.val.is_empty()) {
        loss += c.weight as f64 * loss_batch(params, c.val.x.view(), &c.val.y)?;
        weight += c.weight;
        preds.extend(predict_batch(params, c.val.x.view()));
        truth.extend_from_slice(&c.val.y);
    }
    let loss = if weight > 0 { loss / weight as f64 } else { f64::NAN };
    let bal = eval::balanced_accuracy(&preds, &truth).map_err(|_| FedError::EmptyValidation)?;
    Ok((loss, bal))
}

fn run_round(global: &ModelParams, clients: &[Prepared], chosen: &[usize], cfg: &FedConfig, round: u32) -> Result<Vec<ClientUpdate>, FedError> {
    let work = |i: usize| local_update_on(global, &clients[i].id, &clients[i].train, cfg, round);
    if cfg.threads <= 1 || chosen.len() <= 1 {
        return chosen.iter().map(|&i| work(i)).collect();
    }
    let per = chosen.len().div_ceil(cfg.threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = chosen
            .chunks(per)
            .map(|part| s.spawn(move || part.iter().map(|&i| work(i)).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut all = Vec::with_capacity(chosen.len());
        for h in handles {
            all.extend(h.join().expect("local update thread panicked")?);
        }
        Ok(all)
    })
}

/// Milliseconds since the call. Always 0 on wasm32, which has no clock.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> u64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_millis() as u64
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> u64 {
    || 0
}

/// FedAvg with early stopping on validation loss. `observe` sees every round
/// record together with the freshly aggregated global parameters.
pub fn run_federated_observed(
    clients: &[ClientState],
    cfg: &FedConfig,
    init: ModelParams,
    observe: &mut dyn FnMut(&RoundRecord, &ModelParams),
) -> Result<FedOutcome, FedError> {
    cfg.validate()?;
    let prepared = prepare(clients)?;
    if let Some(p) = prepared.iter().find(|p| p.train.is_empty()) {
        return Err(FedError::EmptyClientData(p.id.clone()));
    }
    let elapsed_ms = stopwatch();
    let mut global = init;
    let mut stop = EarlyStopState::new(cfg.patience);
    let mut history = Vec::new();
    let mut stopped_early = false;
    for round in 1..=cfg.n_rounds {
        let wrap = |e: FedError| FedError::Round {
            round,
            source: Box::new(e),
        };
        let mut rng = seed::derive_rng(cfg.seed, "select", None, Some(round as u64));
        let chosen = select_clients(prepared.len(), cfg.client_fraction, &mut rng);
        let updates = run_round(&global, &prepared, &chosen, cfg, round).map_err(wrap)?;
        global = aggregate(&updates).map_err(wrap)?;
        let (val_loss, val_bal) = validate_global(&global, &prepared).map_err(wrap)?;
        if !val_loss.is_finite() {
            return Err(wrap(FedError::Diverged(val_loss)));
        }
        let record = RoundRecord {
            round,
            global_val_loss: val_loss,
            global_val_balanced_accuracy: val_bal,
            participants: chosen.iter().map(|&i| prepared[i].id.clone()).collect(),
            elapsed_ms: elapsed_ms(),
        };
        observe(&record, &global);
        history.push(record);
        if stop.update(val_loss, round, &global) == Decision::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(FedOutcome {
        params: stop.best_snapshot.expect("at least one round ran"),
        rounds_ran: history.len() as u32,
        history,
        best_round: stop.best_round,
        stopped_early,
    })
}

pub fn run_federated(clients: &[ClientState], cfg: &FedConfig, init: ModelParams) -> Result<FedOutcome, FedError> {
    run_federated_observed(clients, cfg, init, &mut |_, _| {})
}

/// Merges every client into one, in ascending facility-id order. The pooled
/// client is named by its members' ids joined with `+`.
pub fn pool_clients(clients: &[ClientState]) -> Result<ClientState, FedError> {
    if clients.is_empty() {
        return Err(FedError::NoClients);
    }
    let mut order: Vec<&ClientState> = clients.iter().collect();
    order.sort_by(|a, b| a.facility_id.cmp(&b.facility_id));
    let id = order.iter().map(|c| c.facility_id.as_str()).collect::<Vec<_>>().join("+");
    let mut pooled = ClientState::new(id, Vec::new(), Vec::new());
    for c in order {
        pooled.train.extend_from_slice(&c.train);
        pooled.train_origin.extend_from_slice(&c.train_origin);
        pooled.val.extend_from_slice(&c.val);
    }
    pooled.n_k = pooled.train.len();
    Ok(pooled)
}

/// The centralized baseline: the same loop with one client holding all data.
pub fn run_single(pooled: &ClientState, cfg: &FedConfig, init: ModelParams) -> Result<FedOutcome, FedError> {
    run_single_observed(pooled, cfg, init, &mut |_, _| {})
}

pub fn run_single_observed(
    pooled: &ClientState,
    cfg: &FedConfig,
    init: ModelParams,
    observe: &mut dyn FnMut(&RoundRecord, &ModelParams),
) -> Result<FedOutcome, FedError> {
    let cfg = FedConfig {
        client_fraction: 1.0,
        overlap_margin: 0,
        ..cfg.clone()
    };
    run_federated_observed(std::slice::from_ref(pooled), &cfg, init, observe)
}
