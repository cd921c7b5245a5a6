//! Browser demo for taxifed. Three operations are exported through
//! wasm-bindgen and return JSON strings:
//!
//! - `cell_lookup`: the grid cell, cell centre and hour slot of a point;
//! - `demand_heatmap`: per-cell trip counts of a synthetic corpus for one
//!   hour of the day, with the facility blocks;
//! - `compare_training`: per-round validation curves and test metrics of a
//!   single pooled model and a FedAvg model on a small synthetic corpus.
//!
//! The JSON builders are plain Rust functions so they can be tested natively.

use serde::Serialize;
use taxifed::eval::{self, MetricsReport, Patience, SplitRatios};
use taxifed::fed::{
    partition_by_facility, pool_clients, run_federated_observed, run_single_observed, to_train_set, FedConfig,
    RoundRecord,
};
use taxifed::grid::{cell_center, cell_of, slot_of, GridSpec};
use taxifed::ingest::{generate_synthetic, FacilityDataset, LabeledSample, SyntheticConfig};
use taxifed::nn::{default_layer_widths, init_params, predict_batch, AdamConfig, LocalOptimizer};
use taxifed::seed::derive_seed;
use wasm_bindgen::prelude::*;

pub const MAX_ROUNDS: u32 = 60;
/// Hour value that selects the whole day in `demand_heatmap`.
pub const ALL_HOURS: u32 = 24;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellInfo {
    pub row: u32,
    pub col: u32,
    pub center_lat: f64,
    pub center_lon: f64,
    pub slot: u64,
    pub hour_of_day: u8,
    pub day_of_week: u8,
}

/// Cell and slot of `(lat, lon)` at unix time `t` on the default grid.
pub fn lookup(lat: f64, lon: f64, t: i64) -> Result<CellInfo, String> {
    let spec = GridSpec::default();
    let cell = cell_of(lat, lon, &spec).map_err(|e| e.to_string())?;
    let slot = slot_of(t, &spec).map_err(|e| e.to_string())?;
    let (center_lat, center_lon) = cell_center(cell, &spec);
    Ok(CellInfo {
        row: cell.row,
        col: cell.col,
        center_lat,
        center_lon,
        slot: slot.index,
        hour_of_day: slot.hour_of_day,
        day_of_week: slot.day_of_week,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    pub facility_id: String,
    pub row_min: u32,
    pub row_max: u32,
    pub col_min: u32,
    pub col_max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub rows: u32,
    pub cols: u32,
    /// Row-major located-event counts summed over the matching slots.
    pub counts: Vec<u32>,
    pub max: u32,
    pub total: u64,
    pub blocks: Vec<Block>,
}

fn heatmap_config(n_facilities: usize) -> SyntheticConfig {
    SyntheticConfig {
        n_facilities,
        days: 7,
        target_trips: 3500.0,
        ..SyntheticConfig::default()
    }
}

/// Demand of a one-week synthetic corpus on the default 20x20 grid.
pub fn heatmap(seed: u64, n_facilities: usize, hour: u32) -> Result<Heatmap, String> {
    if hour > ALL_HOURS {
        return Err(format!("hour must be 0..=23, or {ALL_HOURS} for the whole day"));
    }
    let cfg = heatmap_config(n_facilities);
    let data = generate_synthetic(&cfg, seed).map_err(|e| e.to_string())?;
    let (rows, cols) = (cfg.grid.n_rows, cfg.grid.n_cols);
    let mut counts = vec![0u32; (rows * cols) as usize];
    for s in data.iter().flat_map(|d| &d.samples) {
        if hour == ALL_HOURS || s.slot.hour_of_day as u32 == hour {
            counts[(s.cell.row * cols + s.cell.col) as usize] += s.count;
        }
    }
    let blocks = data
        .iter()
        .filter_map(|d| {
            d.domain.map(|r| Block {
                facility_id: d.facility_id.clone(),
                row_min: r.row_min,
                row_max: r.row_max,
                col_min: r.col_min,
                col_max: r.col_max,
            })
        })
        .collect();
    Ok(Heatmap {
        rows,
        cols,
        max: counts.iter().copied().max().unwrap_or(0),
        total: counts.iter().map(|&c| c as u64).sum(),
        counts,
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub round: u32,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRun {
    pub curve: Vec<CurvePoint>,
    pub best_round: u32,
    pub test_accuracy: f64,
    pub test_balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub facilities: Vec<String>,
    pub n_test: usize,
    pub single: ModelRun,
    pub federated: ModelRun,
}

fn training_config(n_facilities: usize) -> SyntheticConfig {
    let mut cfg = SyntheticConfig {
        n_facilities,
        days: 14,
        target_trips: 1100.0,
        ..SyntheticConfig::default()
    };
    cfg.grid.n_rows = 8;
    cfg.grid.n_cols = 8;
    cfg
}

fn point(r: &RoundRecord) -> CurvePoint {
    CurvePoint {
        round: r.round,
        val_loss: r.global_val_loss,
        val_balanced_accuracy: r.global_val_balanced_accuracy,
    }
}

fn score(params: &taxifed::nn::ModelParams, test: &[LabeledSample]) -> Result<MetricsReport, String> {
    let set = to_train_set(test);
    MetricsReport::from_predictions(&predict_batch(params, set.x.view()), &set.y).map_err(|e| e.to_string())
}

/// Trains a single pooled model and a FedAvg model from the same seed on an
/// 8x8-grid, two-week synthetic corpus and scores both on the pooled test set.
pub fn compare(seed: u64, rounds: u32, n_facilities: usize) -> Result<Comparison, String> {
    if rounds == 0 || rounds > MAX_ROUNDS {
        return Err(format!("rounds must be 1..={MAX_ROUNDS}"));
    }
    let data: Vec<FacilityDataset> = generate_synthetic(&training_config(n_facilities), seed).map_err(|e| e.to_string())?;
    let ratios = SplitRatios::default();
    let splits = data
        .iter()
        .map(|d| eval::split(d.samples.len(), &ratios, derive_seed(seed, "split", Some(&d.facility_id), None)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let clients = partition_by_facility(&data, &splits).map_err(|e| e.to_string())?;
    let test: Vec<LabeledSample> = data
        .iter()
        .zip(&splits)
        .flat_map(|(d, s)| s.test_idx.iter().map(|&i| d.samples[i].clone()))
        .collect();
    let cfg = FedConfig {
        n_rounds: rounds,
        patience: Patience::Infinite,
        seed,
        optimizer: LocalOptimizer::Adam(AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        }),
        ..FedConfig::default()
    };
    let init = init_params(&default_layer_widths(), derive_seed(seed, "init", None, None)).map_err(|e| e.to_string())?;

    let mut single_curve = Vec::new();
    let pooled = pool_clients(&clients).map_err(|e| e.to_string())?;
    let single = run_single_observed(&pooled, &cfg, init.clone(), &mut |r, _| single_curve.push(point(r)))
        .map_err(|e| e.to_string())?;
    let mut fed_curve = Vec::new();
    let fed = run_federated_observed(&clients, &cfg, init, &mut |r, _| fed_curve.push(point(r)))
        .map_err(|e| e.to_string())?;

    let run = |curve, outcome: &taxifed::fed::FedOutcome| -> Result<ModelRun, String> {
        let m = score(&outcome.params, &test)?;
        Ok(ModelRun {
            curve,
            best_round: outcome.best_round,
            test_accuracy: m.accuracy,
            test_balanced_accuracy: m.balanced_accuracy,
        })
    };
    Ok(Comparison {
        facilities: data.iter().map(|d| d.facility_id.clone()).collect(),
        n_test: test.len(),
        single: run(single_curve, &single)?,
        federated: run(fed_curve, &fed)?,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo values serialize")
}

#[wasm_bindgen]
pub fn cell_lookup(lat: f64, lon: f64, t: f64) -> Result<String, JsError> {
    lookup(lat, lon, t as i64).map(|c| to_json(&c)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn demand_heatmap(seed: u32, n_facilities: u32, hour: u32) -> Result<String, JsError> {
    heatmap(seed as u64, n_facilities as usize, hour)
        .map(|h| to_json(&h))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn compare_training(seed: u32, rounds: u32, n_facilities: u32) -> Result<String, JsError> {
    compare(seed as u64, rounds, n_facilities as usize)
        .map(|c| to_json(&c))
        .map_err(|e| JsError::new(&e))
}

/// Default grid geometry for the page: origin, cell size and shape.
#[wasm_bindgen]
pub fn grid_info() -> String {
    to_json(&GridSpec::default())
}
