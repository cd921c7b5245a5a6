//! Synthetic multi-facility trip corpus.
//!
//! Each facility owns one rectangular block of the grid. Pickups inside a
//! block follow a Poisson process whose rate is a sum of per-facility
//! Gaussian hotspots (optionally times a broad city-centre field), times an
//! hour-of-day profile of rush peaks over a base rate, damped on weekends.
//! The default profile is a single sharp evening peak. The rates are scaled
//! so the expected number of trips matches `target_trips`.
//!
//! Every trip produces a pickup and a drop-off event plus GPS fixes on a
//! 5 s lattice around both events. Some event windows lose their fixes
//! entirely (the event is then omitted by the locator) and individual fixes
//! drop out at random.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{
    build_facility_datasets, merge, DemandEvent, EventKind, FacilityDataset, GpsFix, IngestError, SampleOptions,
};
use crate::grid::{point_in_cell, CellId, CellRect, GridSpec, LevelThresholds, KM_PER_DEG_LAT, KM_PER_DEG_LON_EQUATOR};
use crate::seed::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_facilities: usize,
    pub days: u32,
    pub grid: GridSpec,
    /// Expected number of trips over the whole corpus.
    pub target_trips: f64,
    pub hotspots_per_facility: usize,
    /// Hotspot spread in cells.
    pub hotspot_sigma_cells: f64,
    /// Spread of the city-centre intensity field in cells; `None` makes
    /// the field flat.
    pub city_sigma_cells: Option<f64>,
    /// City centre as fractional (row, col) cell coordinates; defaults to
    /// the middle of the grid.
    pub city_center_cells: Option<(f64, f64)>,
    /// Off-peak rate factor relative to a rush peak of `1 + rush_multiplier`.
    pub base_rate: f64,
    pub rush_hours: Vec<f64>,
    pub rush_multiplier: f64,
    pub rush_width_h: f64,
    pub weekend_factor: f64,
    /// Probability that all fixes around an event are missing.
    pub gap_probability: f64,
    /// Probability that any single fix is missing.
    pub fix_drop_probability: f64,
    pub fix_interval_s: i64,
    /// Fixes are emitted this far either side of each event.
    pub fix_window_s: i64,
    pub vehicles_per_facility: usize,
    pub speed_kmh: f64,
    pub trip_km_min: f64,
    pub trip_km_max: f64,
    pub thresholds: LevelThresholds,
    pub samples: SampleOptions,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_facilities: 16,
            days: 30,
            grid: GridSpec::default(),
            target_trips: 15_000.0,
            hotspots_per_facility: 1,
            hotspot_sigma_cells: 8.0,
            city_sigma_cells: None,
            city_center_cells: None,
            base_rate: 0.0,
            rush_hours: vec![18.5],
            rush_multiplier: 8.0,
            rush_width_h: 0.3,
            weekend_factor: 0.1,
            gap_probability: 0.1,
            fix_drop_probability: 0.05,
            fix_interval_s: 5,
            fix_window_s: 60,
            vehicles_per_facility: 30,
            speed_kmh: 25.0,
            trip_km_min: 1.0,
            trip_km_max: 5.0,
            thresholds: LevelThresholds::default(),
            samples: SampleOptions::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        self.grid.validate().map_err(|e| IngestError::InvalidConfig(e.to_string()))?;
        if self.n_facilities == 0 {
            return bad("n_facilities must be >= 1");
        }
        if self.days == 0 {
            return bad("days must be >= 1");
        }
        if !(self.target_trips > 0.0) {
            return bad("target_trips must be > 0");
        }
        if self.hotspots_per_facility == 0 || !(self.hotspot_sigma_cells > 0.0) {
            return bad("need at least one hotspot with positive spread");
        }
        if self.city_sigma_cells.is_some_and(|s| !(s > 0.0)) {
            return bad("city_sigma_cells must be positive");
        }
        if !(self.base_rate >= 0.0 && self.rush_multiplier >= 0.0 && self.rush_width_h > 0.0) {
            return bad("rate profile must be non-negative with positive rush width");
        }
        if !(0.0..=1.0).contains(&self.weekend_factor) {
            return bad("weekend_factor must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gap_probability) || !(0.0..=1.0).contains(&self.fix_drop_probability) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.fix_interval_s <= 0 || self.fix_window_s < 0 {
            return bad("fix_interval_s must be > 0 and fix_window_s >= 0");
        }
        if self.vehicles_per_facility == 0 || !(self.speed_kmh > 0.0) {
            return bad("vehicles_per_facility and speed_kmh must be positive");
        }
        if !(self.trip_km_min > 0.0 && self.trip_km_min <= self.trip_km_max) {
            return bad("trip length range must satisfy 0 < min <= max");
        }
        facility_blocks(self.n_facilities, &self.grid)?;
        Ok(())
    }

    pub fn n_slots(&self) -> u64 {
        self.days as u64 * 86_400 / self.grid.slot_duration_s as u64
    }

    pub fn facility_id(&self, i: usize) -> String {
        let width = (self.n_facilities.max(1) - 1).to_string().len().max(2);
        format!("F{i:0width$}")
    }

    fn temporal(&self, hour: f64, day_of_week: u8) -> f64 {
        let rush: f64 = self
            .rush_hours
            .iter()
            .map(|&h| {
                // circular distance in hours
                let d = (hour - h).rem_euclid(24.0);
                let d = d.min(24.0 - d);
                (-d * d / (2.0 * self.rush_width_h * self.rush_width_h)).exp()
            })
            .sum();
        let day = if day_of_week >= 5 { self.weekend_factor } else { 1.0 };
        (self.base_rate + self.rush_multiplier * rush) * day
    }
}

/// Splits the grid into `n` adjacent rectangular blocks laid out as close
/// to square as the factorisation of `n` allows.
pub fn facility_blocks(n: usize, spec: &GridSpec) -> Result<Vec<CellRect>, IngestError> {
    let rows_f = (1..=n).filter(|d| n % d == 0 && d * d <= n).max().unwrap_or(1);
    let cols_f = n / rows_f;
    let (rows_f, cols_f) = if spec.n_rows > spec.n_cols { (cols_f, rows_f) } else { (rows_f, cols_f) };
    if rows_f > spec.n_rows as usize || cols_f > spec.n_cols as usize {
        return Err(IngestError::InvalidConfig(format!(
            "{n} facilities do not fit a {}x{} grid",
            spec.n_rows, spec.n_cols
        )));
    }
    let edge = |i: usize, parts: usize, len: u32| (i * len as usize / parts) as u32;
    let mut out = Vec::with_capacity(n);
    for br in 0..rows_f {
        for bc in 0..cols_f {
            out.push(CellRect {
                row_min: edge(br, rows_f, spec.n_rows),
                row_max: edge(br + 1, rows_f, spec.n_rows) - 1,
                col_min: edge(bc, cols_f, spec.n_cols),
                col_max: edge(bc + 1, cols_f, spec.n_cols) - 1,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub fixes: Vec<GpsFix>,
    /// Chronological.
    pub events: Vec<DemandEvent>,
    pub n_trips: usize,
    pub facility_ids: Vec<String>,
    pub blocks: Vec<CellRect>,
}

struct Trip {
    vehicle: String,
    facility: String,
    pickup: (i64, f64, f64),
    dropoff: (i64, f64, f64),
}

impl Trip {
    fn position(&self, t: i64) -> (f64, f64) {
        let (t0, la0, lo0) = self.pickup;
        let (t1, la1, lo1) = self.dropoff;
        if t <= t0 {
            (la0, lo0)
        } else if t >= t1 {
            (la1, lo1)
        } else {
            let s = (t - t0) as f64 / (t1 - t0) as f64;
            (la0 + s * (la1 - la0), lo0 + s * (lo1 - lo0))
        }
    }
}

/// Raw GPS fixes and events. A pure function of `(cfg, seed)`.
pub fn generate_corpus(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus, IngestError> {
    cfg.validate()?;
    let spec = &cfg.grid;
    let blocks = facility_blocks(cfg.n_facilities, spec)?;
    let ids: Vec<String> = (0..cfg.n_facilities).map(|i| cfg.facility_id(i)).collect();
    let n_slots = cfg.n_slots();

    let city = cfg
        .city_center_cells
        .unwrap_or((spec.n_rows as f64 / 2.0, spec.n_cols as f64 / 2.0));
    // spatial weight per facility cell
    let spatial: Vec<Vec<(CellId, f64)>> = blocks
        .iter()
        .zip(&ids)
        .map(|(b, id)| {
            let mut rng = derive_rng(seed, "synthetic-hotspots", Some(id), None);
            let h = (b.row_max - b.row_min + 1) as f64;
            let w = (b.col_max - b.col_min + 1) as f64;
            let hotspots: Vec<(f64, f64)> = (0..cfg.hotspots_per_facility)
                .map(|_| {
                    let r = b.row_min as f64 + if h > 1.0 { rng.random_range(0.5..h - 0.5) } else { 0.5 };
                    let c = b.col_min as f64 + if w > 1.0 { rng.random_range(0.5..w - 0.5) } else { 0.5 };
                    (r, c)
                })
                .collect();
            let s2 = 2.0 * cfg.hotspot_sigma_cells * cfg.hotspot_sigma_cells;
            b.cells()
                .map(|cell| {
                    let (cr, cc) = (cell.row as f64 + 0.5, cell.col as f64 + 0.5);
                    let local: f64 =
                        hotspots.iter().map(|&(r, c)| (-((cr - r).powi(2) + (cc - c).powi(2)) / s2).exp()).sum();
                    let city = cfg.city_sigma_cells.map_or(1.0, |sc| {
                        let (r, c) = city;
                        (-((cr - r).powi(2) + (cc - c).powi(2)) / (2.0 * sc * sc)).exp()
                    });
                    (cell, local * city)
                })
                .collect()
        })
        .collect();
    let temporal: Vec<f64> = (0..n_slots)
        .map(|s| {
            let slot = spec.slot(s);
            let local = spec.slot_start(s) + spec.utc_offset_s as i64;
            let mid_hour = (local.rem_euclid(86_400) as f64 + spec.slot_duration_s as f64 / 2.0) / 3600.0;
            cfg.temporal(mid_hour, slot.day_of_week)
        })
        .collect();
    let spatial_total: f64 = spatial.iter().flatten().map(|&(_, w)| w).sum();
    let temporal_total: f64 = temporal.iter().sum();
    let scale = cfg.target_trips / (spatial_total * temporal_total);

    let km_per_deg_lon = KM_PER_DEG_LON_EQUATOR * spec.origin_lat.to_radians().cos();
    let mut trips = Vec::new();
    for (fi, id) in ids.iter().enumerate() {
        let mut rng = derive_rng(seed, "synthetic-trips", Some(id), None);
        let mut raw = Vec::new();
        for &(cell, w) in &spatial[fi] {
            for (s, &tw) in temporal.iter().enumerate() {
                let lambda = scale * w * tw;
                if lambda <= 0.0 {
                    continue;
                }
                let n = Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize;
                for _ in 0..n {
                    let t0 = spec.slot_start(s as u64) + rng.random_range(0..spec.slot_duration_s);
                    let (la0, lo0) = point_in_cell(cell, rng.random::<f64>(), rng.random::<f64>(), spec);
                    let dist = rng.random_range(cfg.trip_km_min..=cfg.trip_km_max);
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let la1 = la0 + dist * angle.sin() / KM_PER_DEG_LAT;
                    let lo1 = lo0 + dist * angle.cos() / km_per_deg_lon;
                    let t1 = t0 + (dist / cfg.speed_kmh * 3600.0).round().max(1.0) as i64;
                    raw.push(((t0, la0, lo0), (t1, la1, lo1)));
                }
            }
        }
        // A vehicle serves one trip at a time, and its fix windows never
        // touch those of its previous trip; the pool grows when all are busy.
        raw.sort_by_key(|(p, _)| p.0);
        let gap = 2 * cfg.fix_window_s + super::LOCATE_WINDOW_S;
        let mut free_at: Vec<i64> = vec![i64::MIN; cfg.vehicles_per_facility];
        for (pickup, dropoff) in raw.drain(..) {
            let free: Vec<usize> = (0..free_at.len()).filter(|&v| free_at[v] <= pickup.0).collect();
            let v = if free.is_empty() {
                free_at.push(i64::MIN);
                free_at.len() - 1
            } else {
                free[rng.random_range(0..free.len())]
            };
            free_at[v] = dropoff.0 + gap;
            trips.push(Trip {
                vehicle: format!("{id}-V{v:03}"),
                facility: id.clone(),
                pickup,
                dropoff,
            });
        }
    }

    let mut events = Vec::with_capacity(2 * trips.len());
    let mut fixes = Vec::new();
    for trip in &trips {
        let mut rng = derive_rng(seed, "synthetic-fixes", Some(&trip.vehicle), Some(trip.pickup.0 as u64));
        let phase = {
            // per-vehicle lattice phase
            let mut r = derive_rng(seed, "synthetic-phase", Some(&trip.vehicle), None);
            r.random_range(0..cfg.fix_interval_s)
        };
        for (kind, (te, _, _)) in [(EventKind::Pickup, trip.pickup), (EventKind::Dropoff, trip.dropoff)] {
            events.push(DemandEvent {
                vehicle_id: trip.vehicle.clone(),
                t: te,
                kind,
                facility_id: trip.facility.clone(),
            });
            if rng.random_bool(cfg.gap_probability) {
                continue;
            }
            let lo = te - cfg.fix_window_s;
            let first = lo + (phase - lo).rem_euclid(cfg.fix_interval_s);
            let mut t = first;
            while t <= te + cfg.fix_window_s {
                if !rng.random_bool(cfg.fix_drop_probability) {
                    let (lat, lon) = trip.position(t);
                    fixes.push(GpsFix {
                        vehicle_id: trip.vehicle.clone(),
                        t,
                        lat,
                        lon,
                    });
                }
                t += cfg.fix_interval_s;
            }
        }
    }
    events.sort_by(|a, b| {
        (a.t, &a.facility_id, &a.vehicle_id, a.kind as u8).cmp(&(b.t, &b.facility_id, &b.vehicle_id, b.kind as u8))
    });
    fixes.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.t.cmp(&b.t)));
    fixes.dedup_by(|b, a| a.vehicle_id == b.vehicle_id && a.t == b.t);

    Ok(SyntheticCorpus {
        fixes,
        events,
        n_trips: trips.len(),
        facility_ids: ids,
        blocks,
    })
}

/// Generates a corpus and runs it through the ingest pipeline, returning
/// one labelled dataset per facility.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<FacilityDataset>, IngestError> {
    let corpus = generate_corpus(cfg, seed)?;
    let merged = merge(&corpus.fixes, &corpus.events);
    let (datasets, _) = build_facility_datasets(&merged.located, &cfg.grid, &cfg.thresholds, &cfg.samples);
    Ok(datasets)
}
