//! Virtual grid: lat/lon to cell, timestamp to slot, demand aggregation and
//! demand-level labelling.
//!
//! Locations are projected with a local equirectangular approximation
//! anchored at the south-west origin of the grid. Cells and slots are
//! half-open, so every point of the plane and of the time line belongs to
//! exactly one of them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Kilometres per degree of latitude.
pub const KM_PER_DEG_LAT: f64 = 110.574;
/// Kilometres per degree of longitude at the equator.
pub const KM_PER_DEG_LON_EQUATOR: f64 = 111.320;

/// Values within this distance (in cell or slot units) of an integer are
/// snapped onto it before flooring, so that boundaries computed from round
/// trips through degrees land in the upper cell.
const BOUNDARY_SNAP: f64 = 1e-9;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("coordinate ({lat}, {lon}) falls outside the grid")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("coordinate ({lat}, {lon}) is not finite")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("timestamp {t} precedes the grid epoch {epoch_start}")]
    NegativeTime { t: i64, epoch_start: i64 },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid level thresholds: {0}")]
    InvalidThresholds(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Latitude of the south-west corner, degrees.
    pub origin_lat: f64,
    /// Longitude of the south-west corner, degrees.
    pub origin_lon: f64,
    pub cell_size_km: f64,
    pub n_rows: u32,
    pub n_cols: u32,
    pub slot_duration_s: i64,
    /// Unix seconds of the start of slot 0.
    pub epoch_start: i64,
    /// Fixed offset used to derive hour-of-day and day-of-week. No DST.
    pub utc_offset_s: i32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            origin_lat: 35.0,
            origin_lon: 139.0,
            cell_size_km: 1.0,
            n_rows: 20,
            n_cols: 20,
            slot_duration_s: 3600,
            // 2024-01-01T00:00:00Z, a Monday
            epoch_start: 1_704_067_200,
            utc_offset_s: 0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: &str| Err(GridError::InvalidSpec(m.to_string()));
        if !(self.cell_size_km.is_finite() && self.cell_size_km > 0.0) {
            return bad("cell_size_km must be > 0");
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return bad("n_rows and n_cols must be >= 1");
        }
        if self.slot_duration_s <= 0 {
            return bad("slot_duration_s must be > 0");
        }
        if !(self.origin_lat.is_finite() && self.origin_lon.is_finite()) {
            return bad("origin must be finite");
        }
        if self.origin_lat.abs() >= 90.0 {
            return bad("origin_lat must lie strictly between the poles");
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows as usize * self.n_cols as usize
    }

    fn km_per_deg_lon(&self) -> f64 {
        KM_PER_DEG_LON_EQUATOR * self.origin_lat.to_radians().cos()
    }

    /// Every cell of the grid in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.n_rows).flat_map(move |row| (0..self.n_cols).map(move |col| CellId { row, col }))
    }

    pub fn full_rect(&self) -> CellRect {
        CellRect {
            row_min: 0,
            row_max: self.n_rows - 1,
            col_min: 0,
            col_max: self.n_cols - 1,
        }
    }

    /// Builds the slot with the given index. Hour and day are taken at the
    /// slot's start instant so every timestamp in a slot shares them.
    pub fn slot(&self, index: u64) -> SlotId {
        let start = self.epoch_start + index as i64 * self.slot_duration_s;
        let local = start + self.utc_offset_s as i64;
        let day = local.div_euclid(SECONDS_PER_DAY);
        let sec_of_day = local.rem_euclid(SECONDS_PER_DAY);
        SlotId {
            index,
            hour_of_day: (sec_of_day / 3600) as u8,
            // 1970-01-01 was a Thursday; 0 = Monday.
            day_of_week: (day + 3).rem_euclid(7) as u8,
        }
    }

    pub fn slot_start(&self, index: u64) -> i64 {
        self.epoch_start + index as i64 * self.slot_duration_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub row: u32,
    pub col: u32,
}

impl CellId {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId {
    pub index: u64,
    pub hour_of_day: u8,
    /// 0 = Monday .. 6 = Sunday.
    pub day_of_week: u8,
}

/// Inclusive rectangle of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellRect {
    pub row_min: u32,
    pub row_max: u32,
    pub col_min: u32,
    pub col_max: u32,
}

impl CellRect {
    pub fn single(cell: CellId) -> Self {
        Self {
            row_min: cell.row,
            row_max: cell.row,
            col_min: cell.col,
            col_max: cell.col,
        }
    }

    /// Smallest rectangle containing every cell, or `None` for no cells.
    pub fn bounding<I: IntoIterator<Item = CellId>>(cells: I) -> Option<Self> {
        let mut it = cells.into_iter();
        let first = it.next()?;
        Some(it.fold(Self::single(first), |r, c| Self {
            row_min: r.row_min.min(c.row),
            row_max: r.row_max.max(c.row),
            col_min: r.col_min.min(c.col),
            col_max: r.col_max.max(c.col),
        }))
    }

    pub fn contains(&self, cell: CellId) -> bool {
        (self.row_min..=self.row_max).contains(&cell.row) && (self.col_min..=self.col_max).contains(&cell.col)
    }

    /// Grows the rectangle by `margin` cells on every side, clipped to the grid.
    pub fn expand(&self, margin: u32, spec: &GridSpec) -> Self {
        Self {
            row_min: self.row_min.saturating_sub(margin),
            row_max: self.row_max.saturating_add(margin).min(spec.n_rows - 1),
            col_min: self.col_min.saturating_sub(margin),
            col_max: self.col_max.saturating_add(margin).min(spec.n_cols - 1),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        (self.row_min..=self.row_max).flat_map(move |row| (self.col_min..=self.col_max).map(move |col| CellId { row, col }))
    }

    pub fn n_cells(&self) -> usize {
        (self.row_max - self.row_min + 1) as usize * (self.col_max - self.col_min + 1) as usize
    }
}

fn snapped_floor(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < BOUNDARY_SNAP {
        r
    } else {
        x.floor()
    }
}

/// Maps a coordinate to its grid cell.
pub fn cell_of(lat: f64, lon: f64, spec: &GridSpec) -> Result<CellId, GridError> {
    if !(lat.is_finite() && lon.is_finite()) {
        return Err(GridError::InvalidCoordinate { lat, lon });
    }
    let dx_km = (lon - spec.origin_lon) * spec.km_per_deg_lon();
    let dy_km = (lat - spec.origin_lat) * KM_PER_DEG_LAT;
    let col = snapped_floor(dx_km / spec.cell_size_km);
    let row = snapped_floor(dy_km / spec.cell_size_km);
    if row < 0.0 || col < 0.0 || row >= spec.n_rows as f64 || col >= spec.n_cols as f64 {
        return Err(GridError::OutOfBounds { lat, lon });
    }
    Ok(CellId {
        row: row as u32,
        col: col as u32,
    })
}

/// Geographic centre of a cell; the inverse of the projection used by
/// [`cell_of`].
pub fn cell_center(cell: CellId, spec: &GridSpec) -> (f64, f64) {
    point_in_cell(cell, 0.5, 0.5, spec)
}

/// A point at fractional offsets `(fy, fx)` in `[0, 1)` inside `cell`.
pub fn point_in_cell(cell: CellId, fy: f64, fx: f64, spec: &GridSpec) -> (f64, f64) {
    let lat = spec.origin_lat + (cell.row as f64 + fy) * spec.cell_size_km / KM_PER_DEG_LAT;
    let lon = spec.origin_lon + (cell.col as f64 + fx) * spec.cell_size_km / spec.km_per_deg_lon();
    (lat, lon)
}

pub fn slot_of(t: i64, spec: &GridSpec) -> Result<SlotId, GridError> {
    if t < spec.epoch_start {
        return Err(GridError::NegativeTime {
            t,
            epoch_start: spec.epoch_start,
        });
    }
    let index = (t - spec.epoch_start) / spec.slot_duration_s;
    Ok(spec.slot(index as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemandLevel {
    Non,
    Low,
    Med,
    High,
}

impl DemandLevel {
    pub const ALL: [DemandLevel; 4] = [DemandLevel::Non, DemandLevel::Low, DemandLevel::Med, DemandLevel::High];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DemandLevel::Non => "non",
            DemandLevel::Low => "low",
            DemandLevel::Med => "med",
            DemandLevel::High => "high",
        }
    }
}

impl fmt::Display for DemandLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DemandLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown demand level `{s}`"))
    }
}

/// Upper-inclusive class boundaries `[b1, b2, b3]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u32; 3]", into = "[u32; 3]")]
pub struct LevelThresholds {
    boundaries: [u32; 3],
}

impl LevelThresholds {
    pub fn new(boundaries: [u32; 3]) -> Result<Self, GridError> {
        let [b1, b2, b3] = boundaries;
        if !(b1 < b2 && b2 < b3) {
            return Err(GridError::InvalidThresholds(format!(
                "boundaries must be strictly increasing, got {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> [u32; 3] {
        self.boundaries
    }

    /// Tertile boundaries of the nonzero counts: zero stays `non`, the
    /// nonzero counts are split into three roughly equal groups. Falls back
    /// to the defaults when the counts cannot support three distinct cuts.
    pub fn from_quantiles(counts: &[u32]) -> Self {
        let mut nz: Vec<u32> = counts.iter().copied().filter(|&c| c > 0).collect();
        if nz.is_empty() {
            return Self::default();
        }
        nz.sort_unstable();
        let q = |p: f64| nz[((p * nz.len() as f64).ceil() as usize).clamp(1, nz.len()) - 1];
        let b2 = q(1.0 / 3.0).max(1);
        let b3 = q(2.0 / 3.0).max(b2 + 1);
        Self::new([0, b2, b3]).unwrap_or_default()
    }

    pub fn level_of(&self, count: u32) -> DemandLevel {
        let [b1, b2, b3] = self.boundaries;
        if count <= b1 {
            DemandLevel::Non
        } else if count <= b2 {
            DemandLevel::Low
        } else if count <= b3 {
            DemandLevel::Med
        } else {
            DemandLevel::High
        }
    }
}

impl Default for LevelThresholds {
    fn default() -> Self {
        Self { boundaries: [0, 2, 5] }
    }
}

impl TryFrom<[u32; 3]> for LevelThresholds {
    type Error = GridError;

    fn try_from(b: [u32; 3]) -> Result<Self, Self::Error> {
        Self::new(b)
    }
}

impl From<LevelThresholds> for [u32; 3] {
    fn from(t: LevelThresholds) -> Self {
        t.boundaries
    }
}

pub fn level_of(count: u32, th: &LevelThresholds) -> DemandLevel {
    th.level_of(count)
}

/// Which event kinds count towards demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemandEvents {
    #[default]
    Pickups,
    Both,
}

/// Something with a position and a time that may count as demand.
pub trait DemandPoint {
    fn lat(&self) -> f64;
    fn lon(&self) -> f64;
    fn t(&self) -> i64;
    fn is_pickup(&self) -> bool;
}

/// Event counts per (cell, slot index). Absent keys mean zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandGrid {
    pub spec: GridSpec,
    counts: BTreeMap<(CellId, u64), u32>,
}

impl DemandGrid {
    pub fn new(spec: GridSpec) -> Self {
        Self {
            spec,
            counts: BTreeMap::new(),
        }
    }

    pub fn count(&self, cell: CellId, slot: u64) -> u32 {
        self.counts.get(&(cell, slot)).copied().unwrap_or(0)
    }

    pub fn increment(&mut self, cell: CellId, slot: u64) {
        *self.counts.entry((cell, slot)).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }

    /// Nonzero entries in (cell, slot) order.
    pub fn iter(&self) -> impl Iterator<Item = (CellId, u64, u32)> + '_ {
        self.counts.iter().map(|(&(c, s), &n)| (c, s, n))
    }

    /// Inclusive range of slots with any nonzero count.
    pub fn slot_range(&self) -> Option<(u64, u64)> {
        let mut slots = self.counts.keys().map(|&(_, s)| s);
        let first = slots.next()?;
        Some(slots.fold((first, first), |(lo, hi), s| (lo.min(s), hi.max(s))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub grid: DemandGrid,
    /// Qualifying events that fell outside the grid or before its epoch.
    pub skipped: usize,
}

/// Tallies qualifying events per (cell, slot).
pub fn aggregate<E: DemandPoint>(events: &[E], spec: &GridSpec, which: DemandEvents) -> Aggregation {
    let mut grid = DemandGrid::new(spec.clone());
    let mut skipped = 0;
    for e in events {
        if which == DemandEvents::Pickups && !e.is_pickup() {
            continue;
        }
        match (cell_of(e.lat(), e.lon(), spec), slot_of(e.t(), spec)) {
            (Ok(c), Ok(s)) => grid.increment(c, s.index),
            _ => skipped += 1,
        }
    }
    Aggregation { grid, skipped }
}
