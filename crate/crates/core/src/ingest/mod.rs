//! Trip data ingestion: GPS traces and pickup/drop-off logs are merged by
//! vehicle and time, each event is located from fixes within 45 seconds of
//! it, and located events become labelled (cell, slot) samples.

mod synthetic;

pub use synthetic::{facility_blocks, generate_corpus, generate_synthetic, SyntheticConfig, SyntheticCorpus};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    self, aggregate, CellId, CellRect, DemandEvents, DemandLevel, DemandPoint, GridSpec, LevelThresholds,
    SlotId,
};
use crate::nn::{encode_features, FeatureVector};

/// Fixes farther than this from an event are never used to locate it.
pub const LOCATE_WINDOW_S: i64 = 45;

pub const TRAJECTORY_HEADER: [&str; 4] = ["vehicle_id", "timestamp", "lat", "lon"];
pub const EVENT_HEADER: [&str; 4] = ["vehicle_id", "timestamp", "kind", "facility_id"];
pub const SAMPLE_HEADER: [&str; 6] = ["facility_id", "row", "col", "slot", "count", "level"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpsFix {
    pub vehicle_id: String,
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Pickup,
    Dropoff,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Pickup => "pickup",
            EventKind::Dropoff => "dropoff",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandEvent {
    pub vehicle_id: String,
    pub t: i64,
    pub kind: EventKind,
    pub facility_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Resolution {
    /// A fix carries the event's exact timestamp.
    Exact,
    /// Linear interpolation between the fixes bracketing the event.
    Interpolated,
    /// The single closest fix.
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocatedEvent {
    pub event: DemandEvent,
    pub lat: f64,
    pub lon: f64,
    pub resolution: Resolution,
}

impl DemandPoint for LocatedEvent {
    fn lat(&self) -> f64 {
        self.lat
    }
    fn lon(&self) -> f64 {
        self.lon
    }
    fn t(&self) -> i64 {
        self.event.t
    }
    fn is_pickup(&self) -> bool {
        self.event.kind == EventKind::Pickup
    }
}

/// One training row: a (cell, slot), its encoded features and its level.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub cell: CellId,
    pub slot: SlotId,
    pub count: u32,
    pub features: FeatureVector,
    pub label: DemandLevel,
}

impl LabeledSample {
    pub fn new(cell: CellId, slot: SlotId, count: u32, spec: &GridSpec, th: &LevelThresholds) -> Self {
        Self {
            cell,
            slot,
            count,
            features: encode_features(cell, slot, spec),
            label: th.level_of(count),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FacilityDataset {
    pub facility_id: String,
    /// Bounding rectangle of the cells holding this facility's demand.
    pub domain: Option<CellRect>,
    pub samples: Vec<LabeledSample>,
}

impl FacilityDataset {
    pub fn cells(&self) -> std::collections::BTreeSet<CellId> {
        self.domain.iter().flat_map(|d| d.cells().collect::<Vec<_>>()).collect()
    }
}

fn parse_timestamp(s: &str) -> Result<i64, String> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|d| d.timestamp())
        .map_err(|e| format!("bad timestamp `{s}`: {e}"))
}

fn parse_f64(field: &str, name: &str) -> Result<f64, String> {
    let v: f64 = field.trim().parse().map_err(|_| format!("bad {name} `{field}`"))?;
    if !v.is_finite() {
        return Err(format!("non-finite {name} `{field}`"));
    }
    Ok(v)
}

fn read_records<R: Read, T>(
    reader: R,
    header: &[&str; 4],
    mut parse: impl FnMut(&csv::StringRecord) -> Result<T, String>,
) -> Result<Vec<T>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let got = rdr.headers()?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(IngestError::MalformedRow {
            line: 1,
            reason: format!("expected header `{}`, found `{}`", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        out.push(parse(&rec).map_err(|reason| IngestError::MalformedRow { line, reason })?);
    }
    Ok(out)
}

/// Reads `vehicle_id,timestamp,lat,lon` rows. The result is sorted by
/// vehicle then time; a repeated (vehicle, time) keeps its first row.
pub fn parse_trajectories<R: Read>(reader: R) -> Result<Vec<GpsFix>, IngestError> {
    let mut fixes = read_records(reader, &TRAJECTORY_HEADER, |r| {
        Ok(GpsFix {
            vehicle_id: r[0].to_string(),
            t: parse_timestamp(&r[1])?,
            lat: parse_f64(&r[2], "lat")?,
            lon: parse_f64(&r[3], "lon")?,
        })
    })?;
    fixes.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.t.cmp(&b.t)));
    fixes.dedup_by(|b, a| a.vehicle_id == b.vehicle_id && a.t == b.t);
    Ok(fixes)
}

/// Reads `vehicle_id,timestamp,kind,facility_id` rows in file order.
pub fn parse_events<R: Read>(reader: R) -> Result<Vec<DemandEvent>, IngestError> {
    read_records(reader, &EVENT_HEADER, |r| {
        let kind = match &r[2] {
            "pickup" => EventKind::Pickup,
            "dropoff" => EventKind::Dropoff,
            other => return Err(format!("bad kind `{other}`")),
        };
        Ok(DemandEvent {
            vehicle_id: r[0].to_string(),
            t: parse_timestamp(&r[1])?,
            kind,
            facility_id: r[3].to_string(),
        })
    })
}

pub fn write_trajectories<W: Write>(writer: W, fixes: &[GpsFix]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRAJECTORY_HEADER)?;
    for f in fixes {
        w.write_record([f.vehicle_id.as_str(), &f.t.to_string(), &f.lat.to_string(), &f.lon.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events<W: Write>(writer: W, events: &[DemandEvent]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVENT_HEADER)?;
    for e in events {
        w.write_record([e.vehicle_id.as_str(), &e.t.to_string(), e.kind.as_str(), &e.facility_id])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `facility_id,row,col,slot,count,level`.
pub fn write_samples<W: Write>(writer: W, datasets: &[FacilityDataset]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SAMPLE_HEADER)?;
    for d in datasets {
        for s in &d.samples {
            w.write_record([
                d.facility_id.as_str(),
                &s.cell.row.to_string(),
                &s.cell.col.to_string(),
                &s.slot.index.to_string(),
                &s.count.to_string(),
                s.label.name(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a samples file back into per-facility datasets (sorted by id).
/// Features are recomputed from the grid; the stored level is kept.
pub fn read_samples<R: Read>(reader: R, spec: &GridSpec) -> Result<Vec<FacilityDataset>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let got = rdr.headers()?.clone();
    if got.iter().ne(SAMPLE_HEADER.iter().copied()) {
        return Err(IngestError::MalformedRow {
            line: 1,
            reason: format!("expected header `{}`", SAMPLE_HEADER.join(",")),
        });
    }
    let mut by_facility: BTreeMap<String, Vec<LabeledSample>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| IngestError::MalformedRow { line, reason };
        if rec.len() != SAMPLE_HEADER.len() {
            return Err(bad(format!("expected {} fields", SAMPLE_HEADER.len())));
        }
        let num = |i: usize| rec[i].parse::<u64>().map_err(|_| bad(format!("bad {} `{}`", SAMPLE_HEADER[i], &rec[i])));
        let cell = CellId::new(num(1)? as u32, num(2)? as u32);
        if cell.row >= spec.n_rows || cell.col >= spec.n_cols {
            return Err(bad(format!("cell {cell} outside the grid")));
        }
        let slot = spec.slot(num(3)?);
        let count = num(4)? as u32;
        let label: DemandLevel = rec[5].parse().map_err(bad)?;
        by_facility.entry(rec[0].to_string()).or_default().push(LabeledSample {
            cell,
            slot,
            count,
            features: encode_features(cell, slot, spec),
            label,
        });
    }
    Ok(by_facility
        .into_iter()
        .map(|(facility_id, samples)| FacilityDataset {
            domain: CellRect::bounding(samples.iter().map(|s| s.cell)),
            facility_id,
            samples,
        })
        .collect())
}

/// Locates one event from its vehicle's time-sorted fixes.
///
/// Resolution priority: a fix at the exact time, then interpolation between
/// bracketing fixes that are both within the window, then the nearest fix
/// within the window. `None` means the event is omitted.
pub fn locate_event(fixes: &[GpsFix], ev: &DemandEvent) -> Option<LocatedEvent> {
    let located = |lat, lon, resolution| LocatedEvent {
        event: ev.clone(),
        lat,
        lon,
        resolution,
    };
    let i = fixes.partition_point(|f| f.t < ev.t);
    if let Some(f) = fixes.get(i).filter(|f| f.t == ev.t) {
        return Some(located(f.lat, f.lon, Resolution::Exact));
    }
    let within = |f: &&GpsFix| (f.t - ev.t).abs() <= LOCATE_WINDOW_S;
    let before = i.checked_sub(1).and_then(|j| fixes.get(j)).filter(within);
    let after = fixes.get(i).filter(within);
    match (before, after) {
        (Some(a), Some(b)) => {
            let s = (ev.t - a.t) as f64 / (b.t - a.t) as f64;
            Some(located(
                a.lat + s * (b.lat - a.lat),
                a.lon + s * (b.lon - a.lon),
                Resolution::Interpolated,
            ))
        }
        (Some(f), None) | (None, Some(f)) => Some(located(f.lat, f.lon, Resolution::Nearest)),
        (None, None) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeResult {
    pub located: Vec<LocatedEvent>,
    /// Events with no usable fix, including events of unknown vehicles.
    pub omitted: usize,
}

/// Joins events to traces by vehicle id and locates each event. Output
/// keeps the input event order.
pub fn merge(fixes: &[GpsFix], events: &[DemandEvent]) -> MergeResult {
    let mut by_vehicle: HashMap<&str, Vec<GpsFix>> = HashMap::new();
    for f in fixes {
        by_vehicle.entry(f.vehicle_id.as_str()).or_default().push(f.clone());
    }
    for v in by_vehicle.values_mut() {
        // stable, so the first of duplicate timestamps stays in front
        v.sort_by_key(|f| f.t);
    }
    let mut out = MergeResult::default();
    for ev in events {
        match by_vehicle.get(ev.vehicle_id.as_str()).and_then(|fx| locate_event(fx, ev)) {
            Some(l) => out.located.push(l),
            None => out.omitted += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Enumeration {
    /// Every (cell, slot) in the domain and slot range, zero demand included.
    #[default]
    Dense,
    /// Only (cell, slot) pairs with at least one event.
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub mode: Enumeration,
    pub demand_events: DemandEvents,
    /// Inclusive slot range for dense enumeration; defaults to the range
    /// observed in the events.
    pub slot_range: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<LabeledSample>,
    /// Qualifying events outside the grid or before the epoch.
    pub skipped: usize,
}

fn enumerate(
    grid: &grid::DemandGrid,
    rect: Option<CellRect>,
    slots: Option<(u64, u64)>,
    spec: &GridSpec,
    th: &LevelThresholds,
    opts: &SampleOptions,
    keep: impl Fn(CellId) -> bool,
) -> Vec<LabeledSample> {
    match opts.mode {
        Enumeration::Sparse => grid
            .iter()
            .filter(|&(c, _, _)| keep(c))
            .map(|(c, s, n)| LabeledSample::new(c, spec.slot(s), n, spec, th))
            .collect(),
        Enumeration::Dense => {
            let (Some(rect), Some((lo, hi))) = (rect, slots) else {
                return Vec::new();
            };
            rect.cells()
                .flat_map(|c| (lo..=hi).map(move |s| (c, s)))
                .map(|(c, s)| LabeledSample::new(c, spec.slot(s), grid.count(c, s), spec, th))
                .collect()
        }
    }
}

/// Labels every (cell, slot) of the whole grid from aggregated counts.
pub fn build_samples(located: &[LocatedEvent], spec: &GridSpec, th: &LevelThresholds, opts: &SampleOptions) -> SampleSet {
    let agg = aggregate(located, spec, opts.demand_events);
    let slots = opts.slot_range.or_else(|| agg.grid.slot_range());
    SampleSet {
        samples: enumerate(&agg.grid, Some(spec.full_rect()), slots, spec, th, opts, |_| true),
        skipped: agg.skipped,
    }
}

/// Builds one dataset per facility id (sorted). Each facility's domain is
/// the bounding rectangle of the cells of its own qualifying events; dense
/// enumeration covers that domain over the slot range shared by all
/// facilities.
pub fn build_facility_datasets(
    located: &[LocatedEvent],
    spec: &GridSpec,
    th: &LevelThresholds,
    opts: &SampleOptions,
) -> (Vec<FacilityDataset>, usize) {
    let mut by_facility: BTreeMap<&str, Vec<LocatedEvent>> = BTreeMap::new();
    for l in located {
        by_facility.entry(l.event.facility_id.as_str()).or_default().push(l.clone());
    }
    let aggs: Vec<_> = by_facility
        .iter()
        .map(|(id, evs)| (*id, aggregate(evs, spec, opts.demand_events)))
        .collect();
    let slots = opts.slot_range.or_else(|| {
        aggs.iter()
            .filter_map(|(_, a)| a.grid.slot_range())
            .reduce(|(a0, a1), (b0, b1)| (a0.min(b0), a1.max(b1)))
    });
    let skipped = aggs.iter().map(|(_, a)| a.skipped).sum();
    let datasets = aggs
        .into_iter()
        .map(|(id, agg)| {
            let domain = CellRect::bounding(agg.grid.iter().map(|(c, _, _)| c));
            FacilityDataset {
                facility_id: id.to_string(),
                domain,
                samples: enumerate(&agg.grid, domain, slots, spec, th, opts, |_| true),
            }
        })
        .collect();
    (datasets, skipped)
}
