//! Experiment configuration: one JSON document covering the grid, labels,
//! synthetic corpus, model, federated schedule, split and sweep matrix.
//!
//! Every section has defaults, unknown keys are rejected, and every nested
//! constraint is checked at load time. Errors name the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taxifed::eval::{Patience, SplitRatios};
use taxifed::fed::FedConfig;
use taxifed::grid::{GridSpec, LevelThresholds};
use taxifed::ingest::{SampleOptions, SyntheticConfig};
use taxifed::nn::{default_layer_widths, AdamConfig, BatchPolicy, LocalOptimizer, FEATURE_LEN, N_CLASSES};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub thresholds: LevelThresholds,
    pub synthetic: SyntheticSection,
    pub model: ModelConfig,
    pub fed: FedSection,
    pub split: SplitRatios,
    pub sweep: SweepConfig,
    pub master_seed: u64,
    /// Parent directory for runs whose `--out` is not given.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            thresholds: LevelThresholds::default(),
            synthetic: SyntheticSection::default(),
            model: ModelConfig::default(),
            fed: FedSection::default(),
            split: SplitRatios::default(),
            sweep: SweepConfig::default(),
            master_seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Synthetic corpus parameters. The grid and the level thresholds come from
/// the top-level sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_facilities: usize,
    pub days: u32,
    pub target_trips: f64,
    pub hotspots_per_facility: usize,
    pub hotspot_sigma_cells: f64,
    pub city_sigma_cells: Option<f64>,
    pub city_center_cells: Option<(f64, f64)>,
    pub base_rate: f64,
    pub rush_hours: Vec<f64>,
    pub rush_multiplier: f64,
    pub rush_width_h: f64,
    pub weekend_factor: f64,
    pub gap_probability: f64,
    pub fix_drop_probability: f64,
    pub fix_interval_s: i64,
    pub fix_window_s: i64,
    pub vehicles_per_facility: usize,
    pub speed_kmh: f64,
    pub trip_km_min: f64,
    pub trip_km_max: f64,
    pub samples: SampleOptions,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            n_facilities: d.n_facilities,
            days: d.days,
            target_trips: d.target_trips,
            hotspots_per_facility: d.hotspots_per_facility,
            hotspot_sigma_cells: d.hotspot_sigma_cells,
            city_sigma_cells: d.city_sigma_cells,
            city_center_cells: d.city_center_cells,
            base_rate: d.base_rate,
            rush_hours: d.rush_hours,
            rush_multiplier: d.rush_multiplier,
            rush_width_h: d.rush_width_h,
            weekend_factor: d.weekend_factor,
            gap_probability: d.gap_probability,
            fix_drop_probability: d.fix_drop_probability,
            fix_interval_s: d.fix_interval_s,
            fix_window_s: d.fix_window_s,
            vehicles_per_facility: d.vehicles_per_facility,
            speed_kmh: d.speed_kmh,
            trip_km_min: d.trip_km_min,
            trip_km_max: d.trip_km_max,
            samples: d.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input width first, class count last.
    pub layer_widths: Vec<usize>,
    pub optimizer: LocalOptimizer,
    pub batch: BatchPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layer_widths: default_layer_widths(),
            optimizer: LocalOptimizer::Adam(AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            }),
            batch: BatchPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub n_rounds: u32,
    pub local_epochs: u32,
    pub client_fraction: f64,
    pub patience: Patience,
    pub overlap_margin: u32,
    /// Facilities used by `train`; `None` uses every prepared facility.
    pub facilities: Option<usize>,
    pub threads: usize,
}

impl Default for FedSection {
    fn default() -> Self {
        let d = FedConfig::default();
        Self {
            n_rounds: d.n_rounds,
            local_epochs: d.local_epochs,
            client_fraction: d.client_fraction,
            patience: d.patience,
            overlap_margin: d.overlap_margin,
            facilities: None,
            threads: d.threads,
        }
    }
}

/// The experiment matrix run by `sweep`: every facility count crossed with
/// every patience value, repeated for `seeds` consecutive seeds starting at
/// the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub facilities: Vec<usize>,
    pub patience: Vec<Patience>,
    pub seeds: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            facilities: vec![4, 8, 16],
            patience: vec![Patience::Rounds(10), Patience::Rounds(30), Patience::Infinite],
            seeds: 3,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.grid.validate().map_err(|e| CliError::config("grid", e))?;
        self.synthetic_config().validate().map_err(|e| CliError::config("synthetic", e))?;

        let widths = &self.model.layer_widths;
        if widths.len() < 2 || widths.contains(&0) {
            return Err(CliError::config("model.layer_widths", "need at least two positive widths"));
        }
        if widths[0] != FEATURE_LEN || widths[widths.len() - 1] != N_CLASSES {
            return Err(CliError::config(
                "model.layer_widths",
                format!("must start with {FEATURE_LEN} inputs and end with {N_CLASSES} classes, got {widths:?}"),
            ));
        }
        let model_only = FedConfig {
            optimizer: self.model.optimizer,
            ..FedConfig::default()
        };
        model_only.validate().map_err(|e| CliError::config("model.optimizer", e))?;
        if self.model.batch.batch_size == 0 {
            return Err(CliError::config("model.batch.batch_size", "must be >= 1"));
        }

        if let Patience::Rounds(0) = self.fed.patience {
            return Err(CliError::config("fed.patience", "must be >= 1 or \"inf\""));
        }
        if self.fed.facilities == Some(0) {
            return Err(CliError::config("fed.facilities", "must be >= 1"));
        }
        self.fed_config().validate().map_err(|e| CliError::config("fed", e))?;

        self.split.validate().map_err(|e| CliError::config("split", e))?;

        if self.sweep.facilities.is_empty() || self.sweep.facilities.contains(&0) {
            return Err(CliError::config("sweep.facilities", "need at least one positive facility count"));
        }
        if self.sweep.patience.is_empty() || self.sweep.patience.contains(&Patience::Rounds(0)) {
            return Err(CliError::config("sweep.patience", "need at least one patience >= 1"));
        }
        if self.sweep.seeds == 0 {
            return Err(CliError::config("sweep.seeds", "must be >= 1"));
        }
        Ok(())
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        let s = &self.synthetic;
        SyntheticConfig {
            n_facilities: s.n_facilities,
            days: s.days,
            grid: self.grid.clone(),
            target_trips: s.target_trips,
            hotspots_per_facility: s.hotspots_per_facility,
            hotspot_sigma_cells: s.hotspot_sigma_cells,
            city_sigma_cells: s.city_sigma_cells,
            city_center_cells: s.city_center_cells,
            base_rate: s.base_rate,
            rush_hours: s.rush_hours.clone(),
            rush_multiplier: s.rush_multiplier,
            rush_width_h: s.rush_width_h,
            weekend_factor: s.weekend_factor,
            gap_probability: s.gap_probability,
            fix_drop_probability: s.fix_drop_probability,
            fix_interval_s: s.fix_interval_s,
            fix_window_s: s.fix_window_s,
            vehicles_per_facility: s.vehicles_per_facility,
            speed_kmh: s.speed_kmh,
            trip_km_min: s.trip_km_min,
            trip_km_max: s.trip_km_max,
            thresholds: self.thresholds,
            samples: s.samples,
        }
    }

    /// The federated schedule seeded with the master seed.
    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            n_rounds: self.fed.n_rounds,
            local_epochs: self.fed.local_epochs,
            client_fraction: self.fed.client_fraction,
            patience: self.fed.patience,
            seed: self.master_seed,
            overlap_margin: self.fed.overlap_margin,
            optimizer: self.model.optimizer,
            batch: self.model.batch,
            threads: self.fed.threads,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(compact.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_of(text: &str) -> String {
        match ExperimentConfig::from_json(text) {
            Err(CliError::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.synthetic.n_facilities, 16);
        assert_eq!(cfg.fed.n_rounds, 300);
        assert_eq!(cfg.fed.patience, Patience::Rounds(30));
        assert_eq!(cfg.grid.n_rows, 20);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        assert_eq!(path_of(r#"{"fed": {"n_round": 3}}"#), "fed.n_round");
        assert_eq!(path_of(r#"{"bogus": 1}"#), "bogus");
    }

    #[test]
    fn type_errors_name_their_path() {
        assert_eq!(path_of(r#"{"fed": {"n_rounds": "many"}}"#), "fed.n_rounds");
        assert_eq!(path_of(r#"{"grid": {"n_rows": -1}}"#), "grid.n_rows");
        assert_eq!(path_of(r#"{"thresholds": [3, 2, 1]}"#), "thresholds");
    }

    #[test]
    fn semantic_errors_name_their_section() {
        assert_eq!(path_of(r#"{"fed": {"n_rounds": 0}}"#), "fed");
        assert_eq!(path_of(r#"{"fed": {"patience": 0}}"#), "fed.patience");
        assert_eq!(path_of(r#"{"model": {"layer_widths": [5, 4]}}"#), "model.layer_widths");
        assert_eq!(
            path_of(r#"{"model": {"optimizer": {"kind": "sgd", "learning_rate": -1.0}}}"#),
            "model.optimizer"
        );
        assert_eq!(path_of(r#"{"split": {"train": 0.5, "val": 0.5, "test": 0.5}}"#), "split");
        assert_eq!(path_of(r#"{"synthetic": {"days": 0}}"#), "synthetic");
        assert_eq!(path_of(r#"{"sweep": {"seeds": 0}}"#), "sweep.seeds");
    }

    #[test]
    fn patience_accepts_infinity() {
        let cfg = ExperimentConfig::from_json(r#"{"fed": {"patience": "inf"}}"#).unwrap();
        assert_eq!(cfg.fed.patience, Patience::Infinite);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn synthetic_inherits_top_level_grid() {
        let cfg = ExperimentConfig::from_json(r#"{"grid": {"origin_lat": 1.0, "origin_lon": 2.0, "cell_size_km": 0.5, "n_rows": 8, "n_cols": 8, "slot_duration_s": 1800, "epoch_start": 0}, "synthetic": {"n_facilities": 4}}"#).unwrap();
        let syn = cfg.synthetic_config();
        assert_eq!(syn.grid, cfg.grid);
        assert_eq!(syn.n_facilities, 4);
    }

    #[test]
    fn nested_sections_accept_partial_fields() {
        let cfg = ExperimentConfig::from_json(
            r#"{"grid": {"n_rows": 8}, "split": {"train": 0.6, "val": 0.2}, "model": {"optimizer": {"kind": "adam", "learning_rate": 0.01}, "batch": {"batch_size": 32}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.grid.n_rows, 8);
        assert_eq!(cfg.grid.n_cols, GridSpec::default().n_cols);
        assert_eq!(cfg.split.test, 0.2);
        assert_eq!(cfg.model.batch.batch_size, 32);
        let LocalOptimizer::Adam(adam) = cfg.model.optimizer else { panic!("adam expected") };
        assert_eq!((adam.learning_rate, adam.beta1), (0.01, AdamConfig::default().beta1));
        assert_eq!(path_of(r#"{"grid": {"n_row": 8}}"#), "grid.n_row");
    }
}
