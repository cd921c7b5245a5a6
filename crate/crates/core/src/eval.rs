//! Data splits, classification metrics, early stopping and the
//! single-vs-federated comparison.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::grid::DemandLevel;
use crate::seed;

const N: usize = DemandLevel::COUNT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least 3 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no labels")]
    Empty,
    #[error("label {0} out of range")]
    LabelOutOfRange(usize),
    #[error("reports were computed on different test sets ({0} vs {1} samples)")]
    MismatchedTestSets(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), EvalError> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(EvalError::InvalidRatios(r));
        }
        Ok(())
    }

    /// Part sizes by largest-remainder rounding; ties favour train, then val.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let exact = [self.train * n as f64, self.val * n as f64, self.test * n as f64];
        let mut sizes = exact.map(|x| x.floor() as usize);
        let assigned: usize = sizes.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &k in order.iter().cycle().take(n.saturating_sub(assigned)) {
            sizes[k] += 1;
        }
        sizes
    }
}

/// Disjoint index sets covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Seeded uniform shuffle followed by contiguous slicing.
pub fn split(n: usize, ratios: &SplitRatios, seed: u64) -> Result<Split, EvalError> {
    ratios.validate()?;
    if n < 3 {
        return Err(EvalError::TooFewSamples(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng_from(seed));
    let [a, b, _] = ratios.sizes(n);
    Ok(Split {
        test_idx: idx[a + b..].to_vec(),
        val_idx: idx[a..a + b].to_vec(),
        train_idx: idx[..a].to_vec(),
    })
}

/// Splits each label class separately and concatenates, so every class
/// keeps the requested proportions.
pub fn split_stratified(labels: &[usize], ratios: &SplitRatios, seed: u64) -> Result<Split, EvalError> {
    ratios.validate()?;
    if labels.len() < 3 {
        return Err(EvalError::TooFewSamples(labels.len()));
    }
    let mut out = Split {
        train_idx: vec![],
        val_idx: vec![],
        test_idx: vec![],
    };
    let max = labels.iter().copied().max().unwrap_or(0);
    for class in 0..=max {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut seed::derive_rng(seed, "stratify", None, Some(class as u64)));
        let [a, b, _] = ratios.sizes(members.len());
        out.train_idx.extend_from_slice(&members[..a]);
        out.val_idx.extend_from_slice(&members[a..a + b]);
        out.test_idx.extend_from_slice(&members[a + b..]);
    }
    Ok(out)
}

fn check_labels(preds: &[usize], truth: &[usize]) -> Result<(), EvalError> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truth.len()));
    }
    if let Some(&bad) = preds.iter().chain(truth).find(|&&l| l >= N) {
        return Err(EvalError::LabelOutOfRange(bad));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    check_labels(preds, truth)?;
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean recall over the classes present in `truth`.
pub fn balanced_accuracy(preds: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    check_labels(preds, truth)?;
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hit = [0usize; N];
    let mut total = [0usize; N];
    for (&p, &t) in preds.iter().zip(truth) {
        total[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let recalls: Vec<f64> = (0..N).filter(|&k| total[k] > 0).map(|k| hit[k] as f64 / total[k] as f64).collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// `m[t][p]`: rows are true labels, columns predictions.
pub type Confusion = [[u64; N]; N];

pub fn confusion(preds: &[usize], truth: &[usize]) -> Result<Confusion, EvalError> {
    check_labels(preds, truth)?;
    let mut m = [[0u64; N]; N];
    for (&p, &t) in preds.iter().zip(truth) {
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// `None` for classes absent from the test labels.
    pub per_class_recall: [Option<f64>; N],
    pub confusion: Confusion,
    pub n_test: usize,
}

impl MetricsReport {
    pub fn from_confusion(m: Confusion) -> Result<Self, EvalError> {
        let n_test: u64 = m.iter().flatten().sum();
        if n_test == 0 {
            return Err(EvalError::Empty);
        }
        let trace: u64 = (0..N).map(|k| m[k][k]).sum();
        let per_class_recall: [Option<f64>; N] = std::array::from_fn(|k| {
            let row: u64 = m[k].iter().sum();
            (row > 0).then(|| m[k][k] as f64 / row as f64)
        });
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        Ok(Self {
            accuracy: trace as f64 / n_test as f64,
            balanced_accuracy: present.iter().sum::<f64>() / present.len() as f64,
            per_class_recall,
            confusion: m,
            n_test: n_test as usize,
        })
    }

    pub fn from_predictions(preds: &[usize], truth: &[usize]) -> Result<Self, EvalError> {
        Self::from_confusion(confusion(preds, truth)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Sum of two confusion matrices.
pub fn merge_confusion(a: &Confusion, b: &Confusion) -> Confusion {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][j] + b[i][j]))
}

/// Number of rounds without improvement tolerated before stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Patience {
    Rounds(u32),
    Infinite,
}

impl Patience {
    pub fn exhausted(&self, rounds_since_best: u32) -> bool {
        match *self {
            Patience::Rounds(p) => rounds_since_best >= p,
            Patience::Infinite => false,
        }
    }
}

impl Default for Patience {
    fn default() -> Self {
        Patience::Rounds(30)
    }
}

impl fmt::Display for Patience {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Patience::Rounds(n) => write!(f, "{n}"),
            Patience::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Patience {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "infinite" | "∞" | "none" => Ok(Patience::Infinite),
            n => n
                .parse()
                .map(Patience::Rounds)
                .map_err(|_| format!("patience must be a non-negative integer or `inf`, got `{s}`")),
        }
    }
}

impl Serialize for Patience {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Patience::Rounds(n) => s.serialize_u32(*n),
            Patience::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Patience {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Patience::Rounds(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Improvements smaller than this are treated as noise.
pub const IMPROVEMENT_TOL: f64 = 1e-9;

/// Tracks the best (lowest) monitored value and a snapshot taken there.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState<T> {
    pub best_metric: f64,
    pub best_round: u32,
    pub rounds_since_best: u32,
    pub patience: Patience,
    pub best_snapshot: Option<T>,
}

impl<T: Clone> EarlyStopState<T> {
    pub fn new(patience: Patience) -> Self {
        Self {
            best_metric: f64::INFINITY,
            best_round: 0,
            rounds_since_best: 0,
            patience,
            best_snapshot: None,
        }
    }

    /// Records the metric for `round`; `snapshot` is cloned only on improvement.
    pub fn update(&mut self, metric: f64, round: u32, snapshot: &T) -> Decision {
        if metric < self.best_metric - IMPROVEMENT_TOL || self.best_snapshot.is_none() {
            self.best_metric = metric;
            self.best_round = round;
            self.rounds_since_best = 0;
            self.best_snapshot = Some(snapshot.clone());
        } else {
            self.rounds_since_best += 1;
        }
        if self.patience.exhausted(self.rounds_since_best) {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

pub fn early_stop_update<T: Clone>(state: &mut EarlyStopState<T>, metric: f64, round: u32, snapshot: &T) -> Decision {
    state.update(metric, round, snapshot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub single: MetricsReport,
    pub federated: MetricsReport,
    /// single - federated
    pub delta_accuracy: f64,
    pub delta_balanced_accuracy: f64,
}

impl ComparisonReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<20}{:>10}{:>12}{:>10}\n", "metric", "single", "federated", "delta");
        s += &format!(
            "{:<20}{:>10.4}{:>12.4}{:>+10.4}\n",
            "accuracy", self.single.accuracy, self.federated.accuracy, self.delta_accuracy
        );
        s += &format!(
            "{:<20}{:>10.4}{:>12.4}{:>+10.4}\n",
            "balanced_accuracy", self.single.balanced_accuracy, self.federated.balanced_accuracy, self.delta_balanced_accuracy
        );
        s += &format!("{:<20}{:>10}{:>12}\n", "n_test", self.single.n_test, self.federated.n_test);
        s
    }
}

pub fn compare(single: &MetricsReport, fed: &MetricsReport) -> Result<ComparisonReport, EvalError> {
    if single.n_test != fed.n_test {
        return Err(EvalError::MismatchedTestSets(single.n_test, fed.n_test));
    }
    Ok(ComparisonReport {
        single: single.clone(),
        federated: fed.clone(),
        delta_accuracy: single.accuracy - fed.accuracy,
        delta_balanced_accuracy: single.balanced_accuracy - fed.balanced_accuracy,
    })
}
