use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{adam_step, backward, AdamConfig, AdamState, FeatureVector, ModelParams, NnError, FEATURE_LEN};
use crate::seed::Rng;

/// Design matrix plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl TrainSet {
    pub fn from_features<'a, I>(rows: I) -> Self
    where
        I: IntoIterator<Item = (&'a FeatureVector, usize)>,
    {
        let mut flat = Vec::new();
        let mut y = Vec::new();
        for (f, label) in rows {
            flat.extend_from_slice(&f.0);
            y.push(label);
        }
        let x = Array2::from_shape_vec((y.len(), FEATURE_LEN), flat).expect("rows have FEATURE_LEN columns");
        Self { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Full-batch below `full_batch_below` samples, shuffled mini-batches otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchPolicy {
    pub full_batch_below: usize,
    pub batch_size: usize,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            full_batch_below: 4096,
            batch_size: 256,
        }
    }
}

/// Optimizer selection for local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LocalOptimizer {
    Adam(AdamConfig),
    /// Plain `w - lr * g` steps.
    Sgd { learning_rate: f64 },
}

impl Default for LocalOptimizer {
    fn default() -> Self {
        LocalOptimizer::Adam(AdamConfig::default())
    }
}

impl LocalOptimizer {
    pub fn start(&self, params: &ModelParams) -> Optimizer {
        match *self {
            LocalOptimizer::Adam(cfg) => Optimizer::Adam(AdamState::new(params, cfg)),
            LocalOptimizer::Sgd { learning_rate } => Optimizer::Sgd { learning_rate },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { learning_rate: f64 },
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<(), NnError> {
        match self {
            Optimizer::Adam(state) => adam_step(params, grads, state),
            Optimizer::Sgd { learning_rate } => {
                if !params.same_shape(grads) {
                    return Err(NnError::ShapeMismatch);
                }
                params.values_mut().zip(grads.values()).for_each(|(p, g)| *p -= *learning_rate * g);
                Ok(())
            }
        }
    }
}

/// One pass over `data`. Returns the mean of the per-batch losses seen
/// before each update.
pub fn train_epoch(
    params: &mut ModelParams,
    data: &TrainSet,
    opt: &mut Optimizer,
    policy: BatchPolicy,
    rng: &mut Rng,
) -> Result<f64, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if data.len() < policy.full_batch_below {
        let (g, loss) = backward(params, data.x.view(), &data.y)?;
        opt.step(params, &g)?;
        return Ok(loss);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for idx in order.chunks(policy.batch_size.max(1)) {
        let xb = data.x.select(Axis(0), idx);
        let yb: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
        let (g, loss) = backward(params, xb.view(), &yb)?;
        opt.step(params, &g)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}
