//! Fully connected tanh network with a softmax output, cross-entropy loss
//! and hand-written reverse-mode gradients.
//!
//! Hidden layers apply `tanh`; the output layer is affine and produces
//! logits. Softmax is applied by the loss and by [`predict`]. The softmax
//! and cross-entropy derivatives are fused: the output-layer error is
//! `p - g` (divided by the batch size for the mean loss).

mod adam;
mod checkpoint;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use train::{train_epoch, BatchPolicy, LocalOptimizer, Optimizer, TrainSet};

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CellId, DemandLevel, GridSpec, SlotId};
use crate::seed;

pub const N_CLASSES: usize = DemandLevel::COUNT;
pub const FEATURE_LEN: usize = 6;
/// Lower clamp on probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default hidden layout: three tanh layers of 64 units.
pub fn default_layer_widths() -> Vec<usize> {
    vec![FEATURE_LEN, 64, 64, 64, N_CLASSES]
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid layer widths {0:?}")]
    InvalidWidths(Vec<usize>),
    #[error("parameter shapes differ")]
    ShapeMismatch,
    #[error("label {0} out of range")]
    LabelOutOfRange(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Model input encoding of (cell, time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_LEN]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Normalised row/col followed by cyclic hour-of-day and day-of-week.
pub fn encode_features(cell: CellId, slot: SlotId, spec: &GridSpec) -> FeatureVector {
    let denom = |n: u32| if n > 1 { (n - 1) as f64 } else { 1.0 };
    let hour = 2.0 * PI * slot.hour_of_day as f64 / 24.0;
    let dow = 2.0 * PI * slot.day_of_week as f64 / 7.0;
    FeatureVector([
        cell.row as f64 / denom(spec.n_rows),
        cell.col as f64 / denom(spec.n_cols),
        hour.sin(),
        hour.cos(),
        dow.sin(),
        dow.cos(),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Array2::zeros((n_out, n_in)),
            bias: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// Layer weights and biases. Also used for gradients and Adam moments,
/// which share the parameter shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(widths: &[usize]) -> Result<Self, NnError> {
        check_widths(widths)?;
        Ok(Self {
            layers: widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Layer::zeros(l.n_in(), l.n_out())).collect(),
        }
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Layer::n_out));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, Layer::n_in)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::n_out)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len())
    }

    /// Parameters layer by layer: weights row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn from_flat(widths: &[usize], flat: &[f64]) -> Result<Self, NnError> {
        let mut p = Self::zeros(widths)?;
        if flat.len() != p.n_params() {
            return Err(NnError::DimensionMismatch {
                expected: p.n_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut p.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x = it.next().unwrap());
        }
        Ok(p)
    }

    /// Mutable iterator over every scalar, in [`flatten`](Self::flatten) order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_widths(widths: &[usize]) -> Result<(), NnError> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(NnError::InvalidWidths(widths.to_vec()));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(widths: &[usize], seed: u64) -> Result<ModelParams, NnError> {
    let mut p = ModelParams::zeros(widths)?;
    let mut rng = seed::rng_from(seed);
    for l in &mut p.layers {
        let limit = (6.0 / (l.n_in() + l.n_out()) as f64).sqrt();
        l.weight.iter_mut().for_each(|w| *w = rng.random_range(-limit..=limit));
    }
    Ok(p)
}

pub type Logits = Vec<f64>;

/// Forward pass for a single input.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Logits, NnError> {
    if x.len() != params.input_width() {
        return Err(NnError::DimensionMismatch {
            expected: params.input_width(),
            got: x.len(),
        });
    }
    let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
    let acts = forward_batch(params, batch);
    Ok(acts.last().unwrap().row(0).to_vec())
}

/// Activations of every layer for a batch (rows are samples). Element 0
/// is the input, the last element holds the logits.
pub(crate) fn forward_batch(params: &ModelParams, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(x.to_owned());
    let last = params.layers.len() - 1;
    for (i, l) in params.layers.iter().enumerate() {
        let mut z = acts[i].dot(&l.weight.t());
        z += &l.bias;
        if i < last {
            z.mapv_inplace(f64::tanh);
        }
        acts.push(z);
    }
    acts
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// One-hot target vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHot {
    pub class: usize,
    pub n: usize,
}

impl OneHot {
    pub fn new(class: usize, n: usize) -> Result<Self, NnError> {
        if class >= n {
            return Err(NnError::LabelOutOfRange(class));
        }
        Ok(Self { class, n })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.n).map(|j| if j == self.class { 1.0 } else { 0.0 }).collect()
    }
}

/// `-sum_j g_j ln(max(p_j, 1e-12))`
pub fn cross_entropy(p: &[f64], g: &[f64]) -> f64 {
    -p.iter().zip(g).map(|(&p, &g)| g * p.max(PROB_FLOOR).ln()).sum::<f64>()
}

fn check_batch(params: &ModelParams, x: ArrayView2<f64>, labels: &[usize]) -> Result<(), NnError> {
    if labels.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if x.nrows() != labels.len() {
        return Err(NnError::DimensionMismatch {
            expected: labels.len(),
            got: x.nrows(),
        });
    }
    if x.ncols() != params.input_width() {
        return Err(NnError::DimensionMismatch {
            expected: params.input_width(),
            got: x.ncols(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= params.output_width()) {
        return Err(NnError::LabelOutOfRange(bad));
    }
    Ok(())
}

fn batch_loss_from_probs(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(PROB_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

/// Mean cross-entropy of the softmax outputs over a batch.
pub fn loss_batch(params: &ModelParams, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, NnError> {
    check_batch(params, x, labels)?;
    let mut acts = forward_batch(params, x);
    let mut probs = acts.pop().unwrap();
    softmax_rows(&mut probs);
    Ok(batch_loss_from_probs(&probs, labels))
}

/// Exact gradient of [`loss_batch`] with respect to every parameter,
/// together with the loss itself.
pub fn backward(params: &ModelParams, x: ArrayView2<f64>, labels: &[usize]) -> Result<(Gradients, f64), NnError> {
    check_batch(params, x, labels)?;
    let mut acts = forward_batch(params, x);
    let n = labels.len() as f64;

    let mut delta = acts.pop().unwrap();
    softmax_rows(&mut delta);
    let loss = batch_loss_from_probs(&delta, labels);
    for (i, &y) in labels.iter().enumerate() {
        delta[(i, y)] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n);

    let mut grads = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let input = &acts[li];
        let gw = delta.t().dot(input);
        let gb = delta.sum_axis(Axis(0));
        grads.push(Layer { weight: gw, bias: gb });
        if li > 0 {
            let mut next = delta.dot(&layer.weight);
            // input is tanh output of the previous layer
            Zip::from(&mut next).and(input).for_each(|d, &h| *d *= 1.0 - h * h);
            delta = next;
        }
    }
    grads.reverse();
    Ok((ModelParams { layers: grads }, loss))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ModelParams, x: &[f64]) -> Result<(DemandLevel, Vec<f64>), NnError> {
    if params.output_width() != N_CLASSES {
        return Err(NnError::DimensionMismatch {
            expected: N_CLASSES,
            got: params.output_width(),
        });
    }
    let p = softmax(&forward(params, x)?);
    let level = DemandLevel::from_index(argmax(&p)).expect("four outputs");
    Ok((level, p))
}

/// Predicted class index for every row of `x`.
pub fn predict_batch(params: &ModelParams, x: ArrayView2<f64>) -> Vec<usize> {
    let logits = forward_batch(params, x).pop().unwrap();
    logits.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())).collect()
}
