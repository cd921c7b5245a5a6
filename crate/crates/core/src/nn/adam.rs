use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParams, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub hyper: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ModelParams, hyper: AdamConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<(), NnError> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(NnError::ShapeMismatch);
    }
    state.step += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    let layers = params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.layers.iter_mut().zip(state.v.layers.iter_mut()));
    for ((p, g), (m, v)) in layers {
        let upd = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        Zip::from(&mut p.weight).and(&g.weight).and(&mut m.weight).and(&mut v.weight).for_each(upd);
        Zip::from(&mut p.bias).and(&g.bias).and(&mut m.bias).and(&mut v.bias).for_each(upd);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn scalar(w: f64) -> ModelParams {
        let mut p = ModelParams::zeros(&[1, 1]).unwrap();
        p.layers[0].bias[0] = w;
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = init_params(&[6, 8, 4], 1).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut st).unwrap();
        assert_eq!(p, before);
        assert!(st.m.values().chain(st.v.values()).all(|&x| x == 0.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.5, -2.0, 300.0] {
            let mut p = scalar(1.0);
            let mut grad = scalar(0.0);
            grad.layers[0].bias[0] = g;
            let mut st = AdamState::new(&p, cfg);
            adam_step(&mut p, &grad, &mut st).unwrap();
            let delta = p.layers[0].bias[0] - 1.0;
            let expect = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((delta - expect).abs() < 1e-15, "g={g}: {delta} vs {expect}");
            assert!((delta.abs() - cfg.learning_rate).abs() < 1e-7);
        }
    }

    #[test]
    fn minimises_scalar_quadratic() {
        // f(w) = (w - 3)^2, f'(w) = 2(w - 3)
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p, AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() });
        for _ in 0..2000 {
            let mut g = scalar(0.0);
            g.layers[0].bias[0] = 2.0 * (p.layers[0].bias[0] - 3.0);
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!((p.layers[0].bias[0] - 3.0).abs() < 1e-2, "w = {}", p.layers[0].bias[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = ModelParams::zeros(&[2, 3]).unwrap();
        let g = ModelParams::zeros(&[2, 4]).unwrap();
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert_eq!(adam_step(&mut p, &g, &mut st), Err(NnError::ShapeMismatch));
    }
}
