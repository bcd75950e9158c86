//! Adam optimizer with bias correction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer hyperparameters. Defaults: beta1 0.9, beta2 0.999,
/// epsilon 1e-8; the learning rate comes from the preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers per trainable parameter plus the shared
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub t: u64,
    pub moments: HashMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamState<S> {
    /// Zero moments for every trainable entry of `params`.
    pub fn new(config: AdamConfig, params: &ParamSet<S>) -> Self {
        let mut moments = HashMap::new();
        for (name, value, trainable) in params.iter() {
            if trainable {
                moments.insert(
                    name.to_string(),
                    (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())),
                );
            }
        }
        AdamState {
            config,
            t: 0,
            moments,
        }
    }
}

/// One synchronous Adam update over every trainable parameter.
/// Parameters without a gradient entry are treated as having gradient
/// zero (their moments still decay).
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &GradSet<S>,
    state: &mut AdamState<S>,
) -> Result<()> {
    state.t += 1;
    let cfg = state.config;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let lr = S::from_f64(cfg.lr);
    let eps = S::from_f64(cfg.epsilon);
    let corr1 = S::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let corr2 = S::from_f64(1.0 - cfg.beta2.powi(state.t as i32));

    for name in params.trainable_names() {
        let (m, v) = state
            .moments
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("optimizer has no moments for {name:?}")))?;
        let p = params.get_mut(&name)?;
        if m.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: m.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        let zero = Tensor::zeros(p.shape());
        let g = match grads.get(&name) {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(Error::Dimension {
                        op: "adam_step",
                        lhs: g.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                g
            }
            None => &zero,
        };
        let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (S::one() - b1) * gd[i];
            vd[i] = b2 * vd[i] + (S::one() - b2) * gd[i] * gd[i];
            let mhat = md[i] / corr1;
            let vhat = vd[i] / corr2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::full(&[3], value), true).unwrap();
        ps
    }

    fn grads_of(value: f64) -> GradSet<f64> {
        let mut m = HashMap::new();
        m.insert("p".to_string(), Tensor::full(&[3], value));
        GradSet { by_name: m }
    }

    #[test]
    fn first_step_delta_matches_hand_formula() {
        let mut params = one_param(1.0);
        let mut state = AdamState::new(AdamConfig::with_lr(2.5e-4), &params);
        adam_step(&mut params, &grads_of(1.0), &mut state).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction, so the delta is
        // −lr·1/(√1 + ε) = −lr/(1 + 1e-8).
        let want = 1.0 - 2.5e-4 * (1.0 / (1.0 + 1e-8));
        for &p in params.get("p").unwrap().data() {
            assert!((p - want).abs() < 1e-18, "{p} vs {want}");
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = one_param(0.7);
        let mut state = AdamState::new(AdamConfig::with_lr(1e-3), &params);
        adam_step(&mut params, &grads_of(0.0), &mut state).unwrap();
        assert!(params.get("p").unwrap().data().iter().all(|&p| p == 0.7));
    }

    #[test]
    fn first_step_is_scale_invariant() {
        let mut small = one_param(0.0);
        let mut s1 = AdamState::new(AdamConfig::with_lr(1e-3), &small);
        adam_step(&mut small, &grads_of(1.0), &mut s1).unwrap();

        let mut big = one_param(0.0);
        let mut s2 = AdamState::new(AdamConfig::with_lr(1e-3), &big);
        adam_step(&mut big, &grads_of(1000.0), &mut s2).unwrap();

        let d_small = small.get("p").unwrap().data()[0];
        let d_big = big.get("p").unwrap().data()[0];
        assert!(d_small < 0.0 && d_big < 0.0);
        assert!((d_small.abs() - 1e-3).abs() < 1e-8);
        assert!((d_big.abs() - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn missing_gradient_decays_moments() {
        let mut params = one_param(0.0);
        let mut state = AdamState::new(AdamConfig::with_lr(1e-3), &params);
        adam_step(&mut params, &grads_of(1.0), &mut state).unwrap();
        let empty = GradSet {
            by_name: HashMap::new(),
        };
        adam_step(&mut params, &empty, &mut state).unwrap();
        let (m, _) = &state.moments["p"];
        assert!((m.data()[0] - 0.09).abs() < 1e-12); // 0.1 decayed by β1
    }
}
