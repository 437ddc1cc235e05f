//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates for a list of parameter blocks,
/// allocated on the first step.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub t: u64,
    moments: Vec<(FeatureMatrix<T>, FeatureMatrix<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            moments: Vec::new(),
        }
    }
}

/// One update of `params` in place from `grads`, block by block.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut FeatureMatrix<T>],
    grads: &[&FeatureMatrix<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "adam: {} parameter blocks but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "adam: parameter shape {:?} but gradient shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|p| (FeatureMatrix::zeros(p.rows(), p.cols()), FeatureMatrix::zeros(p.rows(), p.cols())))
            .collect();
    } else if state.moments.len() != params.len()
        || state.moments.iter().zip(params.iter()).any(|((m, _), p)| m.shape() != p.shape())
    {
        return Err(Error::Contract("adam: parameter layout changed between steps".into()));
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut state.moments) {
        let (pd, gd) = (p.data_mut(), g.data());
        for (k, ((m, v), g)) in m.data_mut().iter_mut().zip(v.data_mut()).zip(gd).enumerate() {
            let g = g.as_f64();
            let mk = config.beta1 * m.as_f64() + (1.0 - config.beta1) * g;
            let vk = config.beta2 * v.as_f64() + (1.0 - config.beta2) * g * g;
            *m = T::of(mk);
            *v = T::of(vk);
            let step = config.lr * (mk / c1) / ((vk / c2).sqrt() + config.eps);
            pd[k] = T::of(pd[k].as_f64() - step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = FeatureMatrix<f64>;

    fn step(p: &mut M, g: &M, s: &mut AdamState<f64>, c: &AdamConfig) -> Result<()> {
        adam_step(&mut [p], &[g], s, c)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = M::from_rows(&[&[1.0, -2.0]]);
        let orig = p.clone();
        let mut s = AdamState::new();
        for _ in 0..3 {
            step(&mut p, &M::zeros(1, 2), &mut s, &AdamConfig::default()).unwrap();
        }
        assert!(p.bit_eq(&orig));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = M::filled(1, 1, 0.0);
        let mut s = AdamState::new();
        step(&mut p, &M::filled(1, 1, 1.0), &mut s, &cfg).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_rolled_reference() {
        let cfg = AdamConfig {
            lr: 0.05,
            beta1: 0.8,
            beta2: 0.9,
            eps: 1e-6,
        };
        let grads = [0.5, -1.5, 2.0, 0.25];
        let mut p = M::filled(1, 1, 1.0);
        let mut s = AdamState::new();
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            step(&mut p, &M::filled(1, 1, g), &mut s, &cfg).unwrap();
            m = 0.8 * m + 0.2 * g;
            v = 0.9 * v + 0.1 * g * g;
            let t = (i + 1) as i32;
            theta -= 0.05 * (m / (1.0 - 0.8f64.powi(t))) / ((v / (1.0 - 0.9f64.powi(t))).sqrt() + 1e-6);
            assert!((p.get(0, 0) - theta).abs() < 1e-14);
        }
        assert_eq!(s.t, 4);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = M::zeros(2, 2);
        let mut s = AdamState::new();
        let err = step(&mut p, &M::zeros(1, 2), &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = adam_step(&mut [&mut p], &[], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = M::from_rows(&[&[0.3, -0.7, 1.1]]);
            let mut s = AdamState::new();
            let mut traj = Vec::new();
            for k in 0..20 {
                let g = p.map(|x| x * 2.0 - k as f64 * 0.01);
                step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
                traj.extend_from_slice(p.data());
            }
            traj
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
