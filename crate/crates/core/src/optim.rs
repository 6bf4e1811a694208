//! First-order optimizers on flat `f64` parameter vectors.
//!
//! Weight decay is coupled L2 everywhere: SGD, Adam and RAdam add
//! `weight_decay * theta` to the gradient before the update, LAMB adds it to
//! the per-layer update direction before computing the trust ratio.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamVector;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("shape mismatch: {what} has length {got}, expected {expected}")]
    ShapeMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("empty layer partition")]
    EmptyPartition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SgdMomentum,
    Adam,
    Radam,
    Lamb,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_lamb_clamp() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHyper {
    pub algorithm: Algorithm,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_lamb_clamp")]
    pub lamb_clamp: f64,
}

impl OptimizerHyper {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: 0.0,
            lamb_clamp: default_lamb_clamp(),
        }
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            ..Self::new(Algorithm::SgdMomentum)
        }
    }

    /// Checks ranges; the error string names the offending field.
    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64, name: &str| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1), got {v}"))
            }
        };
        unit(self.momentum, "momentum")?;
        unit(self.beta1, "beta1")?;
        unit(self.beta2, "beta2")?;
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(format!("epsilon must be finite and > 0, got {}", self.epsilon));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.lamb_clamp.is_finite() && self.lamb_clamp > 0.0) {
            return Err(format!("lamb_clamp must be finite and > 0, got {}", self.lamb_clamp));
        }
        Ok(())
    }
}

/// Per-parameter optimizer buffers.
///
/// `first_moment` is the velocity for SGD and `m` for the Adam family;
/// `second_moment` is empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub rho_inf: Option<f64>,
}

pub fn optimizer_init(hyper: &OptimizerHyper, n_params: usize) -> OptimizerState {
    let second = match hyper.algorithm {
        Algorithm::SgdMomentum => Vec::new(),
        _ => vec![0.0; n_params],
    };
    let rho_inf = match hyper.algorithm {
        Algorithm::Radam => Some(2.0 / (1.0 - hyper.beta2) - 1.0),
        _ => None,
    };
    OptimizerState {
        step_count: 0,
        first_moment: vec![0.0; n_params],
        second_moment: second,
        rho_inf,
    }
}

fn check_inputs(
    theta: &[f64],
    g: &[f64],
    state: &OptimizerState,
    needs_second: bool,
    lr: f64,
) -> Result<(), OptimError> {
    let n = theta.len();
    let same = |what, got: usize| {
        if got == n {
            Ok(())
        } else {
            Err(OptimError::ShapeMismatch { what, got, expected: n })
        }
    };
    same("gradient", g.len())?;
    same("first moment", state.first_moment.len())?;
    if needs_second {
        same("second moment", state.second_moment.len())?;
    }
    if !lr.is_finite() {
        return Err(OptimError::NonFinite("learning rate"));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite("parameters"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite("gradient"));
    }
    Ok(())
}

/// `v <- momentum * v + (g + wd * theta)`, `theta <- theta - lr * v`.
pub fn sgd_momentum_step(
    theta: &mut [f64],
    g: &[f64],
    state: &mut OptimizerState,
    hyper: &OptimizerHyper,
    lr: f64,
) -> Result<(), OptimError> {
    check_inputs(theta, g, state, false, lr)?;
    for ((t, &gi), v) in theta.iter_mut().zip(g).zip(&mut state.first_moment) {
        let gd = gi + hyper.weight_decay * *t;
        *v = hyper.momentum * *v + gd;
        *t -= lr * *v;
    }
    state.step_count += 1;
    Ok(())
}

/// Advances `m`, `v` and the step count; returns the bias corrections
/// `(1 - beta1^t, 1 - beta2^t)`.
fn update_moments(
    theta: &[f64],
    g: &[f64],
    state: &mut OptimizerState,
    hyper: &OptimizerHyper,
    coupled_decay: bool,
) -> (f64, f64) {
    state.step_count += 1;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for i in 0..theta.len() {
        let gi = if coupled_decay {
            g[i] + hyper.weight_decay * theta[i]
        } else {
            g[i]
        };
        state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * gi;
        state.second_moment[i] = b2 * state.second_moment[i] + (1.0 - b2) * gi * gi;
    }
    let t = state.step_count as i32;
    (1.0 - b1.powi(t), 1.0 - b2.powi(t))
}

pub fn adam_step(
    theta: &mut [f64],
    g: &[f64],
    state: &mut OptimizerState,
    hyper: &OptimizerHyper,
    lr: f64,
) -> Result<(), OptimError> {
    check_inputs(theta, g, state, true, lr)?;
    let (c1, c2) = update_moments(theta, g, state, hyper, true);
    for i in 0..theta.len() {
        let m_hat = state.first_moment[i] / c1;
        let v_hat = state.second_moment[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
    Ok(())
}

/// Length of the approximated simple moving average at step `t`.
pub fn radam_rho(beta2: f64, t: u64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let bt = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * bt / (1.0 - bt)
}

/// Variance rectification factor, defined for `rho_t > 4`.
pub fn radam_rectifier(rho_t: f64, rho_inf: f64) -> f64 {
    (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
}

pub fn radam_step(
    theta: &mut [f64],
    g: &[f64],
    state: &mut OptimizerState,
    hyper: &OptimizerHyper,
    lr: f64,
) -> Result<(), OptimError> {
    check_inputs(theta, g, state, true, lr)?;
    let (c1, c2) = update_moments(theta, g, state, hyper, true);
    let rho_inf = *state.rho_inf.get_or_insert(2.0 / (1.0 - hyper.beta2) - 1.0);
    let rho_t = radam_rho(hyper.beta2, state.step_count);
    if rho_t > 4.0 {
        let r = radam_rectifier(rho_t, rho_inf);
        for i in 0..theta.len() {
            let m_hat = state.first_moment[i] / c1;
            let v_hat = state.second_moment[i] / c2;
            theta[i] -= lr * r * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    } else {
        for i in 0..theta.len() {
            theta[i] -= lr * (state.first_moment[i] / c1);
        }
    }
    Ok(())
}

/// `||theta|| / ||u||` clamped to `[0, clamp]`, or 1 if either norm is zero.
pub fn lamb_trust_ratio(theta_norm: f64, update_norm: f64, clamp: f64) -> f64 {
    if theta_norm > 0.0 && update_norm > 0.0 {
        (theta_norm / update_norm).clamp(0.0, clamp)
    } else {
        1.0
    }
}

pub fn lamb_step(
    theta: &mut [f64],
    segments: &[Range<usize>],
    g: &[f64],
    state: &mut OptimizerState,
    hyper: &OptimizerHyper,
    lr: f64,
) -> Result<(), OptimError> {
    check_inputs(theta, g, state, true, lr)?;
    if segments.is_empty() || segments.iter().any(|r| r.is_empty()) {
        return Err(OptimError::EmptyPartition);
    }
    if let Some(end) = segments.iter().map(|r| r.end).max() {
        if end > theta.len() {
            return Err(OptimError::ShapeMismatch {
                what: "layer partition",
                got: end,
                expected: theta.len(),
            });
        }
    }
    let (c1, c2) = update_moments(theta, g, state, hyper, false);
    let mut update = vec![0.0; theta.len()];
    for seg in segments {
        let mut theta_sq = 0.0;
        let mut u_sq = 0.0;
        for i in seg.clone() {
            let m_hat = state.first_moment[i] / c1;
            let v_hat = state.second_moment[i] / c2;
            let u = m_hat / (v_hat.sqrt() + hyper.epsilon) + hyper.weight_decay * theta[i];
            update[i] = u;
            theta_sq += theta[i] * theta[i];
            u_sq += u * u;
        }
        let tau = lamb_trust_ratio(theta_sq.sqrt(), u_sq.sqrt(), hyper.lamb_clamp);
        for i in seg.clone() {
            theta[i] -= lr * tau * update[i];
        }
    }
    Ok(())
}

/// Applies one update of `hyper.algorithm`. LAMB partitions by the weight
/// and bias blocks recorded in `params`.
pub fn step(
    params: &mut ParamVector,
    g: &[f64],
    state: &mut OptimizerState,
    hyper: &OptimizerHyper,
    lr: f64,
) -> Result<(), OptimError> {
    match hyper.algorithm {
        Algorithm::SgdMomentum => sgd_momentum_step(&mut params.values, g, state, hyper, lr),
        Algorithm::Adam => adam_step(&mut params.values, g, state, hyper, lr),
        Algorithm::Radam => radam_step(&mut params.values, g, state, hyper, lr),
        Algorithm::Lamb => {
            let segs = params.segments();
            lamb_step(&mut params.values, &segs, g, state, hyper, lr)
        }
    }
}

/// Optimizer hyperparameters bundled with their state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub hyper: OptimizerHyper,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(hyper: OptimizerHyper, n_params: usize) -> Self {
        let state = optimizer_init(&hyper, n_params);
        Self { hyper, state }
    }

    pub fn step(&mut self, params: &mut ParamVector, g: &[f64], lr: f64) -> Result<(), OptimError> {
        step(params, g, &mut self.state, &self.hyper, lr)
    }
}

#[cfg(test)]
#[allow(clippy::single_range_in_vec_init)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_zeroes_buffers() {
        let s = optimizer_init(&OptimizerHyper::new(Algorithm::Adam), 3);
        assert_eq!(s.first_moment, vec![0.0; 3]);
        assert_eq!(s.second_moment, vec![0.0; 3]);
        assert_eq!(s.step_count, 0);
        let s = optimizer_init(&OptimizerHyper::sgd(0.9, 0.0), 1);
        assert_eq!(s.first_moment, vec![0.0]);
        assert!(s.second_moment.is_empty());
        let s = optimizer_init(&OptimizerHyper::new(Algorithm::Radam), 2);
        assert!((s.rho_inf.unwrap() - 1999.0).abs() < 1e-9);
    }

    #[test]
    fn sgd_two_hand_steps() {
        let h = OptimizerHyper::sgd(0.9, 0.0);
        let mut s = optimizer_init(&h, 1);
        let mut th = vec![1.0];
        sgd_momentum_step(&mut th, &[1.0], &mut s, &h, 0.1).unwrap();
        assert!((s.first_moment[0] - 1.0).abs() < 1e-12);
        assert!((th[0] - 0.9).abs() < 1e-12);
        sgd_momentum_step(&mut th, &[1.0], &mut s, &h, 0.1).unwrap();
        assert!((s.first_moment[0] - 1.9).abs() < 1e-12);
        assert!((th[0] - 0.71).abs() < 1e-12);
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn sgd_coupled_weight_decay() {
        let h = OptimizerHyper::sgd(0.0, 0.5);
        let mut s = optimizer_init(&h, 1);
        let mut th = vec![2.0];
        sgd_momentum_step(&mut th, &[0.0], &mut s, &h, 0.1).unwrap();
        assert!((th[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_two_steps() {
        let h = OptimizerHyper::new(Algorithm::Adam);
        let mut s = optimizer_init(&h, 1);
        let mut th = vec![0.0];
        adam_step(&mut th, &[1.0], &mut s, &h, 0.001).unwrap();
        assert!((th[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-12);
        let before = th[0];
        adam_step(&mut th, &[1.0], &mut s, &h, 0.001).unwrap();
        assert!((th[0] - before + 0.001 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn radam_branches() {
        assert!((radam_rho(0.999, 1) - 1.0).abs() < 1e-9);
        assert!(radam_rho(0.999, 4) <= 4.0);
        assert!(radam_rho(0.999, 5) > 4.0);

        let h = OptimizerHyper::new(Algorithm::Radam);
        let mut s = optimizer_init(&h, 1);
        let mut th = vec![0.0];
        // t = 1: un-adapted step of lr * m_hat = lr
        radam_step(&mut th, &[1.0], &mut s, &h, 0.01).unwrap();
        assert!((th[0] + 0.01).abs() < 1e-12);
        for _ in 0..3 {
            radam_step(&mut th, &[1.0], &mut s, &h, 0.01).unwrap();
        }
        assert!((th[0] + 0.04).abs() < 1e-12);
        // t = 5: rectified; m_hat = v_hat = 1
        let rho5 = radam_rho(0.999, 5);
        let r = radam_rectifier(rho5, 1999.0);
        radam_step(&mut th, &[1.0], &mut s, &h, 0.01).unwrap();
        assert!((th[0] + 0.04 + 0.01 * r / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn lamb_trust_ratio_cases() {
        assert_eq!(lamb_trust_ratio(1.0, 1.0, 10.0), 1.0);
        assert_eq!(lamb_trust_ratio(1.0, 0.05, 10.0), 10.0);
        assert_eq!(lamb_trust_ratio(1.0, 0.0, 10.0), 1.0);
        assert_eq!(lamb_trust_ratio(0.0, 3.0, 10.0), 1.0);
    }

    #[test]
    fn lamb_full_steps() {
        // zero gradient: u = wd * theta
        let mut h = OptimizerHyper::new(Algorithm::Lamb);
        h.weight_decay = 0.05;
        let mut s = optimizer_init(&h, 1);
        let mut th = vec![1.0];
        lamb_step(&mut th, &[0..1], &[0.0], &mut s, &h, 0.1).unwrap();
        // tau clamped from 20 to 10: 1 - 0.1 * 10 * 0.05
        assert!((th[0] - 0.95).abs() < 1e-12);

        h.weight_decay = 1.0;
        let mut s = optimizer_init(&h, 1);
        let mut th = vec![1.0];
        lamb_step(&mut th, &[0..1], &[0.0], &mut s, &h, 0.1).unwrap();
        assert!((th[0] - 0.9).abs() < 1e-12);

        h.weight_decay = 0.0;
        let mut s = optimizer_init(&h, 2);
        let mut th = vec![0.6, 0.8];
        lamb_step(&mut th, &[0..2], &[0.0, 0.0], &mut s, &h, 0.1).unwrap();
        assert_eq!(th, vec![0.6, 0.8]);
    }

    #[test]
    fn lamb_partition_errors() {
        let h = OptimizerHyper::new(Algorithm::Lamb);
        let mut s = optimizer_init(&h, 2);
        let mut th = vec![1.0, 1.0];
        assert_eq!(
            lamb_step(&mut th, &[], &[1.0, 1.0], &mut s, &h, 0.1),
            Err(OptimError::EmptyPartition)
        );
    }

    #[test]
    fn shape_and_finiteness_checks() {
        for alg in [
            Algorithm::SgdMomentum,
            Algorithm::Adam,
            Algorithm::Radam,
            Algorithm::Lamb,
        ] {
            let h = OptimizerHyper::new(alg);
            let mut p = ParamVector::flat(vec![1.0, 2.0]);
            let mut s = optimizer_init(&h, 2);
            assert!(matches!(
                step(&mut p, &[1.0], &mut s, &h, 0.1),
                Err(OptimError::ShapeMismatch { .. })
            ));
            assert_eq!(
                step(&mut p, &[1.0, f64::NAN], &mut s, &h, 0.1),
                Err(OptimError::NonFinite("gradient"))
            );
            assert_eq!(s.step_count, 0);
        }
    }

    #[test]
    fn radam_branch_matches_scalar_reference() {
        let b: f64 = 0.999;
        let rho_inf = 2.0 / (1.0 - b) - 1.0;
        let mut bt = 1.0;
        for t in 1..=100u64 {
            bt *= b;
            let reference = rho_inf - 2.0 * t as f64 * bt / (1.0 - bt);
            assert_eq!(radam_rho(b, t) > 4.0, reference > 4.0, "t = {t}");
            assert!((radam_rho(b, t) - reference).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn zero_gradient_leaves_theta_unchanged(
            theta in prop::collection::vec(-10.0f64..10.0, 1..8),
            lr in 0.0f64..1.0,
            alg in prop::sample::select(vec![Algorithm::SgdMomentum, Algorithm::Adam, Algorithm::Radam, Algorithm::Lamb]),
        ) {
            let h = OptimizerHyper::new(alg);
            let mut p = ParamVector::flat(theta.clone());
            let mut s = optimizer_init(&h, theta.len());
            let g = vec![0.0; theta.len()];
            for _ in 0..3 {
                step(&mut p, &g, &mut s, &h, lr).unwrap();
            }
            prop_assert_eq!(p.values, theta);
        }

        #[test]
        fn second_moments_stay_nonnegative(
            grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20),
            alg in prop::sample::select(vec![Algorithm::Adam, Algorithm::Radam, Algorithm::Lamb]),
        ) {
            let h = OptimizerHyper::new(alg);
            let mut p = ParamVector::flat(vec![0.5, -0.5, 1.0]);
            let mut s = optimizer_init(&h, 3);
            for g in &grads {
                step(&mut p, g, &mut s, &h, 1e-3).unwrap();
                prop_assert!(s.second_moment.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn steps_are_deterministic(
            theta in prop::collection::vec(-5.0f64..5.0, 1..6),
            seed_g in -3.0f64..3.0,
            alg in prop::sample::select(vec![Algorithm::SgdMomentum, Algorithm::Adam, Algorithm::Radam, Algorithm::Lamb]),
        ) {
            let h = OptimizerHyper::new(alg);
            let g: Vec<f64> = theta.iter().map(|t| t * seed_g + 0.1).collect();
            let run = || {
                let mut p = ParamVector::flat(theta.clone());
                let mut s = optimizer_init(&h, theta.len());
                for _ in 0..5 {
                    step(&mut p, &g, &mut s, &h, 0.01).unwrap();
                }
                (p, s)
            };
            let (a, sa) = run();
            let (b, sb) = run();
            prop_assert_eq!(a, b);
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn gd_on_quadratic_contracts(
            x0 in prop::sample::select(vec![-3.0f64, -0.7, 0.4, 2.5]),
            lambda in 0.1f64..10.0,
            frac in 0.01f64..0.99,
        ) {
            let lr = frac * 2.0 / lambda;
            let h = OptimizerHyper::sgd(0.0, 0.0);
            let mut s = optimizer_init(&h, 1);
            let mut x = vec![x0];
            let mut prev = x0.abs();
            for _ in 0..50 {
                let g = [lambda * x[0]];
                sgd_momentum_step(&mut x, &g, &mut s, &h, lr).unwrap();
                if prev == 0.0 {
                    break;
                }
                prop_assert!(x[0].abs() < prev);
                prev = x[0].abs();
            }
        }
    }
}
