//! Learning-rate range test: one optimizer step per learning rate on a
//! geometric ramp until the loss blows up.

use std::io::Write;

use serde::Serialize;

use super::{prepare_subject, trial_seed, with_jobs, ExperimentConfig, LabError, Prepared};
use crate::net::{self, MlpObjective};
use crate::objective::Objective;
use crate::optim::{Optimizer, OptimizerHyper};
use crate::params::ParamVector;
use crate::scape;
use crate::seed::derive_seed;

/// Weight of the newest loss in the exponential moving average.
pub const SMOOTHING: f64 = 0.05;

/// Loss over running minimum that counts as an explosion.
pub const EXPLOSION_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RangePoint {
    pub lr: f64,
    /// Loss after the step taken at `lr`.
    pub loss: f64,
    /// Bias-corrected moving average of `loss`.
    pub smoothed_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeTestResult {
    pub points: Vec<RangePoint>,
    /// Learning rate of the step that triggered the stop, if any.
    pub exploded_at: Option<f64>,
    /// One tenth of the learning rate at the smoothed-loss minimum.
    pub suggested_max_lr: f64,
}

/// Runs the ramp `lr_k = lr_start * lr_mult^k` from `x0` for at most
/// `max_steps` steps. Stops once the raw loss exceeds four times the lowest
/// loss seen so far (the starting loss included) or turns non-finite.
pub fn lr_range_test<O: Objective + ?Sized>(
    f: &O,
    x0: &ParamVector,
    hyper: &OptimizerHyper,
    lr_start: f64,
    lr_mult: f64,
    max_steps: usize,
) -> Result<RangeTestResult, LabError> {
    if !(lr_start > 0.0 && lr_start.is_finite()) {
        return Err(LabError::Runtime("lr_start must be > 0".into()));
    }
    if !(lr_mult > 1.0 && lr_mult.is_finite()) {
        return Err(LabError::Runtime("lr_mult_per_step must be > 1".into()));
    }
    if x0.len() != f.dim() {
        return Err(LabError::Runtime(
            "start point dimension does not match the subject".into(),
        ));
    }
    let mut params = x0.clone();
    let mut opt = Optimizer::new(hyper.clone(), params.len());
    let mut g = vec![0.0; params.len()];
    let mut running_min = f.value_grad(&params.values, &mut g);
    let mut smoothed = 0.0;
    let mut decay = 1.0;
    let mut points = Vec::with_capacity(max_steps.min(1 << 16));
    let mut exploded_at = None;
    let mut lr = lr_start;
    for _ in 0..max_steps {
        if opt.step(&mut params, &g, lr).is_err() {
            exploded_at = Some(lr);
            break;
        }
        let loss = f.value_grad(&params.values, &mut g);
        if !loss.is_finite() {
            points.push(RangePoint {
                lr,
                loss,
                smoothed_loss: f64::NAN,
            });
            exploded_at = Some(lr);
            break;
        }
        // bias-corrected EMA in incremental form, exact for a constant loss
        decay *= 1.0 - SMOOTHING;
        if points.is_empty() {
            smoothed = loss;
        } else {
            smoothed += SMOOTHING / (1.0 - decay) * (loss - smoothed);
        }
        points.push(RangePoint {
            lr,
            loss,
            smoothed_loss: smoothed,
        });
        if loss > EXPLOSION_FACTOR * running_min {
            exploded_at = Some(lr);
            break;
        }
        running_min = running_min.min(loss);
        lr *= lr_mult;
    }
    // ties go to the later learning rate
    let best = points
        .iter()
        .filter(|p| p.smoothed_loss.is_finite())
        .fold(None::<&RangePoint>, |best, p| match best {
            Some(b) if b.smoothed_loss < p.smoothed_loss => Some(b),
            _ => Some(p),
        });
    let suggested_max_lr = best.map_or(lr_start, |p| p.lr) / 10.0;
    Ok(RangeTestResult {
        points,
        exploded_at,
        suggested_max_lr,
    })
}

pub fn write_range_csv<W: Write>(result: &RangeTestResult, mut out: W) -> std::io::Result<()> {
    writeln!(out, "lr,loss,smoothed_loss")?;
    for p in &result.points {
        writeln!(out, "{},{},{}", p.lr, p.loss, p.smoothed_loss)?;
    }
    Ok(())
}

/// Range test on the configured subject from the starting point of trial 0.
/// The mlp subject uses the full training split; the landscape subject uses
/// the noiseless gradient.
pub fn run_range_test(config: &ExperimentConfig) -> Result<RangeTestResult, LabError> {
    config.validate()?;
    let settings = config.range_test.as_ref().ok_or_else(|| {
        LabError::Config(super::ConfigError::Invalid {
            field: "range_test".into(),
            message: "the range-test command needs a range_test section".into(),
        })
    })?;
    let seed = trial_seed(config.base_seed, None, 0);
    let subject = prepare_subject(&config.subject)?;
    with_jobs(config.jobs, || match &subject {
        Prepared::Mlp { net: n, data, .. } => {
            let spec = net::MlpSpec {
                layer_widths: n.layer_widths.clone(),
                activation: n.activation,
                init_seed: derive_seed(seed, &[1]),
                init_scale: n.init_scale,
            };
            let (train, _) = net::split_indices(data.len(), derive_seed(seed, &[2]));
            let x0 = net::init_params(&spec).map_err(|e| LabError::Runtime(e.to_string()))?;
            let objective = MlpObjective::new(&spec, data, &train);
            let hyper = config.optimizer.clone().expect("validated mlp config has an optimizer");
            lr_range_test(
                &objective,
                &x0,
                &hyper,
                settings.lr_start,
                settings.lr_mult_per_step,
                settings.max_steps,
            )
        }
        Prepared::Landscape(land) => {
            let quiet = land.clone().with_noise(0.0);
            let (x0, _) = scape::walk_start(&quiet, seed, 0);
            let hyper = config
                .optimizer
                .clone()
                .unwrap_or_else(|| OptimizerHyper::sgd(0.0, 0.0));
            lr_range_test(
                &quiet,
                &ParamVector::flat(x0),
                &hyper,
                settings.lr_start,
                settings.lr_mult_per_step,
                settings.max_steps,
            )
        }
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::FnObjective;

    fn half_square() -> FnObjective<impl Fn(&[f64], &mut [f64]) -> f64 + Sync> {
        FnObjective::new(1, |x: &[f64], g: &mut [f64]| {
            g[0] = x[0];
            0.5 * x[0] * x[0]
        })
    }

    #[test]
    fn quadratic_explodes_past_two() {
        let r = lr_range_test(
            &half_square(),
            &ParamVector::flat(vec![1.0]),
            &OptimizerHyper::sgd(0.0, 0.0),
            1e-3,
            1.01,
            10_000,
        )
        .unwrap();
        let at = r.exploded_at.unwrap();
        assert!((1.8..=2.2).contains(&at), "exploded at {at}");
    }

    #[test]
    fn constant_loss_runs_to_the_end() {
        let flat = FnObjective::new(2, |_: &[f64], g: &mut [f64]| {
            g.fill(0.0);
            3.0
        });
        let r = lr_range_test(
            &flat,
            &ParamVector::flat(vec![0.0, 0.0]),
            &OptimizerHyper::sgd(0.0, 0.0),
            0.01,
            1.1,
            50,
        )
        .unwrap();
        assert_eq!(r.points.len(), 50);
        assert!(r.exploded_at.is_none());
        let last = r.points.last().unwrap().lr;
        assert_eq!(r.suggested_max_lr, last / 10.0);
    }

    #[test]
    fn suggestion_is_a_tenth_of_the_smoothed_minimum() {
        let r = lr_range_test(
            &half_square(),
            &ParamVector::flat(vec![1.0]),
            &OptimizerHyper::sgd(0.0, 0.0),
            1e-3,
            1.01,
            10_000,
        )
        .unwrap();
        let min = r
            .points
            .iter()
            .map(|p| p.smoothed_loss)
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        let at = r.points.iter().rev().find(|p| p.smoothed_loss == min).unwrap().lr;
        assert_eq!(r.suggested_max_lr, at / 10.0);
    }

    #[test]
    fn bad_grid_is_rejected() {
        let h = OptimizerHyper::sgd(0.0, 0.0);
        let x = ParamVector::flat(vec![1.0]);
        assert!(lr_range_test(&half_square(), &x, &h, 0.0, 1.1, 10).is_err());
        assert!(lr_range_test(&half_square(), &x, &h, 0.1, 1.0, 10).is_err());
    }
}
