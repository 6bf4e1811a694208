//! Synthetic loss landscapes built as the pointwise minimum of quadratic
//! basins, and noisy gradient-descent walks over them.
//!
//! Every basin has the same depth, so the only thing distinguishing a wide
//! basin from a narrow one is its curvature. The reference layout puts one
//! wide basin among many narrow ones.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::Objective;
use crate::sched::{build_schedule, Schedule, ScheduleError, ScheduleSpec};
use crate::seed::{derive_seed, rng_from};

/// Attempts allowed when rejection-sampling basin centers.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

/// Walks whose norm exceeds this multiple of `domain_box` are diverged.
pub const DIVERGENCE_FACTOR: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScapeError {
    #[error("invalid landscape: {0}")]
    Invalid(String),
    #[error("could not place {placed} of {wanted} basin centers after {attempts} attempts")]
    Crowded {
        placed: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error("point has dimension {got}, landscape has {expected}")]
    Dimension { got: usize, expected: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basin {
    pub center: Vec<f64>,
    pub curvature: f64,
    pub depth: f64,
}

impl Basin {
    pub fn value(&self, x: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        self.depth + 0.5 * self.curvature * d2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSpec {
    pub dim: usize,
    pub basins: Vec<Basin>,
    pub noise_sigma: f64,
    pub domain_box: f64,
    pub seed: u64,
    /// Basins with curvature at or below this count as wide.
    pub wide_curvature: f64,
}

impl LandscapeSpec {
    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<(), ScapeError> {
        let bad = |m: &str| Err(ScapeError::Invalid(m.into()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.basins.is_empty() {
            return bad("at least one basin is required");
        }
        for b in &self.basins {
            if b.center.len() != self.dim {
                return bad("basin center dimension does not match dim");
            }
            if !(b.curvature.is_finite() && b.curvature > 0.0) {
                return bad("basin curvatures must be finite and > 0");
            }
        }
        for (i, a) in self.basins.iter().enumerate() {
            if self.basins[..i].iter().any(|b| b.center == a.center) {
                return bad("basin centers must be pairwise distinct");
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if !(self.domain_box.is_finite() && self.domain_box > 0.0) {
            return bad("domain_box must be finite and > 0");
        }
        Ok(())
    }

    /// Index of the minimal basin at `x`, lowest index on ties.
    pub fn active_basin(&self, x: &[f64]) -> (usize, f64) {
        let mut best = 0;
        let mut best_v = self.basins[0].value(x);
        for (i, b) in self.basins.iter().enumerate().skip(1) {
            let v = b.value(x);
            if v < best_v {
                best = i;
                best_v = v;
            }
        }
        (best, best_v)
    }

    pub fn is_wide(&self, basin: usize) -> bool {
        self.basins[basin].curvature <= self.wide_curvature
    }

    pub fn n_wide(&self) -> usize {
        (0..self.basins.len()).filter(|&i| self.is_wide(i)).count()
    }
}

/// Places `n_wide + n_narrow` centers uniformly in `[-domain_box, domain_box]^dim`
/// with pairwise separation at least `3 / sqrt(c_narrow)`. Wide basins come
/// first in index order.
pub fn build_landscape(
    n_wide: usize,
    c_wide: f64,
    n_narrow: usize,
    c_narrow: f64,
    dim: usize,
    domain_box: f64,
    seed: u64,
) -> Result<LandscapeSpec, ScapeError> {
    if !(c_wide > 0.0 && c_narrow.is_finite() && c_wide < c_narrow) {
        return Err(ScapeError::Invalid("requires 0 < c_wide < c_narrow".into()));
    }
    if n_wide + n_narrow == 0 {
        return Err(ScapeError::Invalid("at least one basin is required".into()));
    }
    if dim == 0 || !(domain_box > 0.0) {
        return Err(ScapeError::Invalid("dim and domain_box must be positive".into()));
    }
    let wanted = n_wide + n_narrow;
    let min_sep_sq = 9.0 / c_narrow;
    let mut rng = rng_from(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while centers.len() < wanted {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(ScapeError::Crowded {
                placed: centers.len(),
                wanted,
                attempts,
            });
        }
        attempts += 1;
        let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-domain_box..=domain_box)).collect();
        let clear = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 >= min_sep_sq
        });
        if clear {
            centers.push(p);
        }
    }
    let basins = centers
        .into_iter()
        .enumerate()
        .map(|(i, center)| Basin {
            center,
            curvature: if i < n_wide { c_wide } else { c_narrow },
            depth: 0.0,
        })
        .collect();
    Ok(LandscapeSpec {
        dim,
        basins,
        noise_sigma: 0.0,
        domain_box,
        seed,
        wide_curvature: c_wide,
    })
}

/// `F(x)` and the gradient of the active basin.
pub fn landscape_value_grad(spec: &LandscapeSpec, x: &[f64]) -> Result<(f64, Vec<f64>), ScapeError> {
    if x.len() != spec.dim {
        return Err(ScapeError::Dimension {
            got: x.len(),
            expected: spec.dim,
        });
    }
    let mut g = vec![0.0; spec.dim];
    let v = value_grad_into(spec, x, &mut g);
    Ok((v, g))
}

fn value_grad_into(spec: &LandscapeSpec, x: &[f64], g: &mut [f64]) -> f64 {
    let (i, v) = spec.active_basin(x);
    let b = &spec.basins[i];
    for ((gi, xi), ci) in g.iter_mut().zip(x).zip(&b.center) {
        *gi = b.curvature * (xi - ci);
    }
    v
}

impl Objective for LandscapeSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.active_basin(x).1
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        value_grad_into(self, x, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WalkResult {
    pub final_point: Vec<f64>,
    /// `None` when the walk diverged.
    pub landed_basin_index: Option<usize>,
    /// `(step, F)` every `curve_stride` steps, plus the final point.
    pub trajectory_loss_curve: Vec<(u64, f64)>,
    pub diverged: bool,
}

/// Noisy gradient descent `x <- x - lr(t) * (grad F(x) + sigma * xi)`.
///
/// `curve_stride == 0` disables the loss curve.
pub fn sgd_walk(
    spec: &LandscapeSpec,
    x0: &[f64],
    schedule: &Schedule,
    total_steps: u64,
    noise_seed: u64,
    curve_stride: u64,
) -> Result<WalkResult, ScapeError> {
    if x0.len() != spec.dim {
        return Err(ScapeError::Dimension {
            got: x0.len(),
            expected: spec.dim,
        });
    }
    if total_steps > schedule.total_steps() {
        return Err(ScheduleError::OutOfRange {
            step: total_steps,
            total_steps: schedule.total_steps(),
        }
        .into());
    }
    let mut rng = rng_from(noise_seed);
    let mut x = x0.to_vec();
    let mut g = vec![0.0; spec.dim];
    let limit_sq = (DIVERGENCE_FACTOR * spec.domain_box).powi(2);
    let mut curve = Vec::new();
    let sigma = spec.noise_sigma;
    for t in 0..total_steps {
        let lr = schedule.lr_at(t)?;
        let v = value_grad_into(spec, &x, &mut g);
        if curve_stride > 0 && t % curve_stride == 0 {
            curve.push((t, v));
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            let noise = if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                sigma * z
            } else {
                0.0
            };
            *xi -= lr * (gi + noise);
        }
        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
        if !(norm_sq <= limit_sq) {
            return Ok(WalkResult {
                final_point: x,
                landed_basin_index: None,
                trajectory_loss_curve: curve,
                diverged: true,
            });
        }
    }
    let (landed, v) = spec.active_basin(&x);
    if curve_stride > 0 {
        curve.push((total_steps, v));
    }
    Ok(WalkResult {
        final_point: x,
        landed_basin_index: Some(landed),
        trajectory_loss_curve: curve,
        diverged: false,
    })
}

/// Seed learning rate and decay length of a knee-shaped walk schedule:
/// `explore` steps at `seed_lr`, then `decay_steps` of linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeFamily {
    pub seed_lr: f64,
    pub decay_steps: u64,
}

impl KneeFamily {
    pub fn schedule(&self, explore_steps: u64) -> Result<Schedule, ScheduleError> {
        build_schedule(ScheduleSpec::knee(
            self.seed_lr,
            explore_steps + self.decay_steps,
            explore_steps,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LandingRow {
    pub explore_steps: u64,
    pub trials: usize,
    pub wide_fraction: f64,
    pub diverged_fraction: f64,
}

/// Uniform start point and noise seed of walk `trial`.
pub fn walk_start(spec: &LandscapeSpec, base_seed: u64, trial: u64) -> (Vec<f64>, u64) {
    let mut rng = rng_from(derive_seed(base_seed, &[trial, 0]));
    let b = spec.domain_box;
    let x0 = (0..spec.dim).map(|_| rng.gen_range(-b..=b)).collect();
    (x0, derive_seed(base_seed, &[trial, 1]))
}

/// Runs `trials` walks from fresh uniform starts under `schedule`. Returns
/// `(wide_fraction, diverged_fraction)`; the wide fraction is taken over
/// the walks that did not diverge.
pub fn landing_fractions(
    spec: &LandscapeSpec,
    schedule: &Schedule,
    trials: usize,
    base_seed: u64,
) -> Result<(f64, f64), ScapeError> {
    spec.validate()?;
    let total = schedule.total_steps();
    let outcomes: Vec<Option<bool>> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let (x0, noise_seed) = walk_start(spec, base_seed, trial);
            sgd_walk(spec, &x0, schedule, total, noise_seed, 0).map(|w| w.landed_basin_index.map(|i| spec.is_wide(i)))
        })
        .collect::<Result<_, _>>()?;
    let diverged = outcomes.iter().filter(|o| o.is_none()).count();
    let wide = outcomes.iter().filter(|o| **o == Some(true)).count();
    let landed = trials - diverged;
    let wide_fraction = if landed == 0 { 0.0 } else { wide as f64 / landed as f64 };
    Ok((wide_fraction, diverged as f64 / trials.max(1) as f64))
}

/// Wide-landing share for each explore budget. Walk `j` uses the same start
/// and noise stream under every budget.
pub fn landing_distribution(
    spec: &LandscapeSpec,
    family: &KneeFamily,
    explore_steps_list: &[u64],
    trials: usize,
    base_seed: u64,
) -> Result<Vec<LandingRow>, ScapeError> {
    if trials == 0 {
        return Err(ScapeError::Invalid("trials must be at least 1".into()));
    }
    explore_steps_list
        .iter()
        .map(|&e| {
            let sched = family.schedule(e)?;
            let (wide_fraction, diverged_fraction) = landing_fractions(spec, &sched, trials, base_seed)?;
            Ok(LandingRow {
                explore_steps: e,
                trials,
                wide_fraction,
                diverged_fraction,
            })
        })
        .collect()
}

pub fn write_landing_csv<W: std::io::Write>(rows: &[LandingRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "explore_steps,trials,wide_fraction,diverged_fraction")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.explore_steps, r.trials, r.wide_fraction, r.diverged_fraction
        )?;
    }
    Ok(())
}

/// The 1-wide / 99-narrow layout used throughout the tests and examples.
pub fn reference_landscape() -> LandscapeSpec {
    build_landscape(1, 1.0, 99, 400.0, 2, 10.0, 3).expect("reference layout fits its box")
}
