//! Sharpness of a point on a loss surface.
//!
//! The Keskar score maximizes the loss over the axis-aligned box
//! `|y_i| <= eps * (|x_i| + 1)` around `x` and reports
//! `100 * (max F(x + y) - F(x)) / (1 + F(x))`. The maximization runs
//! projected gradient ascent from several random starts; a tensor-grid
//! search over the same box serves as an exhaustive reference in up to three
//! dimensions.
//!
//! The Fisher score is the top eigenvalue of the true Fisher information,
//! with labels drawn from the model's own predictive distribution.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{self, Dataset, MlpSpec};
use crate::objective::Objective;
use crate::params::ParamVector;
use crate::seed::{derive_seed, rng_from};

/// Largest dimension accepted by [`brute_force_sharpness`].
pub const BRUTE_FORCE_MAX_DIM: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SharpError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("brute force supports at most {max} dimensions, got {got}")]
    DimensionTooLarge { got: usize, max: usize },
    #[error("grid_points_per_dim must be odd and >= 1, got {0}")]
    EvenGrid(usize),
    #[error("non-finite gradient in the Fisher estimate")]
    NonFiniteGradient,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("gradient norm {0:e} is too small to define a steepest-descent direction")]
    ZeroGradient(f64),
    #[error("n_points must be odd and >= 3, got {0}")]
    BadPointCount(usize),
}

fn default_epsilon() -> f64 {
    1e-4
}
fn default_iterations() -> usize {
    1000
}
fn default_ascent_lr() -> f64 {
    1e-3
}
fn default_restarts() -> usize {
    3
}

/// Settings of the Keskar maximization. The box matrix is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_ascent_lr")]
    pub ascent_lr: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            iterations: default_iterations(),
            ascent_lr: default_ascent_lr(),
            restarts: default_restarts(),
            seed: 0,
        }
    }
}

impl SharpnessConfig {
    pub fn validate(&self) -> Result<(), SharpError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(SharpError::Precondition("epsilon must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(SharpError::Precondition("iterations must be >= 1".into()));
        }
        if self.restarts == 0 {
            return Err(SharpError::Precondition("restarts must be >= 1".into()));
        }
        if !(self.ascent_lr.is_finite() && self.ascent_lr > 0.0) {
            return Err(SharpError::Precondition("ascent_lr must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub keskar_score: f64,
    pub best_perturbation: Vec<f64>,
    pub base_loss: f64,
    pub fisher_score: Option<f64>,
    pub width_profile: Option<Vec<(f64, f64)>>,
    pub solver_iterations_used: usize,
}

/// Per-coordinate half-widths `eps * (|x_i| + 1)`.
pub fn box_bounds(x: &[f64], epsilon: f64) -> Vec<f64> {
    x.iter().map(|xi| epsilon * (xi.abs() + 1.0)).collect()
}

pub fn keskar_score(max_loss: f64, base_loss: f64) -> f64 {
    100.0 * (max_loss - base_loss) / (1.0 + base_loss)
}

fn check_base<O: Objective + ?Sized>(f: &O, x: &[f64]) -> Result<f64, SharpError> {
    if x.len() != f.dim() {
        return Err(SharpError::Precondition(format!(
            "point has dimension {}, objective has {}",
            x.len(),
            f.dim()
        )));
    }
    let base = f.value(x);
    if !base.is_finite() {
        return Err(SharpError::Precondition("loss is not finite at x".into()));
    }
    if base <= -1.0 {
        return Err(SharpError::Precondition("requires F(x) > -1".into()));
    }
    Ok(base)
}

struct Ascent {
    best_value: f64,
    best_y: Vec<f64>,
    evaluations: usize,
}

fn ascend<O: Objective + ?Sized>(f: &O, x: &[f64], bounds: &[f64], cfg: &SharpnessConfig, restart: usize) -> Ascent {
    let n = x.len();
    let mut rng = rng_from(derive_seed(cfg.seed, &[restart as u64]));
    let mut y: Vec<f64> = bounds
        .iter()
        .map(|&b| {
            if b > 0.0 {
                rng.gen_range(-0.5 * b..=0.5 * b)
            } else {
                0.0
            }
        })
        .collect();
    let mut probe = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut out = Ascent {
        best_value: f64::NEG_INFINITY,
        best_y: y.clone(),
        evaluations: 0,
    };
    for it in 0..=cfg.iterations {
        for i in 0..n {
            probe[i] = x[i] + y[i];
        }
        let v = f.value_grad(&probe, &mut g);
        out.evaluations += 1;
        if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
            break;
        }
        if v > out.best_value {
            out.best_value = v;
            out.best_y.copy_from_slice(&y);
        }
        if it == cfg.iterations {
            break;
        }
        for i in 0..n {
            y[i] = (y[i] + cfg.ascent_lr * g[i]).clamp(-bounds[i], bounds[i]);
        }
    }
    out
}

/// Keskar sharpness by projected gradient ascent with `cfg.restarts` seeded
/// starts drawn uniformly from half the box. `y = 0` is always a candidate.
pub fn keskar_sharpness<O: Objective + ?Sized>(
    f: &O,
    x: &[f64],
    cfg: &SharpnessConfig,
) -> Result<SharpnessReport, SharpError> {
    cfg.validate()?;
    let base = check_base(f, x)?;
    let bounds = box_bounds(x, cfg.epsilon);
    let mut best_value = base;
    let mut best_y = vec![0.0; x.len()];
    let mut evaluations = 0;
    for r in 0..cfg.restarts {
        let a = ascend(f, x, &bounds, cfg, r);
        evaluations += a.evaluations;
        if a.best_value > best_value {
            best_value = a.best_value;
            best_y = a.best_y;
        }
    }
    Ok(SharpnessReport {
        keskar_score: keskar_score(best_value, base),
        best_perturbation: best_y,
        base_loss: base,
        fisher_score: None,
        width_profile: None,
        solver_iterations_used: evaluations,
    })
}

/// Exhaustive search of the box on a `grid_points_per_dim`^n tensor grid
/// that includes the corners and the origin.
pub fn brute_force_sharpness<O: Objective + ?Sized>(
    f: &O,
    x: &[f64],
    cfg: &SharpnessConfig,
    grid_points_per_dim: usize,
) -> Result<SharpnessReport, SharpError> {
    let n = x.len();
    if n > BRUTE_FORCE_MAX_DIM {
        return Err(SharpError::DimensionTooLarge {
            got: n,
            max: BRUTE_FORCE_MAX_DIM,
        });
    }
    if grid_points_per_dim.is_multiple_of(2) {
        return Err(SharpError::EvenGrid(grid_points_per_dim));
    }
    cfg.validate()?;
    let base = check_base(f, x)?;
    let bounds = box_bounds(x, cfg.epsilon);
    let mid = (grid_points_per_dim / 2) as f64;
    let coord = |i: usize, k: usize| {
        if mid == 0.0 {
            0.0
        } else {
            bounds[i] * ((k as f64 - mid) / mid)
        }
    };
    let total = grid_points_per_dim.pow(n as u32);
    let mut best_value = base;
    let mut best_y = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut probe = vec![0.0; n];
    for flat in 0..total {
        let mut rest = flat;
        for i in 0..n {
            y[i] = coord(i, rest % grid_points_per_dim);
            rest /= grid_points_per_dim;
            probe[i] = x[i] + y[i];
        }
        let v = f.value(&probe);
        if v > best_value {
            best_value = v;
            best_y.copy_from_slice(&y);
        }
    }
    Ok(SharpnessReport {
        keskar_score: keskar_score(best_value, base),
        best_perturbation: best_y,
        base_loss: base,
        fisher_score: None,
        width_profile: None,
        solver_iterations_used: total,
    })
}

// ------------------------------------------------------------------ Fisher

/// A model with a categorical predictive distribution per datum.
pub trait PredictiveModel: Sync {
    fn n_params(&self) -> usize;
    fn n_data(&self) -> usize;
    /// Writes `d log p(class | x_i) / d theta` into `grad` and returns the
    /// predictive probabilities at `x_i`.
    fn grad_log_prob(&self, i: usize, class: usize, grad: &mut [f64]) -> Vec<f64>;
    fn probs(&self, i: usize) -> Vec<f64>;
}

/// An MLP at fixed parameters, evaluated on a subset of a dataset.
pub struct MlpModel<'a> {
    pub params: &'a ParamVector,
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset,
    pub indices: &'a [usize],
}

impl PredictiveModel for MlpModel<'_> {
    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn n_data(&self) -> usize {
        self.indices.len()
    }

    fn grad_log_prob(&self, i: usize, class: usize, grad: &mut [f64]) -> Vec<f64> {
        net::grad_log_prob(self.params, self.spec, self.data.input(self.indices[i]), class, grad)
    }

    fn probs(&self, i: usize) -> Vec<f64> {
        net::predict_probs(self.params, self.spec, self.data.input(self.indices[i]))
    }
}

/// Binary logistic regression `p(1 | x) = sigmoid(w . x)` without a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
}

impl LogisticModel {
    fn p1(&self, i: usize) -> f64 {
        let z: f64 = self.weights.iter().zip(&self.inputs[i]).map(|(w, x)| w * x).sum();
        1.0 / (1.0 + (-z).exp())
    }
}

impl PredictiveModel for LogisticModel {
    fn n_params(&self) -> usize {
        self.weights.len()
    }

    fn n_data(&self) -> usize {
        self.inputs.len()
    }

    fn grad_log_prob(&self, i: usize, class: usize, grad: &mut [f64]) -> Vec<f64> {
        let p = self.p1(i);
        let y = if class == 1 { 1.0 } else { 0.0 };
        for (g, x) in grad.iter_mut().zip(&self.inputs[i]) {
            *g = (y - p) * x;
        }
        vec![1.0 - p, p]
    }

    fn probs(&self, i: usize) -> Vec<f64> {
        let p = self.p1(i);
        vec![1.0 - p, p]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Dominant eigenvalue of a symmetric positive semi-definite operator given
/// only by its action `matvec(v, out)`. Stops when successive Rayleigh
/// quotients differ by less than `tol`.
pub fn power_iteration<M>(matvec: M, n: usize, max_iters: usize, tol: f64, seed: u64) -> EigenEstimate
where
    M: Fn(&[f64], &mut [f64]),
{
    let mut rng = rng_from(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut w = vec![0.0; n];
    let mut prev = f64::NAN;
    for it in 1..=max_iters.max(1) {
        matvec(&v, &mut w);
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return EigenEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        if (rayleigh - prev).abs() < tol {
            return EigenEstimate {
                value: rayleigh,
                iterations: it,
                converged: true,
            };
        }
        prev = rayleigh;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
    }
    EigenEstimate {
        value: prev,
        iterations: max_iters.max(1),
        converged: false,
    }
}

/// Fisher power-iteration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherConfig {
    pub samples_per_datum: usize,
    pub power_iters: usize,
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            samples_per_datum: 10,
            power_iters: 100,
            tol: 1e-9,
            seed: 0,
        }
    }
}

/// Largest eigenvalue of `(1 / NK) sum g g^T` over `K` sampled labels per
/// datum. The sampled score vectors are kept; the `n x n` matrix never is.
pub fn fisher_score<M: PredictiveModel + ?Sized>(model: &M, cfg: &FisherConfig) -> Result<EigenEstimate, SharpError> {
    let n_data = model.n_data();
    if n_data == 0 {
        return Err(SharpError::EmptyDataset);
    }
    if cfg.samples_per_datum == 0 {
        return Err(SharpError::Precondition("samples_per_datum must be >= 1".into()));
    }
    let n = model.n_params();
    let k = cfg.samples_per_datum;
    let rows: Vec<Vec<f64>> = (0..n_data)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(derive_seed(cfg.seed, &[i as u64]));
            let probs = model.probs(i);
            let dist = WeightedIndex::new(&probs).map_err(|_| SharpError::NonFiniteGradient)?;
            let mut out = Vec::with_capacity(k * n);
            let mut g = vec![0.0; n];
            for _ in 0..k {
                let class = dist.sample(&mut rng);
                model.grad_log_prob(i, class, &mut g);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(SharpError::NonFiniteGradient);
                }
                out.extend_from_slice(&g);
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    let m = (n_data * k) as f64;
    let matvec = |v: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for block in &rows {
            for g in block.chunks_exact(n) {
                let dot: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
                for (o, gi) in out.iter_mut().zip(g) {
                    *o += dot * gi;
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= m);
    };
    Ok(power_iteration(
        matvec,
        n,
        cfg.power_iters,
        cfg.tol,
        derive_seed(cfg.seed, &[u64::MAX]),
    ))
}

// ------------------------------------------------------------ width profile

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Vector(Vec<f64>),
    SteepestDescent,
}

/// Minimum gradient norm for a steepest-descent direction.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

/// Losses along `x + s * dir` for `n_points` equally spaced `s` in
/// `[-range_halfwidth, range_halfwidth]`. The middle sample is `F(x)`.
pub fn width_profile<O: Objective + ?Sized>(
    f: &O,
    x: &[f64],
    direction: &Direction,
    range_halfwidth: f64,
    n_points: usize,
) -> Result<Vec<(f64, f64)>, SharpError> {
    if n_points < 3 || n_points.is_multiple_of(2) {
        return Err(SharpError::BadPointCount(n_points));
    }
    if x.len() != f.dim() {
        return Err(SharpError::Precondition("point dimension mismatch".into()));
    }
    let raw = match direction {
        Direction::Vector(v) => {
            if v.len() != x.len() {
                return Err(SharpError::Precondition("direction dimension mismatch".into()));
            }
            v.clone()
        }
        Direction::SteepestDescent => {
            let mut g = vec![0.0; x.len()];
            f.value_grad(x, &mut g);
            g.iter().map(|v| -v).collect()
        }
    };
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= MIN_DIRECTION_NORM) {
        return match direction {
            Direction::SteepestDescent => Err(SharpError::ZeroGradient(norm)),
            Direction::Vector(_) => Err(SharpError::Precondition("direction must be non-zero".into())),
        };
    }
    let dir: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let mid = n_points / 2;
    let mut probe = vec![0.0; x.len()];
    Ok((0..n_points)
        .map(|k| {
            if k == mid {
                return (0.0, f.value(x));
            }
            let s = range_halfwidth * ((k as f64 - mid as f64) / mid as f64);
            for i in 0..x.len() {
                probe[i] = x[i] + s * dir[i];
            }
            (s, f.value(&probe))
        })
        .collect())
}

pub fn write_width_csv<W: std::io::Write>(profile: &[(f64, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step_size,loss")?;
    for (s, l) in profile {
        writeln!(out, "{s},{l}")?;
    }
    Ok(())
}
