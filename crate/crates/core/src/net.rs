//! A dense multi-layer perceptron with exact backpropagation, synthetic
//! datasets, the IDX file format, and a mini-batch training loop.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::Objective;
use crate::optim::{OptimError, Optimizer, OptimizerHyper};
use crate::params::{LayerShape, ParamVector};
use crate::sched::{Schedule, ScheduleError};
use crate::seed::{derive_seed, rng_from};

pub use crate::params::ParamError;

/// Mini-batch loss above which a run is flagged as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input dimension {got} does not match the network input width {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("parameter count {got} does not match the network layout ({expected})")]
    ParamMismatch { got: usize, expected: usize },
    #[error("numeric overflow: non-finite activations")]
    NumericOverflow,
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("batch size {batch_size} must be in [1, {train_size}]")]
    BatchSize { batch_size: usize, train_size: usize },
    #[error("schedule covers {have} steps but training needs {need}")]
    ScheduleTooShort { have: u64, need: u64 },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad IDX magic: first two bytes must be zero")]
    BadMagic,
    #[error("unsupported IDX type code {0:#04x}")]
    UnsupportedType(u8),
    #[error("truncated IDX data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScale {
    He,
    Xavier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
    pub init_scale: InitScale,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, init_seed: u64) -> Self {
        let init_scale = match activation {
            Activation::Relu => InitScale::He,
            Activation::Tanh => InitScale::Xavier,
        };
        Self {
            layer_widths,
            activation,
            init_seed,
            init_scale,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layer_widths.len() < 2 {
            return Err(NetError::InvalidSpec(
                "layer_widths needs at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(NetError::InvalidSpec("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths.first().copied().unwrap_or(0)
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layer_widths
            .windows(2)
            .map(|w| LayerShape {
                rows: w[1],
                cols: w[0],
                has_bias: true,
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::len).sum()
    }
}

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self, NetError> {
        let d = Self {
            dim,
            inputs,
            labels,
            n_classes,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.dim == 0 || self.n_classes == 0 {
            return Err(NetError::InvalidDataset("dim and n_classes must be positive".into()));
        }
        if self.inputs.len() != self.labels.len() * self.dim {
            return Err(NetError::InvalidDataset(format!(
                "{} input values for {} labels of dimension {}",
                self.inputs.len(),
                self.labels.len(),
                self.dim
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(NetError::InvalidDataset(format!(
                "label {l} is not below n_classes {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// `x0,...,xk,label` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.input(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", row.join(","), self.labels[i])?;
        }
        Ok(())
    }
}

pub fn init_params(spec: &MlpSpec) -> Result<ParamVector, NetError> {
    spec.validate()?;
    let mut rng = rng_from(spec.init_seed);
    let shapes = spec.layer_shapes();
    let mut values = Vec::with_capacity(spec.n_params());
    for s in &shapes {
        let std = match spec.init_scale {
            InitScale::He => (2.0 / s.cols as f64).sqrt(),
            InitScale::Xavier => (1.0 / s.cols as f64).sqrt(),
        };
        for _ in 0..s.rows * s.cols {
            let z: f64 = rng.sample(StandardNormal);
            values.push(std * z);
        }
        values.extend(std::iter::repeat_n(0.0, s.rows));
    }
    Ok(ParamVector {
        values,
        layer_shapes: shapes,
    })
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => z.max(0.0),
        Activation::Tanh => z.tanh(),
    }
}

/// Derivative expressed through the pre-activation `z` and output `a`.
fn activate_grad(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - a * a,
    }
}

/// `log(sum(exp(z)))` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Cross-entropy of one datum from its logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    // lse >= z_label mathematically; clamp the rounding residue
    (log_sum_exp(logits) - logits[label]).max(0.0)
}

struct Forward {
    /// Pre-activations per layer (the last entry holds the logits).
    pre: Vec<Vec<f64>>,
    /// Post-activations per hidden layer, with the input at index 0.
    post: Vec<Vec<f64>>,
}

fn check_shapes(params: &ParamVector, spec: &MlpSpec, data: &Dataset) -> Result<(), NetError> {
    spec.validate()?;
    let expected = spec.n_params();
    if params.values.len() != expected {
        return Err(NetError::ParamMismatch {
            got: params.values.len(),
            expected,
        });
    }
    if data.dim != spec.input_dim() {
        return Err(NetError::DimensionMismatch {
            got: data.dim,
            expected: spec.input_dim(),
        });
    }
    Ok(())
}

fn forward_one(w: &[f64], spec: &MlpSpec, x: &[f64]) -> Forward {
    let n_layers = spec.layer_widths.len() - 1;
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers);
    post.push(x.to_vec());
    let mut at = 0;
    for l in 0..n_layers {
        let (cols, rows) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let weights = &w[at..at + rows * cols];
        let bias = &w[at + rows * cols..at + rows * cols + rows];
        at += rows * cols + rows;
        let input = &post[l];
        let z: Vec<f64> = (0..rows)
            .map(|r| {
                let row = &weights[r * cols..(r + 1) * cols];
                row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias[r]
            })
            .collect();
        if l + 1 < n_layers {
            post.push(z.iter().map(|&v| activate(spec.activation, v)).collect());
        }
        pre.push(z);
    }
    Forward { pre, post }
}

/// Mean cross-entropy over `batch` (indices into `data`) and the logits of
/// every datum, concatenated in batch order.
pub fn forward_loss(
    params: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<f64>), NetError> {
    check_shapes(params, spec, data)?;
    let mut logits = Vec::with_capacity(batch.len() * spec.n_classes());
    let mut total = 0.0;
    for &i in batch {
        let f = forward_one(&params.values, spec, data.input(i));
        let z = f.pre.last().expect("at least one layer");
        if z.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NumericOverflow);
        }
        total += cross_entropy(z, data.labels[i]);
        logits.extend_from_slice(z);
    }
    let loss = if batch.is_empty() {
        0.0
    } else {
        total / batch.len() as f64
    };
    Ok((loss, logits))
}

/// Backpropagates `dlogits` for one datum and accumulates into `grad`.
fn backward_one(w: &[f64], spec: &MlpSpec, f: &Forward, dlogits: Vec<f64>, grad: &mut [f64]) {
    let n_layers = spec.layer_widths.len() - 1;
    let mut offsets = Vec::with_capacity(n_layers);
    let mut at = 0;
    for l in 0..n_layers {
        offsets.push(at);
        at += spec.layer_widths[l + 1] * spec.layer_widths[l] + spec.layer_widths[l + 1];
    }
    let mut dz = dlogits;
    for l in (0..n_layers).rev() {
        let (cols, rows) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let off = offsets[l];
        let input = &f.post[l];
        for r in 0..rows {
            let g_row = &mut grad[off + r * cols..off + (r + 1) * cols];
            for (g, a) in g_row.iter_mut().zip(input) {
                *g += dz[r] * a;
            }
            grad[off + rows * cols + r] += dz[r];
        }
        if l > 0 {
            let weights = &w[off..off + rows * cols];
            let z_prev = &f.pre[l - 1];
            let a_prev = &f.post[l];
            dz = (0..cols)
                .map(|c| {
                    let back: f64 = (0..rows).map(|r| weights[r * cols + c] * dz[r]).sum();
                    back * activate_grad(spec.activation, z_prev[c], a_prev[c])
                })
                .collect();
        }
    }
}

/// Mean loss and its exact gradient over `batch`.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<f64>), NetError> {
    check_shapes(params, spec, data)?;
    let mut grad = vec![0.0; params.len()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let k = spec.n_classes();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut probs = vec![0.0; k];
    for &i in batch {
        let f = forward_one(&params.values, spec, data.input(i));
        let z = f.pre.last().expect("at least one layer");
        if z.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NumericOverflow);
        }
        let y = data.labels[i];
        total += cross_entropy(z, y);
        softmax_into(z, &mut probs);
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(c, &p)| scale * (p - if c == y { 1.0 } else { 0.0 }))
            .collect();
        backward_one(&params.values, spec, &f, dlogits, &mut grad);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(NetError::NumericOverflow);
    }
    Ok((total * scale, grad))
}

pub fn grad(params: &ParamVector, spec: &MlpSpec, data: &Dataset, batch: &[usize]) -> Result<ParamVector, NetError> {
    let (_, g) = loss_and_grad(params, spec, data, batch)?;
    Ok(ParamVector {
        values: g,
        layer_shapes: params.layer_shapes.clone(),
    })
}

/// Gradient of `log p(class | x_i)` with respect to all parameters, plus
/// the predictive distribution at `x_i`.
pub fn grad_log_prob(params: &ParamVector, spec: &MlpSpec, x: &[f64], class: usize, grad: &mut [f64]) -> Vec<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let f = forward_one(&params.values, spec, x);
    let z = f.pre.last().expect("at least one layer");
    let mut probs = vec![0.0; z.len()];
    softmax_into(z, &mut probs);
    // d log p_c / dz = onehot_c - p
    let dlogits: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| if k == class { 1.0 - p } else { -p })
        .collect();
    backward_one(&params.values, spec, &f, dlogits, grad);
    probs
}

pub fn predict_probs(params: &ParamVector, spec: &MlpSpec, x: &[f64]) -> Vec<f64> {
    let f = forward_one(&params.values, spec, x);
    let z = f.pre.last().expect("at least one layer");
    let mut probs = vec![0.0; z.len()];
    softmax_into(z, &mut probs);
    probs
}

/// Fraction of `batch` whose argmax logit equals the label.
pub fn accuracy(params: &ParamVector, spec: &MlpSpec, data: &Dataset, batch: &[usize]) -> Result<f64, NetError> {
    let (_, logits) = forward_loss(params, spec, data, batch)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let k = spec.n_classes();
    let correct = batch
        .iter()
        .zip(logits.chunks(k))
        .filter(|(&i, z)| {
            let mut best = 0;
            for c in 1..k {
                if z[c] > z[best] {
                    best = c;
                }
            }
            best == data.labels[i]
        })
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn finite_diff_grad(
    params: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    batch: &[usize],
    h: f64,
) -> Result<ParamVector, NetError> {
    check_shapes(params, spec, data)?;
    let mut failed = false;
    let values = central_difference(
        |x| {
            let p = ParamVector {
                values: x.to_vec(),
                layer_shapes: params.layer_shapes.clone(),
            };
            match forward_loss(&p, spec, data, batch) {
                Ok((l, _)) => l,
                Err(_) => {
                    failed = true;
                    f64::NAN
                }
            }
        },
        &params.values,
        h,
    );
    if failed {
        return Err(NetError::NumericOverflow);
    }
    Ok(ParamVector {
        values,
        layer_shapes: params.layer_shapes.clone(),
    })
}

/// Full-batch training loss over a fixed index set, as an [`Objective`].
pub struct MlpObjective<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset,
    pub indices: &'a [usize],
    pub layer_shapes: Vec<LayerShape>,
}

impl<'a> MlpObjective<'a> {
    pub fn new(spec: &'a MlpSpec, data: &'a Dataset, indices: &'a [usize]) -> Self {
        Self {
            spec,
            data,
            indices,
            layer_shapes: spec.layer_shapes(),
        }
    }

    fn wrap(&self, x: &[f64]) -> ParamVector {
        ParamVector {
            values: x.to_vec(),
            layer_shapes: self.layer_shapes.clone(),
        }
    }
}

impl Objective for MlpObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.n_params()
    }

    fn value(&self, x: &[f64]) -> f64 {
        forward_loss(&self.wrap(x), self.spec, self.data, self.indices)
            .map(|(l, _)| l)
            .unwrap_or(f64::NAN)
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match loss_and_grad(&self.wrap(x), self.spec, self.data, self.indices) {
            Ok((l, g)) => {
                grad.copy_from_slice(&g);
                l
            }
            Err(_) => {
                grad.iter_mut().for_each(|v| *v = f64::NAN);
                f64::NAN
            }
        }
    }
}

// ---------------------------------------------------------------- datasets

/// Class centers: evenly spaced on a line for `dim == 1`, otherwise on a
/// circle in the first two coordinates, with adjacent centers exactly
/// `separation` apart.
pub fn blob_centers(n_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if dim == 1 || n_classes == 1 {
                c[0] = separation * (k as f64 - (n_classes as f64 - 1.0) / 2.0);
            } else {
                let radius = separation / (2.0 * (PI / n_classes as f64).sin());
                let angle = 2.0 * PI * k as f64 / n_classes as f64;
                c[0] = radius * angle.cos();
                c[1] = radius * angle.sin();
            }
            c
        })
        .collect()
}

/// Isotropic unit-variance Gaussian blobs, `n_per_class` points per class,
/// stored class by class.
pub fn make_blobs(n_per_class: usize, n_classes: usize, dim: usize, separation: f64, seed: u64) -> Dataset {
    let mut rng = rng_from(seed);
    let centers = blob_centers(n_classes, dim, separation);
    let mut inputs = Vec::with_capacity(n_per_class * n_classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * n_classes);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &ci in c {
                let z: f64 = rng.sample(StandardNormal);
                inputs.push(ci + z);
            }
            labels.push(k);
        }
    }
    Dataset {
        dim,
        inputs,
        labels,
        n_classes,
    }
}

/// Noise-free point of arm `arm` (0 or 1) at arm parameter `s` in `[0, 1]`.
pub fn spiral_point(arm: usize, s: f64) -> [f64; 2] {
    let angle = 3.0 * PI * s + PI * arm as f64;
    let radius = 0.1 + 0.9 * s;
    [radius * angle.cos(), radius * angle.sin()]
}

/// Two interleaved spiral arms, each `n_per_arm` points at equally spaced
/// arm parameters, with Gaussian noise of standard deviation `noise`.
pub fn make_spirals(n_per_arm: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = rng_from(seed);
    let mut inputs = Vec::with_capacity(4 * n_per_arm);
    let mut labels = Vec::with_capacity(2 * n_per_arm);
    for arm in 0..2 {
        for i in 0..n_per_arm {
            let s = if n_per_arm > 1 {
                i as f64 / (n_per_arm - 1) as f64
            } else {
                0.0
            };
            let p = spiral_point(arm, s);
            for v in p {
                let z: f64 = rng.sample(StandardNormal);
                inputs.push(v + noise * z);
            }
            labels.push(arm);
        }
    }
    Dataset {
        dim: 2,
        inputs,
        labels,
        n_classes: 2,
    }
}

// --------------------------------------------------------------------- IDX

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic);
    }
    if bytes[2] != 0x08 {
        return Err(IdxError::UnsupportedType(bytes[2]));
    }
    let n_dims = bytes[3] as usize;
    let header = 4 + 4 * n_dims;
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<u32> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let payload: usize = dims.iter().map(|&d| d as usize).product();
    let have = bytes.len() - header;
    if have < payload {
        return Err(IdxError::Truncated {
            expected: payload,
            found: have,
        });
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header..header + payload].to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxTensor, IdxError> {
    let bytes = std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_idx(&bytes)
}

/// Builds a dataset from an image tensor (first dim = count) and a label
/// vector, scaling pixels to `[0, 1]`.
pub fn dataset_from_idx(images: &IdxTensor, labels: &IdxTensor, n_classes: usize) -> Result<Dataset, NetError> {
    let count = *images
        .dims
        .first()
        .ok_or_else(|| NetError::InvalidDataset("image tensor has no dimensions".into()))? as usize;
    if labels.data.len() != count {
        return Err(NetError::InvalidDataset(format!(
            "{count} images but {} labels",
            labels.data.len()
        )));
    }
    let dim = images.data.len().checked_div(count).unwrap_or(0);
    Dataset::new(
        dim,
        images.data.iter().map(|&b| b as f64 / 255.0).collect(),
        labels.data.iter().map(|&b| b as usize).collect(),
        n_classes,
    )
}

// ---------------------------------------------------------------- training

/// Deterministic 80/20 split by seeded permutation: `(train, test)`.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(derive_seed(seed, &[0x5EED])));
    let n_test = n / 5;
    let test = idx.split_off(n - n_test);
    (idx, test)
}

pub fn steps_per_epoch(train_size: usize, batch_size: usize) -> u64 {
    train_size.div_ceil(batch_size) as u64
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub params: ParamVector,
    pub final_train_loss: f64,
    pub test_accuracy: f64,
    /// Mean mini-batch loss of each completed epoch.
    pub loss_curve: Vec<f64>,
    /// Test accuracy after each completed epoch.
    pub accuracy_curve: Vec<f64>,
    pub steps: u64,
    pub diverged: bool,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_training(
    spec: &MlpSpec,
    dataset: &Dataset,
    schedule: &Schedule,
    hyper: &OptimizerHyper,
    epochs: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<TrainingRun, NetError> {
    spec.validate()?;
    dataset.validate()?;
    if dataset.dim != spec.input_dim() {
        return Err(NetError::DimensionMismatch {
            got: dataset.dim,
            expected: spec.input_dim(),
        });
    }
    let (train, test) = split_indices(dataset.len(), shuffle_seed);
    if batch_size == 0 || batch_size > train.len() {
        return Err(NetError::BatchSize {
            batch_size,
            train_size: train.len(),
        });
    }
    let per_epoch = steps_per_epoch(train.len(), batch_size);
    let need = per_epoch * epochs as u64;
    if schedule.total_steps() < need {
        return Err(NetError::ScheduleTooShort {
            have: schedule.total_steps(),
            need,
        });
    }

    let mut params = init_params(spec)?;
    let mut opt = Optimizer::new(hyper.clone(), params.len());
    let mut rng = rng_from(derive_seed(shuffle_seed, &[1]));
    let mut order = train.clone();
    let mut loss_curve = Vec::with_capacity(epochs);
    let mut accuracy_curve = Vec::with_capacity(epochs);
    let mut step = 0u64;
    let mut diverged = false;
    let mut last_loss = f64::NAN;

    'epochs: for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let lr = schedule.lr_at(step)?;
            step += 1;
            let (loss, g) = match loss_and_grad(&params, spec, dataset, batch) {
                Ok(v) => v,
                Err(NetError::NumericOverflow) => {
                    diverged = true;
                    last_loss = f64::INFINITY;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                diverged = true;
                last_loss = loss;
                break 'epochs;
            }
            epoch_loss += loss;
            match opt.step(&mut params, &g, lr) {
                Ok(()) => {}
                Err(OptimError::NonFinite(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            }
            if params.values.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break 'epochs;
            }
        }
        loss_curve.push(epoch_loss / per_epoch as f64);
        accuracy_curve.push(accuracy(&params, spec, dataset, &test).unwrap_or(f64::NAN));
    }

    let (final_train_loss, test_accuracy) = if diverged {
        (last_loss, f64::NAN)
    } else {
        match forward_loss(&params, spec, dataset, &train) {
            Ok((l, _)) if l <= DIVERGENCE_LOSS => (l, accuracy(&params, spec, dataset, &test)?),
            Ok((l, _)) => {
                diverged = true;
                (l, f64::NAN)
            }
            Err(NetError::NumericOverflow) => {
                diverged = true;
                (f64::INFINITY, f64::NAN)
            }
            Err(e) => return Err(e),
        }
    };

    Ok(TrainingRun {
        params,
        final_train_loss,
        test_accuracy,
        loss_curve,
        accuracy_curve,
        steps: step,
        diverged,
        train_indices: train,
        test_indices: test,
    })
}
