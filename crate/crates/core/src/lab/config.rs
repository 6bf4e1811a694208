//! Experiment configuration: JSON in, validated struct out, canonical JSON
//! back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{Activation, InitScale};
use crate::optim::OptimizerHyper;
use crate::sched::{ScheduleKind, ScheduleSpec};
use crate::sharp::{FisherConfig, SharpnessConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Blobs {
        n_per_class: usize,
        n_classes: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    },
    Spirals {
        n_per_arm: usize,
        noise: f64,
        seed: u64,
    },
    Idx {
        images: String,
        labels: String,
        n_classes: usize,
    },
}

/// Network shape; the init seed is derived per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_scale: InitScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Subject {
    /// Schedule step fields are in epochs for this subject.
    Mlp {
        net: NetSpec,
        data: DataSpec,
        epochs: usize,
        batch_size: usize,
    },
    /// Schedule step fields are in walk steps for this subject.
    Landscape {
        n_wide: usize,
        c_wide: f64,
        n_narrow: usize,
        c_narrow: f64,
        dim: usize,
        domain_box: f64,
        layout_seed: u64,
        noise_sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ExploreSteps,
    SeedLr,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            axis: SweepAxis::None,
            values: Vec::new(),
        }
    }
}

fn default_range_n() -> usize {
    41
}
fn default_range_halfwidth() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSettings {
    #[serde(default = "default_range_halfwidth")]
    pub range_halfwidth: f64,
    #[serde(default = "default_range_n")]
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessSettings {
    #[serde(default)]
    pub keskar: Option<SharpnessConfig>,
    #[serde(default)]
    pub fisher: Option<FisherConfig>,
    #[serde(default)]
    pub width: Option<WidthSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeTestSettings {
    pub lr_start: f64,
    pub lr_mult_per_step: f64,
    pub max_steps: usize,
}

fn default_jobs() -> usize {
    1
}

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub subject: Subject,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: Option<OptimizerHyper>,
    pub trials: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub sharpness: Option<SharpnessSettings>,
    #[serde(default)]
    pub range_test: Option<RangeTestSettings>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub save_checkpoints: bool,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Pretty JSON with keys in declaration order and a trailing newline.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(invalid("jobs", "must be at least 1"));
        }
        match self.sweep.axis {
            SweepAxis::None => {
                if !self.sweep.values.is_empty() {
                    return Err(invalid("sweep.values", "must be empty when sweep.axis is none"));
                }
            }
            SweepAxis::ExploreSteps => {
                if self.sweep.values.is_empty() {
                    return Err(invalid("sweep.values", "must not be empty"));
                }
                if self.schedule.kind != ScheduleKind::Knee {
                    return Err(invalid("sweep.axis", "explore_steps sweeps need a knee schedule"));
                }
                for &v in &self.sweep.values {
                    if !(v >= 0.0 && v.fract() == 0.0) {
                        return Err(invalid(
                            "sweep.values",
                            format!("explore value {v} is not a non-negative integer"),
                        ));
                    }
                    let mut s = self.schedule.clone();
                    s.knee_explore_steps = v as u64;
                    s.validate()
                        .map_err(|e| invalid("sweep.values", format!("explore value {v}: {e}")))?;
                }
            }
            SweepAxis::SeedLr => {
                if self.sweep.values.is_empty() {
                    return Err(invalid("sweep.values", "must not be empty"));
                }
                if self.sweep.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(invalid("sweep.values", "seed learning rates must be finite and > 0"));
                }
            }
        }
        self.schedule
            .validate()
            .map_err(|e| invalid("schedule", e.to_string()))?;
        if let Some(o) = &self.optimizer {
            o.validate().map_err(|m| invalid("optimizer", m))?;
        }
        match &self.subject {
            Subject::Mlp {
                net,
                data,
                epochs,
                batch_size,
            } => {
                if self.optimizer.is_none() {
                    return Err(invalid("optimizer", "required for the mlp subject"));
                }
                if net.layer_widths.len() < 2 || net.layer_widths.contains(&0) {
                    return Err(invalid("subject.net.layer_widths", "needs >= 2 positive widths"));
                }
                if *batch_size == 0 {
                    return Err(invalid("subject.batch_size", "must be at least 1"));
                }
                if self.schedule.total_steps != *epochs as u64 {
                    return Err(invalid(
                        "schedule.total_steps",
                        format!("must equal subject.epochs ({epochs}) for the mlp subject"),
                    ));
                }
                let (dim, classes) = match data {
                    DataSpec::Blobs {
                        n_per_class,
                        n_classes,
                        dim,
                        separation,
                        ..
                    } => {
                        if *n_per_class == 0 || *n_classes == 0 || *dim == 0 || !separation.is_finite() {
                            return Err(invalid("subject.data", "blob sizes must be positive"));
                        }
                        (*dim, *n_classes)
                    }
                    DataSpec::Spirals { n_per_arm, noise, .. } => {
                        if *n_per_arm == 0 || !(*noise >= 0.0) {
                            return Err(invalid("subject.data", "spirals need n_per_arm >= 1 and noise >= 0"));
                        }
                        (2, 2)
                    }
                    DataSpec::Idx { n_classes, .. } => (net.layer_widths[0], *n_classes),
                };
                if net.layer_widths[0] != dim {
                    return Err(invalid(
                        "subject.net.layer_widths",
                        "first width must equal the data dimension",
                    ));
                }
                if *net.layer_widths.last().unwrap() != classes {
                    return Err(invalid(
                        "subject.net.layer_widths",
                        "last width must equal the number of classes",
                    ));
                }
            }
            Subject::Landscape {
                n_wide,
                c_wide,
                n_narrow,
                c_narrow,
                dim,
                domain_box,
                noise_sigma,
                ..
            } => {
                if n_wide + n_narrow == 0 {
                    return Err(invalid("subject.n_wide", "at least one basin is required"));
                }
                if !(*c_wide > 0.0 && c_wide < c_narrow && c_narrow.is_finite()) {
                    return Err(invalid("subject.c_wide", "requires 0 < c_wide < c_narrow"));
                }
                if *dim == 0 || !(*domain_box > 0.0) {
                    return Err(invalid("subject.dim", "dim and domain_box must be positive"));
                }
                if !(*noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                    return Err(invalid("subject.noise_sigma", "must be finite and >= 0"));
                }
            }
        }
        if let Some(s) = &self.sharpness {
            if let Some(k) = &s.keskar {
                k.validate().map_err(|e| invalid("sharpness.keskar", e.to_string()))?;
            }
            if let Some(w) = &s.width {
                if w.n_points < 3 || w.n_points % 2 == 0 {
                    return Err(invalid("sharpness.width.n_points", "must be odd and >= 3"));
                }
            }
        }
        if let Some(r) = &self.range_test {
            if !(r.lr_start > 0.0 && r.lr_start.is_finite()) {
                return Err(invalid("range_test.lr_start", "must be > 0"));
            }
            if !(r.lr_mult_per_step > 1.0 && r.lr_mult_per_step.is_finite()) {
                return Err(invalid("range_test.lr_mult_per_step", "must be > 1"));
            }
            if r.max_steps == 0 {
                return Err(invalid("range_test.max_steps", "must be at least 1"));
            }
        }
        Ok(())
    }
}
