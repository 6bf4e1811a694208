//! Learning-rate schedules indexed by global optimizer step.
//!
//! A [`ScheduleSpec`] is a flat, declarative description that deserializes
//! straight from the experiment config. [`build_schedule`] validates it and
//! returns an immutable [`Schedule`] which can be evaluated from any thread.
//!
//! Shapes (with `T = total_steps`, `W = warmup_steps`):
//!
//! - `knee`: linear warmup `0 -> seed_lr` over `W`, constant `seed_lr` until
//!   `E = W + knee_explore_steps`, then `seed_lr * (T - t) / (T - E)`.
//! - `step`: piecewise constant from `step_boundaries` (absolute steps).
//! - `linear`, `cosine`: decay to zero over the post-warmup budget.
//! - `one_cycle`: 45% ramp up, 45% ramp down, final 10% annealing.
//! - `inv_sqrt`: its own linear warmup, then `seed_lr * sqrt(w / t)`.
//! - `constant`: `seed_lr` everywhere after warmup.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule spec: {0}")]
    InvalidSpec(String),
    #[error("step {step} is outside the schedule range [0, {total_steps}]")]
    OutOfRange { step: u64, total_steps: u64 },
    #[error("stride must be at least 1")]
    ZeroStride,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Knee,
    Step,
    Linear,
    Cosine,
    OneCycle,
    InvSqrt,
    Constant,
}

/// One `(step, lr)` boundary of a piecewise-constant schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBoundary {
    pub step: u64,
    pub lr: f64,
}

fn default_start_fraction() -> f64 {
    0.1
}

fn default_final_div() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub total_steps: u64,
    pub seed_lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub knee_explore_steps: u64,
    #[serde(default)]
    pub step_boundaries: Vec<StepBoundary>,
    #[serde(default)]
    pub one_cycle_max_lr: Option<f64>,
    #[serde(default = "default_start_fraction")]
    pub one_cycle_start_fraction: f64,
    #[serde(default = "default_final_div")]
    pub one_cycle_final_div: f64,
    #[serde(default)]
    pub inv_sqrt_warmup: Option<u64>,
}

impl ScheduleSpec {
    fn base(kind: ScheduleKind, seed_lr: f64, total_steps: u64) -> Self {
        Self {
            kind,
            total_steps,
            seed_lr,
            warmup_steps: 0,
            knee_explore_steps: 0,
            step_boundaries: Vec::new(),
            one_cycle_max_lr: None,
            one_cycle_start_fraction: default_start_fraction(),
            one_cycle_final_div: default_final_div(),
            inv_sqrt_warmup: None,
        }
    }

    pub fn knee(seed_lr: f64, total_steps: u64, explore_steps: u64) -> Self {
        Self {
            knee_explore_steps: explore_steps,
            ..Self::base(ScheduleKind::Knee, seed_lr, total_steps)
        }
    }

    pub fn linear(seed_lr: f64, total_steps: u64) -> Self {
        Self::base(ScheduleKind::Linear, seed_lr, total_steps)
    }

    pub fn cosine(seed_lr: f64, total_steps: u64) -> Self {
        Self::base(ScheduleKind::Cosine, seed_lr, total_steps)
    }

    pub fn constant(seed_lr: f64, total_steps: u64) -> Self {
        Self::base(ScheduleKind::Constant, seed_lr, total_steps)
    }

    /// Piecewise constant; `seed_lr` is taken from the first boundary.
    pub fn step(boundaries: &[(u64, f64)], total_steps: u64) -> Self {
        let seed_lr = boundaries.first().map(|b| b.1).unwrap_or(0.0);
        Self {
            step_boundaries: boundaries.iter().map(|&(step, lr)| StepBoundary { step, lr }).collect(),
            ..Self::base(ScheduleKind::Step, seed_lr, total_steps)
        }
    }

    pub fn one_cycle(max_lr: f64, total_steps: u64) -> Self {
        Self {
            one_cycle_max_lr: Some(max_lr),
            ..Self::base(ScheduleKind::OneCycle, max_lr, total_steps)
        }
    }

    pub fn inv_sqrt(seed_lr: f64, warmup: u64, total_steps: u64) -> Self {
        Self {
            inv_sqrt_warmup: Some(warmup),
            ..Self::base(ScheduleKind::InvSqrt, seed_lr, total_steps)
        }
    }

    pub fn with_warmup(mut self, warmup_steps: u64) -> Self {
        self.warmup_steps = warmup_steps;
        self
    }

    /// Returns a copy with every step-valued field multiplied by `factor`.
    /// Used to turn an epoch-denominated spec into a step-denominated one.
    pub fn scaled(&self, factor: u64) -> Self {
        let mut out = self.clone();
        out.total_steps *= factor;
        out.warmup_steps *= factor;
        out.knee_explore_steps *= factor;
        for b in &mut out.step_boundaries {
            b.step *= factor;
        }
        out.inv_sqrt_warmup = out.inv_sqrt_warmup.map(|w| w * factor);
        out
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let invalid = |msg: String| Err(ScheduleError::InvalidSpec(msg));
        if self.total_steps == 0 {
            return invalid("total_steps must be positive".into());
        }
        // a zero constant schedule is allowed as a no-update control
        let zero_ok = self.kind == ScheduleKind::Constant && self.seed_lr == 0.0;
        if !(self.seed_lr.is_finite() && (self.seed_lr > 0.0 || zero_ok)) {
            return invalid(format!("seed_lr must be finite and > 0, got {}", self.seed_lr));
        }
        if self.warmup_steps > self.total_steps {
            return invalid("warmup_steps exceeds total_steps".into());
        }
        match self.kind {
            ScheduleKind::Knee => {
                if self.warmup_steps + self.knee_explore_steps > self.total_steps {
                    return invalid("warmup_steps + knee_explore_steps must not exceed total_steps".into());
                }
            }
            ScheduleKind::Step => {
                let b = &self.step_boundaries;
                if b.is_empty() {
                    return invalid("step_boundaries must not be empty".into());
                }
                if b[0].step != 0 {
                    return invalid("first step boundary must be at step 0".into());
                }
                if b.windows(2).any(|w| w[1].step <= w[0].step) {
                    return invalid("step_boundaries must be strictly increasing".into());
                }
                if b.iter().any(|x| !(x.lr.is_finite() && x.lr > 0.0)) {
                    return invalid("step boundary learning rates must be finite and > 0".into());
                }
            }
            ScheduleKind::OneCycle => {
                match self.one_cycle_max_lr {
                    Some(m) if m.is_finite() && m > 0.0 => {}
                    _ => return invalid("one_cycle_max_lr must be finite and > 0".into()),
                }
                let f = self.one_cycle_start_fraction;
                if !(f > 0.0 && f <= 1.0) {
                    return invalid("one_cycle_start_fraction must lie in (0, 1]".into());
                }
                let d = self.one_cycle_final_div;
                if !(d.is_finite() && d > 0.0) {
                    return invalid("one_cycle_final_div must be finite and > 0".into());
                }
            }
            ScheduleKind::InvSqrt => {
                match self.inv_sqrt_warmup {
                    Some(w) if w > 0 => {}
                    _ => return invalid("inv_sqrt_warmup must be a positive integer".into()),
                }
                if self.warmup_steps != 0 {
                    return invalid("inv_sqrt uses inv_sqrt_warmup; warmup_steps must be 0".into());
                }
            }
            ScheduleKind::Linear | ScheduleKind::Cosine | ScheduleKind::Constant => {}
        }
        Ok(())
    }
}

/// A validated, immutable learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    spec: ScheduleSpec,
}

pub fn build_schedule(spec: ScheduleSpec) -> Result<Schedule, ScheduleError> {
    spec.validate()?;
    Ok(Schedule { spec })
}

impl Schedule {
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn total_steps(&self) -> u64 {
        self.spec.total_steps
    }

    /// Learning rate applied at `step`, for `0 <= step <= total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64, ScheduleError> {
        let s = &self.spec;
        if step > s.total_steps {
            return Err(ScheduleError::OutOfRange {
                step,
                total_steps: s.total_steps,
            });
        }
        let w = s.warmup_steps;
        if step < w {
            let target = self.post_warmup(w);
            return Ok(target * (step as f64 / w as f64));
        }
        Ok(self.post_warmup(step))
    }

    /// Shape value at `step >= warmup_steps`.
    fn post_warmup(&self, step: u64) -> f64 {
        let s = &self.spec;
        let total = s.total_steps;
        let w = s.warmup_steps;
        match s.kind {
            ScheduleKind::Constant => s.seed_lr,
            ScheduleKind::Knee => {
                let explore_end = w + s.knee_explore_steps;
                if step < explore_end {
                    s.seed_lr
                } else {
                    linear_to_zero(s.seed_lr, step, explore_end, total)
                }
            }
            ScheduleKind::Linear => linear_to_zero(s.seed_lr, step, w, total),
            ScheduleKind::Cosine => {
                if step >= total {
                    return 0.0;
                }
                let frac = (step - w) as f64 / (total - w) as f64;
                s.seed_lr * (0.5 * (1.0 + (PI * frac).cos()))
            }
            ScheduleKind::Step => {
                let b = &s.step_boundaries;
                let idx = b.partition_point(|x| x.step <= step);
                b[idx.saturating_sub(1)].lr
            }
            ScheduleKind::OneCycle => {
                let max = s.one_cycle_max_lr.unwrap_or(s.seed_lr);
                let lo = s.one_cycle_start_fraction * max;
                let end = lo / s.one_cycle_final_div;
                let budget = (total - w) as f64;
                let tau = (step - w) as f64;
                let up = 0.45 * budget;
                let down = 0.9 * budget;
                if tau < up {
                    lo + (max - lo) * (tau / up)
                } else if tau < down {
                    max - (max - lo) * ((tau - up) / (down - up))
                } else if budget > down {
                    lo - (lo - end) * ((tau - down) / (budget - down))
                } else {
                    end
                }
            }
            ScheduleKind::InvSqrt => {
                let ws = s.inv_sqrt_warmup.unwrap_or(1);
                if step < ws {
                    s.seed_lr * (step as f64 / ws as f64)
                } else {
                    s.seed_lr * (ws as f64 / step as f64).sqrt()
                }
            }
        }
    }

    /// Samples `lr_at` at `0, stride, 2*stride, ...` up to `total_steps`.
    pub fn table(&self, stride: u64) -> Result<Vec<(u64, f64)>, ScheduleError> {
        schedule_table(self, stride)
    }
}

/// `seed * (total - step) / (total - start)`; zero at `step == total`.
fn linear_to_zero(seed: f64, step: u64, start: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    seed * ((total - step) as f64 / (total - start) as f64)
}

pub fn schedule_table(schedule: &Schedule, stride: u64) -> Result<Vec<(u64, f64)>, ScheduleError> {
    if stride == 0 {
        return Err(ScheduleError::ZeroStride);
    }
    (0..=schedule.total_steps())
        .step_by(stride as usize)
        .map(|t| schedule.lr_at(t).map(|lr| (t, lr)))
        .collect()
}

/// Writes a table as `step,lr` CSV with `\n` line endings.
pub fn write_table_csv<W: Write>(table: &[(u64, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,lr")?;
    for (step, lr) in table {
        writeln!(out, "{step},{lr}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lr(spec: ScheduleSpec, t: u64) -> f64 {
        build_schedule(spec).unwrap().lr_at(t).unwrap()
    }

    #[test]
    fn knee_explore_and_decay() {
        let k = ScheduleSpec::knee(0.1, 200, 100);
        assert_eq!(lr(k.clone(), 50), 0.1);
        assert_eq!(lr(k.clone(), 150), 0.05);
        assert_eq!(lr(k, 200), 0.0);
    }

    #[test]
    fn knee_seed_3e4_holds_through_explore() {
        // 50 epochs of 100 steps, 40 explore epochs
        let k = ScheduleSpec::knee(3e-4, 5000, 4000);
        assert_eq!(lr(k, 2000), 3e-4);
    }

    #[test]
    fn step_boundaries_piecewise() {
        let s = ScheduleSpec::step(&[(0, 0.1), (100, 0.01), (150, 0.001)], 200);
        assert_eq!(lr(s.clone(), 0), 0.1);
        assert_eq!(lr(s.clone(), 99), 0.1);
        assert_eq!(lr(s.clone(), 120), 0.01);
        assert_eq!(lr(s.clone(), 150), 0.001);
        assert_eq!(lr(s, 200), 0.001);
    }

    #[test]
    fn cosine_midpoint_and_end() {
        let c = ScheduleSpec::cosine(0.1, 200);
        assert_eq!(lr(c.clone(), 100), 0.05);
        assert_eq!(lr(c.clone(), 0), 0.1);
        assert_eq!(lr(c, 200), 0.0);
    }

    #[test]
    fn warmup_starts_at_zero() {
        for spec in [
            ScheduleSpec::knee(0.1, 100, 20),
            ScheduleSpec::linear(0.1, 100),
            ScheduleSpec::cosine(0.1, 100),
            ScheduleSpec::constant(0.1, 100),
            ScheduleSpec::one_cycle(0.1, 100),
            ScheduleSpec::step(&[(0, 0.1), (50, 0.01)], 100),
        ] {
            let spec = spec.with_warmup(10);
            assert_eq!(lr(spec.clone(), 0), 0.0, "{:?}", spec.kind);
            assert!(lr(spec, 5) > 0.0);
        }
        assert_eq!(lr(ScheduleSpec::inv_sqrt(1.0, 10, 100), 0), 0.0);
    }

    #[test]
    fn knee_warmup_reaches_seed_then_holds() {
        let k = ScheduleSpec::knee(0.2, 100, 30).with_warmup(10);
        assert_eq!(lr(k.clone(), 5), 0.1);
        assert_eq!(lr(k.clone(), 10), 0.2);
        assert_eq!(lr(k.clone(), 39), 0.2);
        assert!(lr(k.clone(), 41) < 0.2);
        assert_eq!(lr(k, 100), 0.0);
    }

    #[test]
    fn inv_sqrt_quarter_point() {
        let s = 7e-4;
        let spec = ScheduleSpec::inv_sqrt(s, 6000, 30000);
        assert_eq!(lr(spec.clone(), 24000), s / 2.0);
        assert_eq!(lr(spec.clone(), 6000), s);
        assert_eq!(lr(spec, 3000), s / 2.0);
    }

    #[test]
    fn one_cycle_shape() {
        let spec = ScheduleSpec::one_cycle(1.0, 1000);
        let v = |t| lr(spec.clone(), t);
        assert!((v(0) - 0.1).abs() < 1e-15);
        assert!((v(450) - 1.0).abs() < 1e-15);
        assert!((v(900) - 0.1).abs() < 1e-12);
        assert!((v(1000) - 0.01).abs() < 1e-12);
        for t in 1..450 {
            assert!(v(t) > v(t - 1));
        }
        for t in 451..=1000 {
            assert!(v(t) < v(t - 1));
        }
    }

    #[test]
    fn table_examples() {
        let c = build_schedule(ScheduleSpec::constant(0.1, 10)).unwrap();
        assert_eq!(c.table(5).unwrap(), vec![(0, 0.1), (5, 0.1), (10, 0.1)]);
        let k = build_schedule(ScheduleSpec::knee(0.1, 4, 2)).unwrap();
        assert_eq!(
            k.table(1).unwrap(),
            vec![(0, 0.1), (1, 0.1), (2, 0.1), (3, 0.05), (4, 0.0)]
        );
        assert_eq!(k.table(3).unwrap().len(), 4 / 3 + 1);
        assert_eq!(k.table(0), Err(ScheduleError::ZeroStride));
    }

    #[test]
    fn out_of_range_step() {
        let k = build_schedule(ScheduleSpec::knee(0.1, 10, 5)).unwrap();
        assert_eq!(
            k.lr_at(11),
            Err(ScheduleError::OutOfRange {
                step: 11,
                total_steps: 10
            })
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            ScheduleSpec::knee(0.1, 10, 11),
            ScheduleSpec::knee(0.1, 10, 6).with_warmup(5),
            ScheduleSpec::knee(0.0, 10, 1),
            ScheduleSpec::knee(f64::NAN, 10, 1),
            ScheduleSpec::linear(0.1, 0),
            ScheduleSpec::step(&[(1, 0.1)], 10),
            ScheduleSpec::step(&[(0, 0.1), (5, 0.01), (5, 0.001)], 10),
            ScheduleSpec::step(&[(0, 0.1), (5, 0.0)], 10),
            ScheduleSpec::inv_sqrt(0.1, 0, 10),
            ScheduleSpec::inv_sqrt(0.1, 4, 10).with_warmup(2),
        ];
        for spec in bad {
            assert!(matches!(build_schedule(spec), Err(ScheduleError::InvalidSpec(_))));
        }
    }

    #[test]
    fn csv_export() {
        let k = build_schedule(ScheduleSpec::knee(0.1, 4, 2)).unwrap();
        let mut buf = Vec::new();
        write_table_csv(&k.table(2).unwrap(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,lr\n0,0.1\n2,0.1\n4,0\n");
    }

    #[test]
    fn spec_json_rejects_unknown_fields() {
        let ok = r#"{"kind":"knee","total_steps":10,"seed_lr":0.1,"knee_explore_steps":5}"#;
        let spec: ScheduleSpec = serde_json::from_str(ok).unwrap();
        assert_eq!(spec, ScheduleSpec::knee(0.1, 10, 5));
        let typo = r#"{"kind":"knee","total_steps":10,"seed_lr":0.1,"knee_explor_steps":5}"#;
        assert!(serde_json::from_str::<ScheduleSpec>(typo).is_err());
    }
}
