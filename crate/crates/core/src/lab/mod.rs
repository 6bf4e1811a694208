//! Experiment orchestration: seeded sweeps over a subject, the LR range
//! test, CSV/JSON artifacts and the command line.

pub mod cli;
pub mod config;
pub mod output;
pub mod range;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{self, Dataset, MlpObjective, MlpSpec};
use crate::objective::Objective;
use crate::params::ParamVector;
use crate::scape::{self, LandscapeSpec};
use crate::sched::{build_schedule, ScheduleKind, ScheduleSpec};
use crate::seed::derive_seed;
use crate::sharp::{self, FisherConfig, MlpModel, SharpnessConfig};

pub use cli::cli_main;
pub use config::{parse_config, ConfigError, DataSpec, ExperimentConfig, Subject, Sweep, SweepAxis};
pub use output::{summarize, write_records, SummaryRow};
pub use range::{lr_range_test, RangePoint, RangeTestResult};

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One row of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub sweep_value: Option<f64>,
    pub trial_id: usize,
    pub final_train_loss: f64,
    /// Test accuracy for the mlp subject, landed basin curvature for the
    /// landscape subject.
    pub metric: f64,
    pub keskar_sharpness: Option<f64>,
    pub fisher_score: Option<f64>,
    pub diverged: bool,
    pub wall_time_seconds: f64,
}

/// Final parameters of one trial, with the training rows they were fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub sweep_value: Option<f64>,
    pub trial_id: usize,
    pub params: ParamVector,
    #[serde(default)]
    pub train_indices: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<TrialRecord>,
    pub summary: Vec<SummaryRow>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Seed of trial `trial` under sweep value `value`. It depends on the value
/// itself rather than its position, so adding or removing other sweep values
/// leaves a record unchanged.
pub fn trial_seed(base_seed: u64, value: Option<f64>, trial: usize) -> u64 {
    let tag = value.map_or(u64::MAX, f64::to_bits);
    derive_seed(base_seed, &[tag, trial as u64])
}

/// A subject with its data loaded or its landscape placed.
pub enum Prepared {
    Mlp {
        net: config::NetSpec,
        data: Dataset,
        epochs: usize,
        batch_size: usize,
    },
    Landscape(LandscapeSpec),
}

pub fn prepare_subject(subject: &Subject) -> Result<Prepared, LabError> {
    match subject {
        Subject::Mlp {
            net,
            data,
            epochs,
            batch_size,
        } => {
            let data = match data {
                DataSpec::Blobs {
                    n_per_class,
                    n_classes,
                    dim,
                    separation,
                    seed,
                } => net::make_blobs(*n_per_class, *n_classes, *dim, *separation, *seed),
                DataSpec::Spirals { n_per_arm, noise, seed } => net::make_spirals(*n_per_arm, *noise, *seed),
                DataSpec::Idx {
                    images,
                    labels,
                    n_classes,
                } => {
                    let im = net::load_idx(Path::new(images)).map_err(|e| LabError::Runtime(e.to_string()))?;
                    let lb = net::load_idx(Path::new(labels)).map_err(|e| LabError::Runtime(e.to_string()))?;
                    net::dataset_from_idx(&im, &lb, *n_classes).map_err(|e| LabError::Runtime(e.to_string()))?
                }
            };
            if data.dim != net.layer_widths[0] {
                return Err(LabError::Runtime(format!(
                    "dataset dimension {} does not match the input width {}",
                    data.dim, net.layer_widths[0]
                )));
            }
            Ok(Prepared::Mlp {
                net: net.clone(),
                data,
                epochs: *epochs,
                batch_size: *batch_size,
            })
        }
        Subject::Landscape {
            n_wide,
            c_wide,
            n_narrow,
            c_narrow,
            dim,
            domain_box,
            layout_seed,
            noise_sigma,
        } => {
            let spec = scape::build_landscape(*n_wide, *c_wide, *n_narrow, *c_narrow, *dim, *domain_box, *layout_seed)
                .map_err(|e| LabError::Runtime(e.to_string()))?;
            Ok(Prepared::Landscape(spec.with_noise(*noise_sigma)))
        }
    }
}

/// The schedule of one sweep value, in the subject's native units.
pub fn schedule_for(config: &ExperimentConfig, value: Option<f64>) -> ScheduleSpec {
    let mut s = config.schedule.clone();
    if let Some(v) = value {
        match config.sweep.axis {
            SweepAxis::ExploreSteps => s.knee_explore_steps = v as u64,
            SweepAxis::SeedLr => {
                let ratio = v / s.seed_lr;
                s.seed_lr = v;
                if s.kind == ScheduleKind::OneCycle {
                    s.one_cycle_max_lr = Some(v);
                }
                for b in &mut s.step_boundaries {
                    b.lr *= ratio;
                }
            }
            SweepAxis::None => {}
        }
    }
    s
}

fn mlp_spec(net: &config::NetSpec, init_seed: u64) -> MlpSpec {
    MlpSpec {
        layer_widths: net.layer_widths.clone(),
        activation: net.activation,
        init_seed,
        init_scale: net.init_scale,
    }
}

struct TrialOutput {
    record: TrialRecord,
    checkpoint: Option<Checkpoint>,
}

fn keskar_for(cfg: Option<&SharpnessConfig>, seed: u64) -> Option<SharpnessConfig> {
    cfg.map(|k| SharpnessConfig {
        seed: derive_seed(seed, &[3, k.seed]),
        ..k.clone()
    })
}

fn fisher_for(cfg: Option<&FisherConfig>, seed: u64) -> Option<FisherConfig> {
    cfg.map(|f| FisherConfig {
        seed: derive_seed(seed, &[4, f.seed]),
        ..f.clone()
    })
}

fn diverged_record(value: Option<f64>, trial: usize, loss: f64) -> TrialRecord {
    TrialRecord {
        sweep_value: value,
        trial_id: trial,
        final_train_loss: loss,
        metric: f64::NAN,
        keskar_sharpness: None,
        fisher_score: None,
        diverged: true,
        wall_time_seconds: 0.0,
    }
}

fn run_trial(config: &ExperimentConfig, subject: &Prepared, value: Option<f64>, trial: usize) -> TrialOutput {
    let start = Instant::now();
    let seed = trial_seed(config.base_seed, value, trial);
    let spec = schedule_for(config, value);
    let settings = config.sharpness.as_ref();
    let keskar_cfg = keskar_for(settings.and_then(|s| s.keskar.as_ref()), seed);
    let fisher_cfg = fisher_for(settings.and_then(|s| s.fisher.as_ref()), seed);

    let mut out = match subject {
        Prepared::Mlp {
            net: netspec,
            data,
            epochs,
            batch_size,
        } => {
            let spec_net = mlp_spec(netspec, derive_seed(seed, &[1]));
            let shuffle_seed = derive_seed(seed, &[2]);
            let n_train = data.len() - data.len() / 5;
            let per_epoch = net::steps_per_epoch(n_train, *batch_size);
            let hyper = config.optimizer.clone().expect("validated mlp config has an optimizer");
            let run = build_schedule(spec.scaled(per_epoch))
                .map_err(net::NetError::from)
                .and_then(|s| net::run_training(&spec_net, data, &s, &hyper, *epochs, *batch_size, shuffle_seed));
            match run {
                Err(_) => TrialOutput {
                    record: diverged_record(value, trial, f64::NAN),
                    checkpoint: None,
                },
                Ok(run) if run.diverged => TrialOutput {
                    record: diverged_record(value, trial, run.final_train_loss),
                    checkpoint: None,
                },
                Ok(run) => {
                    let objective = MlpObjective::new(&spec_net, data, &run.train_indices);
                    let keskar = keskar_cfg
                        .and_then(|k| sharp::keskar_sharpness(&objective, &run.params.values, &k).ok())
                        .map(|r| r.keskar_score);
                    let fisher = fisher_cfg.and_then(|f| {
                        let model = MlpModel {
                            params: &run.params,
                            spec: &spec_net,
                            data,
                            indices: &run.train_indices,
                        };
                        sharp::fisher_score(&model, &f).ok().map(|e| e.value)
                    });
                    TrialOutput {
                        record: TrialRecord {
                            sweep_value: value,
                            trial_id: trial,
                            final_train_loss: run.final_train_loss,
                            metric: run.test_accuracy,
                            keskar_sharpness: keskar,
                            fisher_score: fisher,
                            diverged: false,
                            wall_time_seconds: 0.0,
                        },
                        checkpoint: config.save_checkpoints.then(|| Checkpoint {
                            sweep_value: value,
                            trial_id: trial,
                            params: run.params.clone(),
                            train_indices: Some(run.train_indices.clone()),
                        }),
                    }
                }
            }
        }
        Prepared::Landscape(land) => {
            let (x0, noise_seed) = scape::walk_start(land, seed, 0);
            let walk = build_schedule(spec)
                .map_err(scape::ScapeError::from)
                .and_then(|s| scape::sgd_walk(land, &x0, &s, s.total_steps(), noise_seed, 0));
            match walk {
                Ok(w) if !w.diverged => {
                    let basin = w.landed_basin_index.expect("landed walks have a basin");
                    let keskar = keskar_cfg
                        .and_then(|k| sharp::keskar_sharpness(land, &w.final_point, &k).ok())
                        .map(|r| r.keskar_score);
                    TrialOutput {
                        record: TrialRecord {
                            sweep_value: value,
                            trial_id: trial,
                            final_train_loss: land.value(&w.final_point),
                            metric: land.basins[basin].curvature,
                            keskar_sharpness: keskar,
                            fisher_score: None,
                            diverged: false,
                            wall_time_seconds: 0.0,
                        },
                        checkpoint: config.save_checkpoints.then(|| Checkpoint {
                            sweep_value: value,
                            trial_id: trial,
                            params: ParamVector::flat(w.final_point.clone()),
                            train_indices: None,
                        }),
                    }
                }
                Ok(w) => TrialOutput {
                    record: diverged_record(value, trial, land.value(&w.final_point)),
                    checkpoint: None,
                },
                Err(_) => TrialOutput {
                    record: diverged_record(value, trial, f64::NAN),
                    checkpoint: None,
                },
            }
        }
    };
    out.record.wall_time_seconds = start.elapsed().as_secs_f64();
    out
}

/// The sweep values in order, or a single `None` when there is no sweep.
pub fn sweep_values(config: &ExperimentConfig) -> Vec<Option<f64>> {
    match config.sweep.axis {
        SweepAxis::None => vec![None],
        _ => config.sweep.values.iter().copied().map(Some).collect(),
    }
}

pub(crate) fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, LabError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| LabError::Runtime(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs every (sweep value, trial) pair. Records come back in sweep-value
/// then trial order whatever the completion order.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome, LabError> {
    config.validate()?;
    let subject = prepare_subject(&config.subject)?;
    let work: Vec<(Option<f64>, usize)> = sweep_values(config)
        .into_iter()
        .flat_map(|v| (0..config.trials).map(move |t| (v, t)))
        .collect();
    let outputs: Vec<TrialOutput> = with_jobs(config.jobs, || {
        work.par_iter()
            .map(|&(v, t)| run_trial(config, &subject, v, t))
            .collect()
    })?;
    let mut records = Vec::with_capacity(outputs.len());
    let mut checkpoints = Vec::new();
    for o in outputs {
        records.push(o.record);
        checkpoints.extend(o.checkpoint);
    }
    let summary = summarize(&records);
    Ok(SweepOutcome {
        records,
        summary,
        checkpoints,
    })
}
