//! `kneelab` command line. Exit codes: 0 success, 1 usage or validation
//! error, 2 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use super::output::{write_checkpoints, write_records};
use super::range::{run_range_test, write_range_csv};
use super::{
    parse_config, prepare_subject, run_sweep, Checkpoint, ConfigError, ExperimentConfig, LabError, Prepared, SweepAxis,
};
use crate::net::{MlpObjective, MlpSpec};
use crate::objective::Objective;
use crate::params::ParamVector;
use crate::scape::{self, KneeFamily};
use crate::sched::{build_schedule, schedule_table, write_table_csv, ScheduleKind};
use crate::sharp::{self, Direction, FisherConfig, MlpModel, SharpError, SharpnessConfig};

#[derive(Debug, Parser)]
#[command(
    name = "kneelab",
    version,
    about = "Explore-exploit learning-rate schedule experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON)
    config: PathBuf,
    /// Override `base_seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Override `output_dir`
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override `trials`
    #[arg(long)]
    trials: Option<usize>,
    /// Override `jobs`
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every sweep value x trial and write CSV artifacts
    Sweep(RunArgs),
    /// Geometric learning-rate ramp until the loss explodes
    RangeTest(RunArgs),
    /// Keskar sharpness, Fisher score and width profile of a checkpoint
    Sharpness {
        /// Checkpoint JSON written by `sweep` or a bare parameter vector
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the configured schedule as `step,lr` CSV
    ScheduleTable {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: u64,
    },
    /// Wide-basin landing fraction per explore budget on a landscape
    LandscapeSim(RunArgs),
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_text(path: &Path) -> Result<String, LabError> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, LabError> {
    let mut cfg = parse_config(&read_text(&args.config)?)?;
    if let Some(s) = args.seed {
        cfg.base_seed = s;
    }
    if let Some(d) = &args.out_dir {
        cfg.output_dir = d.display().to_string();
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), LabError> {
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), LabError> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn run(command: Command) -> Result<(), LabError> {
    match command {
        Command::Sweep(args) => {
            let cfg = load_config(&args)?;
            let outcome = run_sweep(&cfg)?;
            let dir = PathBuf::from(&cfg.output_dir);
            let mut paths = write_records(&outcome.records, &outcome.summary, &cfg, &dir)?;
            if cfg.save_checkpoints {
                paths.extend(write_checkpoints(&outcome.checkpoints, &dir)?);
            }
            for p in paths {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::RangeTest(args) => {
            let cfg = load_config(&args)?;
            let result = run_range_test(&cfg)?;
            let dir = PathBuf::from(&cfg.output_dir);
            create_dir(&dir)?;
            let mut buf = Vec::new();
            write_range_csv(&result, &mut buf).expect("writing to a Vec");
            write_bytes(&dir.join("range_test.csv"), &buf)?;
            let summary = serde_json::json!({
                "exploded_at": result.exploded_at,
                "suggested_max_lr": result.suggested_max_lr,
                "steps": result.points.len(),
            });
            let text = serde_json::to_string_pretty(&summary).expect("json") + "\n";
            write_bytes(&dir.join("range_test.json"), text.as_bytes())?;
            print!("{text}");
            Ok(())
        }
        Command::Sharpness { checkpoint, run } => {
            let cfg = load_config(&run)?;
            let report = sharpness_of_checkpoint(&cfg, &checkpoint)?;
            let dir = PathBuf::from(&cfg.output_dir);
            create_dir(&dir)?;
            let text = serde_json::to_string_pretty(&report).expect("json") + "\n";
            write_bytes(&dir.join("sharpness.json"), text.as_bytes())?;
            if let Some(profile) = &report.width_profile {
                let mut buf = Vec::new();
                sharp::write_width_csv(profile, &mut buf).expect("writing to a Vec");
                write_bytes(&dir.join("width_profile.csv"), &buf)?;
            }
            print!("{text}");
            Ok(())
        }
        Command::ScheduleTable { config, stride } => {
            if stride == 0 {
                return Err(ConfigError::Invalid {
                    field: "--stride".into(),
                    message: "must be at least 1".into(),
                }
                .into());
            }
            let cfg = parse_config(&read_text(&config)?)?;
            let schedule = build_schedule(cfg.schedule.clone()).map_err(|e| ConfigError::Invalid {
                field: "schedule".into(),
                message: e.to_string(),
            })?;
            let table = schedule_table(&schedule, stride).map_err(|e| LabError::Runtime(e.to_string()))?;
            let stdout = std::io::stdout();
            write_table_csv(&table, stdout.lock()).map_err(|e| LabError::io(Path::new("<stdout>"), e))?;
            Ok(())
        }
        Command::LandscapeSim(args) => {
            let cfg = load_config(&args)?;
            let Prepared::Landscape(land) = prepare_subject(&cfg.subject)? else {
                return Err(invalid("subject", "landscape-sim needs the landscape subject"));
            };
            if cfg.schedule.kind != ScheduleKind::Knee {
                return Err(invalid("schedule.kind", "landscape-sim needs a knee schedule"));
            }
            let family = KneeFamily {
                seed_lr: cfg.schedule.seed_lr,
                decay_steps: cfg.schedule.total_steps - cfg.schedule.knee_explore_steps,
            };
            let explores: Vec<u64> = match cfg.sweep.axis {
                SweepAxis::ExploreSteps => cfg.sweep.values.iter().map(|v| *v as u64).collect(),
                SweepAxis::None => vec![cfg.schedule.knee_explore_steps],
                SweepAxis::SeedLr => {
                    return Err(invalid("sweep.axis", "landscape-sim sweeps explore_steps only"));
                }
            };
            let rows = super::with_jobs(cfg.jobs, || {
                scape::landing_distribution(&land, &family, &explores, cfg.trials, cfg.base_seed)
            })?
            .map_err(|e| LabError::Runtime(e.to_string()))?;
            let dir = PathBuf::from(&cfg.output_dir);
            create_dir(&dir)?;
            let mut buf = Vec::new();
            scape::write_landing_csv(&rows, &mut buf).expect("writing to a Vec");
            write_bytes(&dir.join("landing.csv"), &buf)?;
            std::io::stdout()
                .write_all(&buf)
                .map_err(|e| LabError::io(Path::new("<stdout>"), e))?;
            Ok(())
        }
    }
}

fn invalid(field: &str, message: &str) -> LabError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
    .into()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CheckpointFile {
    Full(Checkpoint),
    Bare(ParamVector),
}

fn runtime(e: impl std::fmt::Display) -> LabError {
    LabError::Runtime(e.to_string())
}

/// Sharpness report of a saved point. Mlp checkpoints are scored on their
/// training rows, or on the whole dataset when none are recorded.
pub fn sharpness_of_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<sharp::SharpnessReport, LabError> {
    let file: CheckpointFile = serde_json::from_str(&read_text(path)?).map_err(runtime)?;
    // a sweep checkpoint carries its trial, so the scores reuse the seeds the
    // sweep drew for it
    let (params, indices, seed) = match file {
        CheckpointFile::Full(c) => {
            let seed = super::trial_seed(cfg.base_seed, c.sweep_value, c.trial_id);
            (c.params, c.train_indices, Some(seed))
        }
        CheckpointFile::Bare(p) => (p, None, None),
    };
    let settings = cfg.sharpness.clone().unwrap_or(super::config::SharpnessSettings {
        keskar: None,
        fisher: None,
        width: None,
    });
    let mut keskar_cfg = settings.keskar.clone().unwrap_or_default();
    let mut fisher_cfg = settings.fisher.clone();
    if let Some(seed) = seed {
        keskar_cfg = super::keskar_for(Some(&keskar_cfg), seed).expect("some in, some out");
        fisher_cfg = super::fisher_for(fisher_cfg.as_ref(), seed);
    }
    let (halfwidth, n_points) = settings
        .width
        .as_ref()
        .map_or((0.1, 41), |w| (w.range_halfwidth, w.n_points));
    let subject = prepare_subject(&cfg.subject)?;
    super::with_jobs(cfg.jobs, || match &subject {
        Prepared::Mlp { net: n, data, .. } => {
            let spec = MlpSpec {
                layer_widths: n.layer_widths.clone(),
                activation: n.activation,
                init_seed: 0,
                init_scale: n.init_scale,
            };
            if params.len() != spec.n_params() {
                return Err(runtime(format!(
                    "checkpoint holds {} parameters but the network needs {}",
                    params.len(),
                    spec.n_params()
                )));
            }
            let indices = indices.unwrap_or_else(|| data.all_indices());
            if indices.iter().any(|&i| i >= data.len()) {
                return Err(runtime("checkpoint training rows exceed the dataset"));
            }
            let objective = MlpObjective::new(&spec, data, &indices);
            let model = MlpModel {
                params: &params,
                spec: &spec,
                data,
                indices: &indices,
            };
            report(
                &objective,
                &params.values,
                &keskar_cfg,
                fisher_cfg.as_ref(),
                Some(&model),
                halfwidth,
                n_points,
            )
        }
        Prepared::Landscape(land) => {
            if params.len() != land.dim {
                return Err(runtime(format!(
                    "checkpoint holds {} values but the landscape has dimension {}",
                    params.len(),
                    land.dim
                )));
            }
            report::<_, MlpModel>(land, &params.values, &keskar_cfg, None, None, halfwidth, n_points)
        }
    })?
}

fn report<O: Objective + ?Sized, M: sharp::PredictiveModel>(
    f: &O,
    x: &[f64],
    keskar: &SharpnessConfig,
    fisher: Option<&FisherConfig>,
    model: Option<&M>,
    halfwidth: f64,
    n_points: usize,
) -> Result<sharp::SharpnessReport, LabError> {
    let mut r = sharp::keskar_sharpness(f, x, keskar).map_err(runtime)?;
    if let (Some(fc), Some(m)) = (fisher, model) {
        r.fisher_score = Some(sharp::fisher_score(m, fc).map_err(runtime)?.value);
    }
    r.width_profile = match sharp::width_profile(f, x, &Direction::SteepestDescent, halfwidth, n_points) {
        Ok(p) => Some(p),
        Err(SharpError::ZeroGradient(_)) => {
            eprintln!("warning: zero gradient at the checkpoint; width profile skipped");
            None
        }
        Err(e) => return Err(runtime(e)),
    };
    Ok(r)
}
