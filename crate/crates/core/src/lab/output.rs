//! CSV and JSON artifacts of a sweep.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Checkpoint, ExperimentConfig, LabError, TrialRecord};

pub const HISTOGRAM_BINS: usize = 20;

pub const TRIALS_HEADER: &str =
    "sweep_value,trial_id,final_train_loss,metric,keskar_sharpness,fisher_score,diverged,wall_time_s";

pub const SUMMARY_HEADER: &str = "sweep_value,trials,diverged,final_train_loss_mean,final_train_loss_std,\
metric_mean,metric_std,keskar_sharpness_mean,keskar_sharpness_std,fisher_score_mean,fisher_score_std";

/// Mean and sample standard deviation of one column over the non-diverged
/// trials of a sweep value. `None` when no trial has a value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep_value: Option<f64>,
    pub trials: usize,
    pub diverged: usize,
    pub final_train_loss: Option<MeanStd>,
    pub metric: Option<MeanStd>,
    pub keskar_sharpness: Option<MeanStd>,
    pub fisher_score: Option<MeanStd>,
}

/// Sample (n - 1) standard deviation; 0 for a single value.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(MeanStd { mean, std })
}

fn same_value(a: Option<f64>, b: Option<f64>) -> bool {
    a.map(f64::to_bits) == b.map(f64::to_bits)
}

/// One row per distinct sweep value, in first-appearance order.
pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut values: Vec<Option<f64>> = Vec::new();
    for r in records {
        if !values.iter().any(|v| same_value(*v, r.sweep_value)) {
            values.push(r.sweep_value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let rows: Vec<&TrialRecord> = records.iter().filter(|r| same_value(r.sweep_value, v)).collect();
            let ok: Vec<&TrialRecord> = rows.iter().copied().filter(|r| !r.diverged).collect();
            let col = |f: &dyn Fn(&TrialRecord) -> Option<f64>| {
                let xs: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                mean_std(&xs)
            };
            SummaryRow {
                sweep_value: v,
                trials: rows.len(),
                diverged: rows.len() - ok.len(),
                final_train_loss: col(&|r| Some(r.final_train_loss)),
                metric: col(&|r| Some(r.metric)),
                keskar_sharpness: col(&|r| r.keskar_sharpness),
                fisher_score: col(&|r| r.fisher_score),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ms(v: Option<MeanStd>) -> String {
    match v {
        Some(m) => format!("{},{}", m.mean, m.std),
        None => ",".into(),
    }
}

pub fn write_trials_csv<W: Write>(records: &[TrialRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRIALS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            opt(r.sweep_value),
            r.trial_id,
            r.final_train_loss,
            r.metric,
            opt(r.keskar_sharpness),
            opt(r.fisher_score),
            r.diverged,
            r.wall_time_seconds
        )?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(summary: &[SummaryRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for s in summary {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            opt(s.sweep_value),
            s.trials,
            s.diverged,
            ms(s.final_train_loss),
            ms(s.metric),
            ms(s.keskar_sharpness),
            ms(s.fisher_score)
        )?;
    }
    Ok(())
}

/// 20 equal-width bins over `[lo, hi]`; the top edge falls in the last bin.
/// A zero-width range puts everything in bin 0.
pub fn bin_counts(values: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; HISTOGRAM_BINS];
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for &v in values {
        let k = if width > 0.0 {
            (((v - lo) / width).floor() as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    counts
}

fn finite_range(xs: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    xs.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// File-name label of a sweep value.
pub fn value_label(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

type Quantity = (&'static str, fn(&TrialRecord) -> Option<f64>);

const QUANTITIES: [Quantity; 2] = [
    ("keskar_sharpness", |r| r.keskar_sharpness),
    ("metric", |r| Some(r.metric)),
];

/// Writes one histogram per sweep value. Bin edges are shared across values
/// so the files are directly comparable.
fn write_histograms(records: &[TrialRecord], summary: &[SummaryRow], dir: &Path) -> Result<Vec<PathBuf>, LabError> {
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| !r.diverged).collect();
    let ranges: Vec<Option<(f64, f64)>> = QUANTITIES
        .iter()
        .map(|(_, get)| finite_range(ok.iter().filter_map(|r| get(r))))
        .collect();
    let mut paths = Vec::new();
    for s in summary {
        let path = dir.join(format!("histogram_{}.csv", value_label(s.sweep_value)));
        let mut text = String::from("quantity,bin,lower,upper,count\n");
        for ((name, get), range) in QUANTITIES.iter().zip(&ranges) {
            let Some((lo, hi)) = *range else { continue };
            let xs: Vec<f64> = ok
                .iter()
                .filter(|r| same_value(r.sweep_value, s.sweep_value))
                .filter_map(|r| get(r))
                .filter(|v| v.is_finite())
                .collect();
            let width = (hi - lo) / HISTOGRAM_BINS as f64;
            for (k, c) in bin_counts(&xs, lo, hi).iter().enumerate() {
                let lower = lo + width * k as f64;
                let upper = if k + 1 == HISTOGRAM_BINS {
                    hi
                } else {
                    lo + width * (k + 1) as f64
                };
                text.push_str(&format!("{name},{k},{lower},{upper},{c}\n"));
            }
        }
        fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<PathBuf, LabError> {
    fs::write(&path, bytes).map_err(|e| LabError::io(&path, e))?;
    Ok(path)
}

/// Writes `trials.csv`, `summary.csv`, `config.json` and one histogram per
/// sweep value into `dir`, creating it if needed.
pub fn write_records(
    records: &[TrialRecord],
    summary: &[SummaryRow],
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>, LabError> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut buf = Vec::new();
    write_trials_csv(records, &mut buf).expect("writing to a Vec");
    let mut paths = vec![write_file(dir.join("trials.csv"), &buf)?];
    buf.clear();
    write_summary_csv(summary, &mut buf).expect("writing to a Vec");
    paths.push(write_file(dir.join("summary.csv"), &buf)?);
    paths.push(write_file(dir.join("config.json"), config.canonical_json().as_bytes())?);
    paths.extend(write_histograms(records, summary, dir)?);
    Ok(paths)
}

pub fn write_checkpoints(checkpoints: &[Checkpoint], dir: &Path) -> Result<Vec<PathBuf>, LabError> {
    let sub = dir.join("checkpoints");
    fs::create_dir_all(&sub).map_err(|e| LabError::io(&sub, e))?;
    checkpoints
        .iter()
        .map(|c| {
            let path = sub.join(format!("{}_{}.json", value_label(c.sweep_value), c.trial_id));
            let text = serde_json::to_string_pretty(c).expect("checkpoint serializes") + "\n";
            write_file(path, text.as_bytes())
        })
        .collect()
}
