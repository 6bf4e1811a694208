//! Acceptance suite: one PASS/FAIL line per criterion. Runtime limits are
//! part of each check. Runs without the libtest harness so every line is
//! printed even when an earlier criterion fails.

#![allow(clippy::single_range_in_vec_init)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use kneelab::lab::{self, parse_config};
use kneelab::net::{self, Activation, Dataset, MlpSpec};
use kneelab::objective::Quadratic;
use kneelab::optim::*;
use kneelab::params::ParamVector;
use kneelab::scape::{self, KneeFamily};
use kneelab::sched::*;
use kneelab::seed::rng_from;
use kneelab::sharp::{self, FisherConfig, LogisticModel, SharpnessConfig};
use kneelab::FnObjective;

type Outcome = Result<String, String>;

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(name: &str) -> lab::ExperimentConfig {
    let path = repo_root().join("configs").join(name);
    parse_config(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

// 1 ------------------------------------------------------------------------

/// Absolute gap below which central differences at h = 1e-5 cannot resolve a
/// coordinate: round-off eps |L| / h plus truncation h^2 |L'''| / 6, both
/// near 1e-11 for losses of order one.
const FD_NOISE_FLOOR: f64 = 1e-10;

fn gradient_oracle() -> Outcome {
    let mut rng = rng_from(1);
    let mut worst: f64 = 0.0;
    let mut floored = 0;
    let mut max_params = 0;
    for k in 0..20 {
        let n_in = rng.gen_range(1..=4);
        let n_out = rng.gen_range(2..=4);
        let mut widths = vec![n_in];
        for _ in 0..rng.gen_range(1..=2) {
            widths.push(rng.gen_range(2..=8));
        }
        widths.push(n_out);
        let act = if k % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let spec = MlpSpec::new(widths, act, 1000 + k);
        ensure(spec.n_params() <= 200, || {
            format!("instance {k} has {} params", spec.n_params())
        })?;
        max_params = max_params.max(spec.n_params());
        let n = rng.gen_range(3..=8);
        let inputs: Vec<f64> = (0..n * n_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_out)).collect();
        let data = Dataset::new(n_in, inputs, labels, n_out).map_err(|e| e.to_string())?;
        // random biases too: zero-initialized biases can put a relu exactly
        // on its kink, where no derivative exists
        let mut params = net::init_params(&spec).map_err(|e| e.to_string())?;
        params.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let batch = data.all_indices();
        let bp = net::grad(&params, &spec, &data, &batch).map_err(|e| e.to_string())?;
        let fd = net::finite_diff_grad(&params, &spec, &data, &batch, 1e-5).map_err(|e| e.to_string())?;
        for (i, (a, b)) in bp.values.iter().zip(&fd.values).enumerate() {
            let gap = (a - b).abs();
            let e = gap / (a.abs() + b.abs() + 1e-8);
            if e < 1e-6 {
                worst = worst.max(e);
            } else if gap <= FD_NOISE_FLOOR {
                floored += 1;
            } else {
                return Err(format!(
                    "instance {k}, coordinate {i}: backprop {a:e}, fd {b:e}, relative {e:e}"
                ));
            }
        }
    }
    Ok(format!(
        "20 instances up to {max_params} params, worst coordinate error {worst:.2e}, \
         {floored} coordinates below the fd noise floor"
    ))
}

// 2 ------------------------------------------------------------------------

fn optimizer_hand_vectors() -> Outcome {
    let tol = 1e-12;
    // SGD momentum, two steps
    let h = OptimizerHyper::sgd(0.9, 0.0);
    let mut s = optimizer_init(&h, 1);
    let mut th = vec![1.0];
    sgd_momentum_step(&mut th, &[1.0], &mut s, &h, 0.1).map_err(|e| e.to_string())?;
    ensure(close(s.first_moment[0], 1.0, tol) && close(th[0], 0.9, tol), || {
        format!("sgd step 1: {th:?}")
    })?;
    sgd_momentum_step(&mut th, &[1.0], &mut s, &h, 0.1).map_err(|e| e.to_string())?;
    ensure(close(s.first_moment[0], 1.9, tol) && close(th[0], 0.71, tol), || {
        format!("sgd step 2: {th:?}")
    })?;

    // Adam, two steps
    let h = OptimizerHyper::new(Algorithm::Adam);
    let s0 = optimizer_init(&h, 3);
    ensure(
        s0.first_moment == vec![0.0; 3] && s0.second_moment == vec![0.0; 3] && s0.step_count == 0,
        || "adam init".into(),
    )?;
    let mut s = optimizer_init(&h, 1);
    let mut th = vec![0.0];
    adam_step(&mut th, &[1.0], &mut s, &h, 0.001).map_err(|e| e.to_string())?;
    let d1 = th[0];
    ensure(close(d1, -0.001 / (1.0 + 1e-8), tol), || format!("adam step 1: {d1}"))?;
    adam_step(&mut th, &[1.0], &mut s, &h, 0.001).map_err(|e| e.to_string())?;
    ensure(close(th[0] - d1, -0.001 / (1.0 + 1e-8), tol), || {
        format!("adam step 2: {}", th[0] - d1)
    })?;

    // RAdam branches
    let h = OptimizerHyper::new(Algorithm::Radam);
    let s = optimizer_init(&h, 1);
    ensure(close(s.rho_inf.unwrap(), 1999.0, 1e-9), || "rho_inf".into())?;
    let rho1 = radam_rho(0.999, 1);
    ensure(close(rho1, 1.0, 1e-9) && rho1 <= 4.0, || format!("rho_1 = {rho1}"))?;
    let rho5 = radam_rho(0.999, 5);
    ensure(rho5 > 4.0 && close(rho5, 4.99, 0.01), || format!("rho_5 = {rho5}"))?;
    let mut s = optimizer_init(&h, 1);
    let mut th = vec![0.0];
    radam_step(&mut th, &[1.0], &mut s, &h, 0.001).map_err(|e| e.to_string())?;
    // un-adapted branch: theta -= lr * m_hat with m_hat = 1
    ensure(close(th[0], -0.001, tol), || {
        format!("radam t=1 took the adapted branch: {}", th[0])
    })?;

    // LAMB trust ratio cases
    let h = OptimizerHyper::new(Algorithm::Lamb);
    let mut s = optimizer_init(&h, 1);
    let mut th = vec![1.0];
    lamb_step(&mut th, &[0..1], &[1.0], &mut s, &h, 0.01).map_err(|e| e.to_string())?;
    ensure(close(th[0], 0.99, tol), || format!("lamb unit ratio: {}", th[0]))?;
    let mut s = optimizer_init(&h, 2);
    let mut th = vec![0.6, 0.8];
    lamb_step(&mut th, &[0..2], &[0.0, 0.0], &mut s, &h, 0.01).map_err(|e| e.to_string())?;
    ensure(th == vec![0.6, 0.8], || "lamb zero update moved theta".into())?;
    ensure(lamb_trust_ratio(1.0, 0.05, 10.0) == 10.0, || "lamb clamp".into())?;
    Ok("sgd, adam, radam (rho_1 = 1, un-adapted), lamb (1, zero, clamp 10)".into())
}

// 3 ------------------------------------------------------------------------

fn random_pd(rng: &mut kneelab::seed::Rng, d: usize) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| a[k][i] * a[k][j]).sum::<f64>() + if i == j { 0.1 } else { 0.0 })
                .collect()
        })
        .collect()
}

fn sharpness_oracle() -> Outcome {
    let cfg = SharpnessConfig::default();
    let mut rng = rng_from(3);
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let d = 1 + k % 3;
        let q = Quadratic {
            hessian: random_pd(&mut rng, d),
            center: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            offset: 0.0,
        };
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = sharp::keskar_sharpness(&q, &x, &cfg)
            .map_err(|e| e.to_string())?
            .keskar_score;
        let slow = sharp::brute_force_sharpness(&q, &x, &cfg, 201)
            .map_err(|e| e.to_string())?
            .keskar_score;
        let rel = (fast - slow).abs() / slow.abs();
        ensure(rel <= 0.05, || {
            format!("quadratic {k} (dim {d}): ascent {fast:e} vs grid {slow:e}")
        })?;
        worst = worst.max(rel);
    }
    let diag = Quadratic::diagonal(&[1.0, 100.0]);
    let s = sharp::keskar_sharpness(&diag, &[0.0, 0.0], &cfg)
        .map_err(|e| e.to_string())?
        .keskar_score;
    ensure((s - 5.05e-5).abs() <= 0.05 * 5.05e-5, || format!("diag(1,100): {s:e}"))?;
    Ok(format!(
        "10 quadratics, worst relative gap {worst:.2e}; diag(1,100) = {s:.4e}"
    ))
}

// 4, 5 ---------------------------------------------------------------------

fn landscape_setup() -> (scape::LandscapeSpec, KneeFamily, Vec<u64>, usize, u64) {
    let cfg = load("landscape.json");
    let lab::Prepared::Landscape(spec) = lab::prepare_subject(&cfg.subject).unwrap() else {
        panic!("landscape.json must use the landscape subject")
    };
    let family = KneeFamily {
        seed_lr: cfg.schedule.seed_lr,
        decay_steps: cfg.schedule.total_steps - cfg.schedule.knee_explore_steps,
    };
    let explores = cfg.sweep.values.iter().map(|v| *v as u64).collect();
    (spec, family, explores, cfg.trials, cfg.base_seed)
}

fn density_hypothesis() -> Outcome {
    let (spec, family, explores, trials, seed) = landscape_setup();
    ensure(explores == vec![0, 500, 2000, 8000] && trials == 200, || {
        "landscape.json budgets changed".into()
    })?;
    ensure(
        spec.basins.len() == 100 && spec.n_wide() == 1 && spec.dim == 2 && spec.domain_box == 10.0,
        || "landscape.json layout changed".into(),
    )?;
    let rows = scape::landing_distribution(&spec, &family, &explores, trials, seed).map_err(|e| e.to_string())?;
    let w: Vec<f64> = rows.iter().map(|r| r.wide_fraction).collect();
    for i in 1..w.len() {
        ensure(w[i] >= w[i - 1] - 0.02, || {
            format!("wide fractions {w:?} drop at {}", explores[i])
        })?;
    }
    ensure(w[3] >= 2.0 * w[0], || {
        format!("wide fractions {w:?}: E=8000 below twice E=0")
    })?;
    Ok(format!(
        "sigma {}, wide fraction over E={explores:?}: {w:?}",
        spec.noise_sigma
    ))
}

fn low_lr_control() -> Outcome {
    let (spec, family, _, trials, seed) = landscape_setup();
    let knee = family.schedule(8000).map_err(|e| e.to_string())?;
    let (knee_wide, _) = scape::landing_fractions(&spec, &knee, trials, seed).map_err(|e| e.to_string())?;
    let low_lr = family.seed_lr / 4.0;
    let long = build_schedule(ScheduleSpec::constant(low_lr, 5 * knee.total_steps())).map_err(|e| e.to_string())?;
    let (low_wide, _) = scape::landing_fractions(&spec, &long, trials, seed).map_err(|e| e.to_string())?;
    ensure(low_wide < knee_wide - 0.05, || {
        format!("low lr {low_wide} vs knee {knee_wide}")
    })?;
    Ok(format!(
        "knee ({} steps) {knee_wide}, constant lr {low_lr} for {} steps {low_wide}",
        knee.total_steps(),
        long.total_steps()
    ))
}

// 6 ------------------------------------------------------------------------

fn explore_trend() -> Outcome {
    let cfg = load("explore_trend.json");
    ensure(
        cfg.trials == 20 && cfg.sweep.values == vec![0.0, 25.0, 50.0, 100.0],
        || "explore_trend.json changed".into(),
    )?;
    let outcome = lab::run_sweep(&cfg).map_err(|e| e.to_string())?;
    let acc: Vec<f64> = outcome
        .summary
        .iter()
        .map(|s| s.metric.map_or(f64::NAN, |m| m.mean))
        .collect();
    let sharp: Vec<f64> = outcome
        .summary
        .iter()
        .map(|s| s.keskar_sharpness.map_or(f64::NAN, |m| m.mean))
        .collect();
    for i in 1..acc.len() {
        ensure(acc[i] >= acc[i - 1] * 0.9, || {
            format!("accuracy {acc:?} drops more than 10%")
        })?;
        ensure(sharp[i] <= sharp[i - 1] * 1.1, || {
            format!("sharpness {sharp:?} rises more than 10%")
        })?;
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    let sfmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ");
    Ok(format!(
        "explore epochs 0/25/50/100: accuracy [{}], sharpness [{}]",
        fmt(&acc),
        sfmt(&sharp)
    ))
}

// 7 ------------------------------------------------------------------------

fn fisher_analytic() -> Outcome {
    let model = LogisticModel {
        weights: vec![0.0],
        inputs: vec![vec![1.0]; 1000],
    };
    let cfg = FisherConfig {
        samples_per_datum: 10,
        ..FisherConfig::default()
    };
    let score = sharp::fisher_score(&model, &cfg).map_err(|e| e.to_string())?.value;
    ensure((score - 0.25).abs() <= 0.02, || format!("score {score}"))?;
    Ok(format!("score {score}"))
}

// 8 ------------------------------------------------------------------------

fn range_calibration() -> Outcome {
    let f = FnObjective::new(1, |x: &[f64], g: &mut [f64]| {
        g[0] = x[0];
        0.5 * x[0] * x[0]
    });
    let r = lab::lr_range_test(
        &f,
        &ParamVector::flat(vec![1.0]),
        &OptimizerHyper::sgd(0.0, 0.0),
        1e-3,
        1.01,
        10_000,
    )
    .map_err(|e| e.to_string())?;
    let at = r.exploded_at.ok_or("no explosion detected")?;
    ensure((1.8..=2.2).contains(&at), || format!("explosion flagged at lr {at}"))?;
    Ok(format!(
        "explosion flagged at lr {at:.4}, suggestion {:.4}",
        r.suggested_max_lr
    ))
}

// 9 ------------------------------------------------------------------------

fn lr(spec: ScheduleSpec, t: u64) -> Result<f64, String> {
    build_schedule(spec).and_then(|s| s.lr_at(t)).map_err(|e| e.to_string())
}

fn schedule_exactness() -> Outcome {
    let checks: Vec<(&str, f64, f64)> = vec![
        ("knee lr(50)", lr(ScheduleSpec::knee(0.1, 200, 100), 50)?, 0.1),
        ("knee lr(150)", lr(ScheduleSpec::knee(0.1, 200, 100), 150)?, 0.05),
        ("knee lr(200)", lr(ScheduleSpec::knee(0.1, 200, 100), 200)?, 0.0),
        (
            "step lr(120)",
            lr(ScheduleSpec::step(&[(0, 0.1), (100, 0.01), (150, 0.001)], 200), 120)?,
            0.01,
        ),
        ("cosine lr(100)", lr(ScheduleSpec::cosine(0.1, 200), 100)?, 0.05),
        (
            "knee 3e-4 epoch 20",
            lr(ScheduleSpec::knee(3e-4, 50, 40).scaled(100), 20 * 100)?,
            3e-4,
        ),
        (
            "warmup lr(0)",
            lr(ScheduleSpec::knee(0.1, 200, 100).with_warmup(10), 0)?,
            0.0,
        ),
        (
            "inv_sqrt lr(24000)",
            lr(ScheduleSpec::inv_sqrt(0.5, 6000, 30000), 24000)?,
            0.25,
        ),
    ];
    for (name, got, want) in &checks {
        ensure(got.to_bits() == want.to_bits(), || {
            format!("{name}: {got:e} != {want:e}")
        })?;
    }
    let c = schedule_table(&build_schedule(ScheduleSpec::constant(0.1, 10)).unwrap(), 5).unwrap();
    ensure(c == vec![(0, 0.1), (5, 0.1), (10, 0.1)], || {
        format!("constant table {c:?}")
    })?;
    let k = schedule_table(&build_schedule(ScheduleSpec::knee(0.1, 4, 2)).unwrap(), 1).unwrap();
    ensure(k == vec![(0, 0.1), (1, 0.1), (2, 0.1), (3, 0.05), (4, 0.0)], || {
        format!("knee table {k:?}")
    })?;
    let knee = build_schedule(ScheduleSpec::knee(0.1, 10_000, 0)).unwrap();
    let linear = build_schedule(ScheduleSpec::linear(0.1, 10_000)).unwrap();
    for t in 0..=10_000 {
        let (a, b) = (knee.lr_at(t).unwrap(), linear.lr_at(t).unwrap());
        ensure(a.to_bits() == b.to_bits(), || {
            format!("knee E=0 differs from linear at {t}: {a:e} vs {b:e}")
        })?;
    }
    Ok(format!(
        "{} point values, 2 tables, knee E=0 == linear on 10001 steps",
        checks.len()
    ))
}

// 10 -----------------------------------------------------------------------

fn strip_wall_time(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = repo_root().join("configs/reference.json");
    let mut runs = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_kneelab"))
            .arg("sweep")
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .args(["--jobs", jobs])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            format!("sweep exited with {:?}", status.status.code())
        })?;
        runs.push(out);
    }
    let mut names: Vec<String> = std::fs::read_dir(&runs[0])
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    ensure(names.iter().any(|n| n.starts_with("histogram_")), || {
        "no histogram files".into()
    })?;
    for n in &names {
        let a = std::fs::read_to_string(runs[0].join(n)).map_err(|e| e.to_string())?;
        let b = std::fs::read_to_string(runs[1].join(n)).map_err(|e| e.to_string())?;
        let same = if n == "trials.csv" {
            strip_wall_time(&a) == strip_wall_time(&b)
        } else {
            a == b
        };
        ensure(same, || format!("{n} differs between runs"))?;
    }
    Ok(format!(
        "{} files identical across two runs (1 and 2 worker threads)",
        names.len()
    ))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("gradient oracle", gradient_oracle, Duration::from_secs(10)),
        ("optimizer hand vectors", optimizer_hand_vectors, Duration::from_secs(1)),
        (
            "sharpness oracle equivalence",
            sharpness_oracle,
            Duration::from_secs(60),
        ),
        (
            "density hypothesis simulation",
            density_hypothesis,
            Duration::from_secs(120),
        ),
        ("low-LR control", low_lr_control, Duration::from_secs(120)),
        ("explore trend on an MLP", explore_trend, Duration::from_secs(300)),
        ("Fisher analytic case", fisher_analytic, Duration::from_secs(10)),
        ("range-test calibration", range_calibration, Duration::from_secs(1)),
        ("schedule exactness", schedule_exactness, Duration::from_secs(1)),
        ("determinism", determinism, Duration::from_secs(60)),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}"))
            }
        });
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} ({elapsed:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} ({elapsed:.2?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
