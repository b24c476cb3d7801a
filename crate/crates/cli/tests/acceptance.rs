//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach stdout; exits non-zero on any failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use assure_cli::{run, RunSpec, Scenario, ScenarioFile, Status};
use assure_core::agent::Signal;
use assure_core::clock::{
    estimate_drift, estimate_variance, local_elapsed_distribution, next_sync_deadline, residuals, AssuranceSpec,
    ClockSamplePair, SampleWindow, WienerClock, WienerParams,
};
use assure_core::drone::{build_nofly_mask, run_mission, CvAgent, MissionOutcome, WorldConfig};
use assure_core::grid::{
    estimate_kernel, forecast, fuse_gps, fuse_match, normalize, propagate, Cell, DiffusionParams, Displacement,
    GridDistribution,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed at which the shipped drone scenario shows the decision pattern.
const REGRESSION_SEED: u64 = 20;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn clock_worked_example() -> Outcome {
    let params = WienerParams::new(-0.01, 0.02).map_err(|e| e.to_string())?;
    let d = local_elapsed_distribution(600.0, params);
    check(
        (d.mean - 594.0).abs() <= 1e-12 && (d.variance - 12.0).abs() <= 1e-12,
        format!("mean {} variance {}", d.mean, d.variance),
    )
}

fn estimator_recovery() -> Outcome {
    let slope = 0.99;
    let sigma2 = 0.02;
    let m = 1000;
    let params = WienerParams::from_slope(slope, sigma2).map_err(|e| e.to_string())?;
    let mut clock = WienerClock::new(params).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut window = SampleWindow::new(m).map_err(|e| e.to_string())?;
    window.push(clock.now()).map_err(|e| e.to_string())?;
    let local_gap = 10.0 / slope;
    for j in 1..m {
        let local = j as f64 * local_gap;
        let reference = clock.advance_to(local, &mut rng);
        window
            .push(ClockSamplePair { local, reference })
            .map_err(|e| e.to_string())?;
    }
    let m_hat = estimate_drift(&window).map_err(|e| e.to_string())?;
    let eps = residuals(&window, m_hat).map_err(|e| e.to_string())?;
    let s_hat = estimate_variance(&eps, &window.reference_intervals()).map_err(|e| e.to_string())?;
    check(
        (m_hat - slope).abs() <= 0.002 && (s_hat - sigma2).abs() <= 0.2 * sigma2,
        format!("slope {m_hat:.6} (true {slope}), sigma2 {s_hat:.5} (true {sigma2})"),
    )
}

fn deadline_soundness() -> Outcome {
    let sigma2 = 0.02;
    let spec = AssuranceSpec {
        limit: 1.0,
        p_max: 0.05,
        sync_cost: 1,
        budget: 0,
    };
    let params = WienerParams::new(0.0, sigma2).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let intervals = 10_000;
    let mut exceed = 0;
    for _ in 0..intervals {
        let mut clock = WienerClock::new(params).map_err(|e| e.to_string())?;
        let t_last = rng.random_range(0.0..100.0);
        clock.advance_to(t_last, &mut rng);
        let start = clock.now();
        let deadline = next_sync_deadline(&spec, sigma2, t_last)
            .map_err(|e| e.to_string())?
            .time()
            .ok_or("unbounded deadline")?;
        const SUBSTEPS: usize = 8;
        for k in 1..=SUBSTEPS {
            clock.advance_to(t_last + (deadline - t_last) * k as f64 / SUBSTEPS as f64, &mut rng);
        }
        let end = clock.now();
        let deviation = (end.reference - start.reference) - (end.local - start.local);
        if deviation.abs() > spec.limit {
            exceed += 1;
        }
    }
    let fraction = exceed as f64 / intervals as f64;
    check(
        fraction <= 0.10,
        format!("{exceed}/{intervals} intervals exceeded the limit ({fraction:.4})"),
    )
}

/// Column-stochastic transition matrix for one bilinear shift followed by
/// leak to the in-bounds 8-neighbors, built cell by cell.
fn transition_matrix(w: usize, h: usize, step: Displacement, leak: f64) -> Vec<Vec<f64>> {
    let n = w * h;
    let idx = |x: usize, y: usize| y * w + x;
    let mut shift = vec![vec![0.0; n]; n];
    for sy in 0..h {
        for sx in 0..w {
            let tx = (sx as f64 + step.dx).clamp(0.0, (w - 1) as f64);
            let ty = (sy as f64 + step.dy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (tx.floor() as usize, ty.floor() as usize);
            let (fx, fy) = (tx - x0 as f64, ty - y0 as f64);
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    let weight = wx * wy;
                    if weight > 0.0 {
                        shift[idx(x0 + dx, y0 + dy)][idx(sx, sy)] += weight;
                    }
                }
            }
        }
    }
    let mut spread = vec![vec![0.0; n]; n];
    for sy in 0..h as i64 {
        for sx in 0..w as i64 {
            let mut neighbors = Vec::new();
            for dy in -1..=1_i64 {
                for dx in -1..=1_i64 {
                    let (x, y) = (sx + dx, sy + dy);
                    if (dx, dy) != (0, 0) && (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                        neighbors.push(idx(x as usize, y as usize));
                    }
                }
            }
            let s = idx(sx as usize, sy as usize);
            spread[s][s] += 1.0 - leak;
            for &t in &neighbors {
                spread[t][s] += leak / neighbors.len() as f64;
            }
        }
    }
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| spread[i][k] * shift[k][j]).sum())
                .collect()
        })
        .collect()
}

fn forecast_oracle() -> Outcome {
    let (w, h, horizon) = (6, 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let raw: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let belief = normalize(w, h, raw).map_err(|e| e.to_string())?;
        let leak = rng.random_range(0.0..0.3);
        let diffusion = DiffusionParams::new(leak).map_err(|e| e.to_string())?;
        let mut disp = || Displacement {
            dx: rng.random_range(-1.5..1.5),
            dy: rng.random_range(-1.5..1.5),
        };
        let plan: Vec<Displacement> = (0..horizon).map(|_| disp()).collect();
        let perturb: Vec<Displacement> = (0..horizon).map(|_| disp()).collect();
        let fc = forecast(&belief, &plan, &perturb, diffusion, horizon).map_err(|e| e.to_string())?;
        let mut expected = belief.densities().to_vec();
        for (n, step) in fc.steps().iter().enumerate() {
            if n > 0 {
                let m = transition_matrix(w, h, plan[n - 1] + perturb[n - 1], leak);
                expected = m
                    .iter()
                    .map(|row| row.iter().zip(&expected).map(|(a, b)| a * b).sum())
                    .collect();
            }
            for (a, b) in step.densities().iter().zip(&expected) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(
        worst <= 1e-10,
        format!("20 cases, largest per-cell difference {worst:.3e}"),
    )
}

fn random_belief(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GridDistribution {
    let raw: Vec<f64> = (0..w * h)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random::<f64>() + 1e-3
            }
        })
        .collect();
    normalize(w, h, raw).expect("some mass survives")
}

fn closure_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut applications = 0;
    let mut worst_mass: f64 = 0.0;
    let mut negative = 0;
    while applications < 1000 {
        let (w, h) = (rng.random_range(2..9), rng.random_range(2..9));
        let belief = random_belief(&mut rng, w, h);
        let out = match applications % 3 {
            0 => {
                let observation = random_belief(&mut rng, w, h);
                let kernel = estimate_kernel(w, h, |_| {
                    let row: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let total: f64 = row.iter().sum();
                    row.into_iter().map(|v| v / total).collect()
                })
                .map_err(|e| e.to_string())?;
                fuse_match(&belief, &observation, &kernel)
            }
            1 => {
                let reading = Cell::new(rng.random_range(0..w), rng.random_range(0..h));
                let patch_mass: f64 = belief
                    .shape()
                    .cells()
                    .filter(|c| c.chebyshev(reading) <= 1)
                    .map(|c| belief.get(c))
                    .sum();
                if patch_mass == 0.0 {
                    continue;
                }
                fuse_gps(&belief, reading, rng.random_range(0.01..=1.0))
            }
            _ => {
                let step = Displacement {
                    dx: rng.random_range(-3.0..3.0),
                    dy: rng.random_range(-3.0..3.0),
                };
                let leak = DiffusionParams::new(rng.random_range(0.0..=1.0)).map_err(|e| e.to_string())?;
                propagate(&belief, step, leak)
            }
        }
        .map_err(|e| format!("application {applications}: {e}"))?;
        negative += out.densities().iter().filter(|&&p| p < 0.0).count();
        worst_mass = worst_mass.max((out.total_mass() - 1.0).abs());
        applications += 1;
    }
    check(
        negative == 0 && worst_mass <= 1e-9,
        format!("{applications} applications, {negative} negative cells, worst mass error {worst_mass:.3e}"),
    )
}

fn drone_config() -> Result<WorldConfig, String> {
    ScenarioFile::load(&fixture("drone_regression.json"))
        .map_err(|e| e.to_string())?
        .drone
        .ok_or_else(|| "fixture has no drone section".to_owned())
}

fn drone_pattern() -> Outcome {
    let config = drone_config()?;
    let trace = run_mission(&config, REGRESSION_SEED).map_err(|e| e.to_string())?;
    let rows = &trace.rows;
    let mut problems = Vec::new();
    let escalations: Vec<(usize, Signal)> = rows
        .windows(2)
        .enumerate()
        .filter(|(_, p)| p[0].agent == CvAgent::Capsule && p[0].signal == Signal::MoreData && p[1].t == p[0].t)
        .map(|(i, p)| (i, p[1].signal))
        .collect();
    let to_continue = escalations.iter().filter(|e| e.1 == Signal::Continue).count();
    let to_change = escalations.iter().filter(|e| e.1 == Signal::Change).count();
    if to_continue == 0 {
        problems.push("no MoreData->Continue step".to_owned());
    }
    if to_change == 0 {
        problems.push("no MoreData->Change step".to_owned());
    }
    for r in rows {
        let high = matches!(r.signal, Signal::Change | Signal::MoreData);
        if high && r.probability <= config.threshold {
            problems.push(format!("t={} {} {} at {}", r.t, r.agent, r.signal, r.probability));
        }
        if r.agent == CvAgent::Capsule && r.signal == Signal::Continue && r.probability > config.threshold {
            problems.push(format!("t={} CaPSuLe Continue at {}", r.t, r.probability));
        }
    }
    let more_data = rows.iter().filter(|r| r.signal == Signal::MoreData).count() as u64;
    for &(i, _) in &escalations {
        if rows[i].resources - rows[i + 1].resources != config.gps_cost {
            problems.push(format!(
                "t={} GPS read debited {}",
                rows[i].t,
                rows[i].resources - rows[i + 1].resources
            ));
        }
    }
    for pair in rows.windows(2) {
        if pair[1].agent == CvAgent::Capsule && pair[1].resources != pair[0].resources {
            problems.push(format!("t={} resources changed without a GPS read", pair[1].t));
        }
    }
    let spent = config.resource_budget - trace.final_state.resources;
    if spent != more_data * config.gps_cost {
        problems.push(format!("spent {spent} for {more_data} MoreData signals"));
    }
    let nofly = build_nofly_mask(&config).map_err(|e| e.to_string())?;
    let end = trace.final_state.truth_cell();
    if !matches!(trace.outcome, MissionOutcome::Reached { .. }) || nofly.get(end) {
        problems.push(format!("{} at {end}", trace.outcome));
    }
    let detail = format!(
        "seed {REGRESSION_SEED}: {} rows, MoreData->Continue x{to_continue}, MoreData->Change x{to_change}, \
         resources {} -> {}, {} ending at {end}, {} steps in zone",
        rows.len(),
        config.resource_budget,
        trace.final_state.resources,
        trace.outcome,
        trace.nofly_steps.len()
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn fusion_accuracy() -> Outcome {
    let config = drone_config()?;
    let (mut raw, mut fused, mut n) = (0.0, 0.0, 0usize);
    for seed in 0..100 {
        let trace = run_mission(&config, seed).map_err(|e| e.to_string())?;
        for d in &trace.diagnostics {
            raw += d.raw_argmax.euclidean(d.truth.0, d.truth.1);
            fused += d.fused_argmax.euclidean(d.truth.0, d.truth.1);
            n += 1;
        }
    }
    let (raw, fused) = (raw / n as f64, fused / n as f64);
    check(
        fused <= raw,
        format!("100 missions, {n} steps: mean argmax error fused {fused:.3} vs raw matcher {raw:.3}"),
    )
}

fn determinism() -> Outcome {
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases = [
        (Scenario::Drone, "drone_regression.json", REGRESSION_SEED),
        (Scenario::Clock, "clock_monitor.json", 9),
        (Scenario::Clock, "clock_no_budget.json", 9),
    ];
    let mut compared = 0;
    for (i, (scenario, file, seed)) in cases.into_iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out_dir = base.path().join(format!("{i}-{rep}"));
            let spec = RunSpec {
                scenario,
                config_path: fixture(file),
                seed,
                out_dir: out_dir.clone(),
                emit_heatmaps: false,
            };
            let status = run(&spec).map_err(|e| e.to_string())?;
            if status == Status::ConfigError {
                return Err(format!("{file}: config error"));
            }
            outputs.push(std::fs::read(out_dir.join("trace.csv")).map_err(|e| e.to_string())?);
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{file} seed {seed}: traces differ"));
        }
        compared += 1;
    }
    Ok(format!(
        "{compared} scenario runs repeated with byte-identical trace.csv"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("clock worked example", Duration::from_secs(1), clock_worked_example),
        ("estimator recovery", Duration::from_secs(1), estimator_recovery),
        ("deadline soundness", Duration::from_secs(10), deadline_soundness),
        ("forecast oracle equivalence", Duration::from_secs(1), forecast_oracle),
        ("distribution closure", Duration::from_secs(5), closure_suite),
        ("drone decision pattern", Duration::from_secs(5), drone_pattern),
        ("fusion accuracy", Duration::from_secs(30), fusion_accuracy),
        ("determinism", Duration::from_secs(10), determinism),
    ];
    let mut failed = 0;
    for (name, budget, criterion) in criteria {
        let start = Instant::now();
        let outcome = criterion();
        let elapsed = start.elapsed();
        let (verdict, detail) = match outcome {
            Ok(d) if elapsed <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; took {elapsed:.2?}, budget {budget:?}")),
            Err(d) => ("FAIL", d),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{verdict} {name} [{elapsed:.2?}]: {detail}");
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
