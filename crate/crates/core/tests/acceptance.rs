//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use step2step::control::{ClosedLoop, Controller};
use step2step::gait::{BezierSet, GaitSpec};
use step2step::hybrid::{impact_map, on_guard, solve_guard_configuration, GUARD_TOL};
use step2step::invariance::{
    barrier_condition, certify, estimate_r_star, feasible_at, reduced_condition, verify_certificate, BarrierParams,
    SampleOutcome, SampleRecord,
};
use step2step::ode::{integrate, Tolerances};
use step2step::poincare::{find_fixed_point, FixedPointOptions, ReducedChart};
use step2step::sim::{rollout, SimOptions, Termination};
use step2step::synth::{
    default_essential, optimize_loop, score_gait, synthesize_gait, EvalSettings, LoopConfig, Objective,
    SynthesisOptions,
};
use step2step::{RobotModel, State};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn report(id: usize, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let over = elapsed > budget;
    let (pass, detail) = match outcome {
        Ok(d) if !over => (true, d),
        Ok(d) => (false, format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
        Err(e) => (false, e),
    };
    println!(
        "criterion {id}: {} ({detail}) [{:.1} s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn models() -> [RobotModel; 2] {
    [RobotModel::compass(), RobotModel::five_link()]
}

fn random_guard_state(model: &RobotModel, rng: &mut ChaCha8Rng) -> State {
    let n = model.n_q();
    loop {
        let mut q = DVector::from_fn(n, |_, _| rng.random_range(-0.6..0.6));
        if n == 2 {
            q[0] = rng.random_range(0.05..0.5);
            q[1] = -q[0];
        }
        let Ok(q) = solve_guard_configuration(model, &q) else { continue };
        let x = State::new(q, DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0)));
        if on_guard(model, &x, GUARD_TOL) {
            return x;
        }
    }
}

fn impact_map_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_res, mut worst_gain) = (0.0f64, f64::NEG_INFINITY);
    for model in models() {
        for _ in 0..1000 {
            let x = random_guard_state(&model, &mut rng);
            let out = impact_map(&model, &x).map_err(|e| e.to_string())?;
            worst_res = worst_res.max(out.constraint_residual.amax());
            let before = model.kinetic_energy(&x.q, &x.qd);
            let after = model.kinetic_energy(&out.post_state.q, &out.post_state.qd);
            worst_gain = worst_gain.max(after - before);
        }
    }
    check(worst_res <= 1e-10, format!("constraint residual {worst_res:.2e}"))?;
    check(worst_gain <= 1e-10, format!("kinetic energy gain {worst_gain:.2e}"))?;
    Ok(format!("max constraint residual {worst_res:.1e}, max energy change {worst_gain:.1e}"))
}

fn dynamics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst_d = 0.0f64;
    let mut worst_drift = 0.0f64;
    for model in models() {
        let n = model.n_q();
        for _ in 0..100 {
            let q = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
            let d = model.mass_matrix(&q).map_err(|e| e.to_string())?;
            let h = 1e-3;
            let t = |qd: &DVector<f64>| model.kinetic_energy(&q, qd);
            let unit = |i: usize| DVector::from_fn(n, |k, _| if k == i { h } else { 0.0 });
            let hess = DMatrix::from_fn(n, n, |i, j| {
                let (ei, ej) = (unit(i), unit(j));
                (t(&(&ei + &ej)) - t(&(&ei - &ej)) - t(&(&ej - &ei)) + t(&(-&ei - &ej))) / (4.0 * h * h)
            });
            worst_d = worst_d.max((d - hess).amax());
        }
        for _ in 0..3 {
            let x0 = State::new(
                DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5)),
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            );
            let u = DVector::zeros(model.n_actuated());
            let f = |_t: f64, y: &DVector<f64>| model.continuous_dynamics(&State::from_vector(y), &u);
            let (y, _) = integrate(f, 0.0, &x0.to_vector(), 1.0, Tolerances { rtol: 1e-10, atol: 1e-12 })
                .map_err(|e| e.to_string())?;
            worst_drift = worst_drift.max((model.total_energy(&State::from_vector(&y)) - model.total_energy(&x0)).abs());
        }
    }
    let mut worst_b = 0.0f64;
    for _ in 0..20 {
        let set = BezierSet::new(DMatrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        for _ in 0..50 {
            let tau: f64 = rng.random_range(0.01..0.99);
            let h = 1e-5;
            for order in 1..=2 {
                let fd = (set.eval(tau + h, order - 1).unwrap() - set.eval(tau - h, order - 1).unwrap()) / (2.0 * h);
                worst_b = worst_b.max((fd - set.eval(tau, order).unwrap()).amax());
            }
        }
    }
    check(worst_d <= 1e-6, format!("mass matrix error {worst_d:.2e}"))?;
    check(worst_drift <= 1e-6, format!("energy drift {worst_drift:.2e}"))?;
    check(worst_b <= 1e-6, format!("Bezier derivative error {worst_b:.2e}"))?;
    Ok(format!("mass matrix {worst_d:.1e}, energy drift {worst_drift:.1e}, Bezier {worst_b:.1e}"))
}

fn mapped(d0: f64, d1: f64) -> SampleRecord {
    SampleRecord { x0: vec![d0.sqrt()], d0, d1: Some(d1), outcome: SampleOutcome::Mapped }
}

/// Largest grid radius `k * 1e-6 * r_max` at which the sampled condition holds.
fn grid_oracle(records: &[SampleRecord], alpha: f64, r_max: f64) -> f64 {
    let mut sorted: Vec<&SampleRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.d0.total_cmp(&b.d0));
    let steps = 1_000_000u32;
    let delta = r_max / f64::from(steps);
    for k in (0..=steps).rev() {
        let r = f64::from(k) * delta;
        let ok = sorted.iter().take_while(|rec| rec.d0 <= r).all(|rec| match (rec.outcome, rec.d1) {
            (SampleOutcome::Mapped, Some(d1)) => reduced_condition(rec.d0, d1, r, alpha),
            _ => false,
        });
        if ok {
            return r;
        }
    }
    0.0
}

fn random_records(rng: &mut ChaCha8Rng) -> (Vec<SampleRecord>, f64, f64) {
    let r_max: f64 = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    let alpha = rng.random_range(0.01..0.5);
    let (a, b) = (rng.random_range(0.2..1.1), rng.random_range(0.0..1.5));
    let escape_from = rng.random_range(0.3..1.5) * r_max;
    let n = rng.random_range(20..80);
    let records = (0..n)
        .map(|_| {
            let d0: f64 = rng.random_range(0.0..r_max);
            if d0 > escape_from && rng.random_bool(0.5) {
                let outcome = if rng.random_bool(0.5) { SampleOutcome::Escaped } else { SampleOutcome::ReconstructionFailed };
                return SampleRecord { x0: vec![d0.sqrt()], d0, d1: None, outcome };
            }
            let noise = rng.random_range(-0.05..0.05);
            mapped(d0, ((a + noise) * d0 + b * d0 * d0).max(0.0))
        })
        .collect();
    (records, alpha, r_max)
}

fn barrier_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..10_000 {
        let r = rng.random_range(0.0..2.0);
        let d0 = rng.random_range(0.0..2.0);
        let d1 = rng.random_range(0.0..3.0);
        let alpha = rng.random_range(0.001..0.999);
        let printed = barrier_condition(r - d1, r - d0, alpha);
        check(printed == reduced_condition(d0, d1, r, alpha), format!("forms disagree at r={r} d0={d0} d1={d1}"))?;
    }
    let grid: Vec<f64> = (0..=28_284).map(|i| -2f64.sqrt() + i as f64 * 1e-4).collect();
    let identity: Vec<_> = grid.iter().map(|x| mapped(x * x, x * x)).collect();
    let square: Vec<_> = grid.iter().map(|x| mapped(x * x, x.powi(4))).collect();
    let expand: Vec<_> = grid.iter().map(|x| mapped(x * x, 2.25 * x * x)).collect();
    let r_id = estimate_r_star(&identity, 0.05, 2.0);
    let r_sq = estimate_r_star(&square, 0.05, 2.0);
    let r_ex = estimate_r_star(&expand, 0.05, 2.0);
    check(r_id == 2.0, format!("identity gives {r_id}"))?;
    check((r_sq - 1.0).abs() <= 1e-3, format!("x^2 gives {r_sq}"))?;
    check(r_ex <= 2e-6, format!("1.5x gives {r_ex}"))?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (records, alpha, r_max) = random_records(&mut rng);
        let est = estimate_r_star(&records, alpha, r_max);
        let oracle = grid_oracle(&records, alpha, r_max);
        let tol = 1e-6 * r_max;
        check(
            (est - oracle).abs() <= tol && feasible_at(&records, alpha, est),
            format!("estimate {est} vs grid {oracle}"),
        )?;
        worst = worst.max((est - oracle).abs() / r_max);
    }
    Ok(format!("analytic cases r* = {r_id}, {r_sq:.6}, {r_ex:.1e}; worst grid gap {worst:.1e} r_max"))
}

struct Nominal {
    model: Arc<RobotModel>,
    gait: GaitSpec,
}

fn stable_gait(slot: &mut Option<Nominal>) -> Outcome {
    let model = RobotModel::five_link();
    let report = synthesize_gait(&model, &default_essential(), &SynthesisOptions::default()).map_err(|e| e.to_string())?;
    let hzd = report.residuals.hzd();
    let model = Arc::new(model);
    let gait = report.gait;
    let field = ClosedLoop::new(model.clone(), Arc::new(gait.clone()), Controller::default());
    let sim = SimOptions::default();
    let x0 = gait.fixed_point.clone().ok_or("gait has no fixed point")?;
    let fp = find_fixed_point(&field, &x0, &sim, &FixedPointOptions::default()).map_err(|e| e.to_string())?;
    let r = rollout(&field, &fp.x_star, 50, &sim).map_err(|e| e.to_string())?;
    check(hzd <= 1e-6, format!("HZD residual {hzd:.2e}"))?;
    check(fp.residual <= 1e-8, format!("fixed point residual {:.2e}", fp.residual))?;
    check(fp.spectral_radius < 1.0, format!("spectral radius {:.3}", fp.spectral_radius))?;
    check(r.steps_taken == 50 && r.termination == Termination::Completed, format!("rollout {:?}", r.termination))?;
    *slot = Some(Nominal { model, gait });
    Ok(format!(
        "HZD {hzd:.1e}, fixed point residual {:.1e}, spectral radius {:.3}, 50 steps",
        fp.residual, fp.spectral_radius
    ))
}

fn certification(nominal: Option<&Nominal>) -> Outcome {
    let n = nominal.ok_or("no gait from criterion 4")?;
    let field = ClosedLoop::new(n.model.clone(), Arc::new(n.gait.clone()), Controller::default());
    let sim = SimOptions::default();
    let x0 = n.gait.fixed_point.clone().unwrap();
    let fp = find_fixed_point(&field, &x0, &sim, &FixedPointOptions::default()).map_err(|e| e.to_string())?;
    let chart = ReducedChart::with_default_indices(n.model.clone(), field.gait.clone(), fp.x_star.clone())
        .map_err(|e| e.to_string())?;
    let params = BarrierParams { alpha: 0.05, r_max: 2.0, n_samples: 200 };
    let cert = certify(&field, &chart, &fp, &params, 0, "nominal", &sim).map_err(|e| e.to_string())?;
    check(cert.r_star > 0.0, "r* = 0")?;
    let v = verify_certificate(&field, &chart, &cert, 10, 50, 1, &sim);
    check(v.violations.is_empty(), format!("r* = {:.4}, {} escapes", cert.r_star, v.violations.len()))?;
    Ok(format!("r* = {:.4}, 0 escapes in 50 x 10 steps, worst margin {:.2e}", cert.r_star, v.worst_margin))
}

fn ablation() -> Outcome {
    let model = RobotModel::five_link();
    let config = LoopConfig { iterations: 10, gaits_per_iteration: 5, seed: 0, ..LoopConfig::default() };
    let settings = EvalSettings {
        synthesis: SynthesisOptions::default(),
        barrier: BarrierParams::default(),
        sim: SimOptions::default(),
    };
    let mut r = Vec::new();
    for objective in [Objective::Robustness, Objective::StabilityOnly] {
        let res = optimize_loop(&model, &config, objective, &settings, &[], &mut ()).map_err(|e| e.to_string())?;
        let best = res.best.ok_or(format!("{objective:?}: no gait"))?;
        let gait = best.gait.ok_or("best gait missing")?;
        let score = score_gait(
            &model,
            &gait,
            best.record.gait_id,
            &Controller::default(),
            &settings.barrier,
            config.seed,
            config.stability_threshold,
            &settings.sim,
        )
        .map_err(|e| e.to_string())?;
        r.push(score.score.r_star.unwrap_or(0.0));
    }
    check(r[0] >= r[1], format!("robustness best r* {:.4} < stability-only best r* {:.4}", r[0], r[1]))?;
    Ok(format!("robustness best r* {:.4} >= stability-only best r* {:.4}", r[0], r[1]))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_step2step"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .env_remove("STEP2STEP_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn same_bytes(a: &Path, b: &Path, rel: &str) -> Result<(), String> {
    let (x, y) = (fs::read(a.join(rel)).map_err(|e| e.to_string())?, fs::read(b.join(rel)).map_err(|e| e.to_string())?);
    check(x == y, format!("{rel} differs between runs"))
}

fn determinism(nominal: Option<&Nominal>) -> Outcome {
    let n = nominal.ok_or("no gait from criterion 4")?;
    let work = TempDir::new().map_err(|e| e.to_string())?;
    let gait = work.path().join("gait.json");
    fs::write(&gait, n.gait.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let config = work.path().join("small.toml");
    fs::write(
        &config,
        "[barrier]\nn_samples = 40\n[optimize]\niterations = 2\ngaits_per_iteration = 2\nstability_threshold = 10\n",
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    let gait = gait.to_str().unwrap();
    let config = config.to_str().unwrap();
    for dir in [&a, &b] {
        run_cli(dir, &["--seed", "7", "--config", config, "certify", "--gait", gait, "--horizon", "0"])?;
        run_cli(dir, &["--seed", "7", "--config", config, "optimize"])?;
    }
    let mut files = vec!["certificate.json".to_string(), "samples.csv".into(), "history.jsonl".into(), "best_gait.json".into()];
    let gaits = fs::read_dir(a.join("gaits")).map_err(|e| e.to_string())?;
    files.extend(gaits.filter_map(|e| e.ok()).map(|e| format!("gaits/{}", e.file_name().to_string_lossy())));
    for f in &files {
        same_bytes(&a, &b, f)?;
    }
    Ok(format!("{} output files byte-identical across reruns", files.len()))
}

fn main() {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let mut nominal = None;
    let results = [
        report(1, Duration::from_secs(10), impact_map_correctness),
        report(2, Duration::from_secs(30), dynamics_oracles),
        report(3, Duration::from_secs(60), barrier_algebra),
        report(4, mins(10), || stable_gait(&mut nominal)),
        report(5, mins(15), || certification(nominal.as_ref())),
        report(6, mins(120), ablation),
        report(7, mins(30), || determinism(nominal.as_ref())),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
