//! End-to-end acceptance gates. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use gsadmm::ensemble::{
    admm_ensemble, convergence_order, ensemble_seeds, max_mean_zscore, max_relative_phi_gap, max_std_gap,
    residual_scaling, sme_ensemble, std_scaling, weak_error, EnsembleStats,
};
use gsadmm::experiment::{ensemble_seed, ExperimentConfig, PRESETS};
use gsadmm::linalg::{hilbert, psd_sqrt, relative_frobenius};
use gsadmm::observable::TestFunction;
use gsadmm::problem::{build_problem, GKind, PresetParams, Regularizer, StochasticProblem, VSpec};
use gsadmm::rng::rng_from_seed;
use gsadmm::schedules::ScheduleSpec;
use gsadmm::sme::{definiteness_threshold, em_step_raw, gradient_flow_reference, m_hat, MHat, SmeConfig};
use gsadmm::solver::{Solver, SolverConfig};
use nalgebra::{DMatrix, DVector};

const SEED: u64 = 7_001;

struct Gate {
    failed: Vec<String>,
}

impl Gate {
    fn report(&mut self, id: &str, pass: bool, detail: String, started: Instant) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id}: {verdict} ({detail}) [{:.1}s]", started.elapsed().as_secs_f64());
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn toy() -> StochasticProblem {
    build_problem(&PresetParams::toy(GKind::Quadratic)).unwrap()
}

fn toy_config(alpha: f64, m: i32) -> SolverConfig {
    SolverConfig { alpha, ..SolverConfig::default() }.with_resolution(m)
}

fn pair(problem: &StochasticProblem, cfg: &SolverConfig, runs: usize, label: &str, f: TestFunction) -> (EnsembleStats, EnsembleStats) {
    let a = admm_ensemble(problem, cfg, runs, ensemble_seed(SEED, &format!("admm/{label}")), None, f).unwrap();
    let sc = SmeConfig::from_solver(problem, cfg).unwrap();
    let b = sme_ensemble(problem, &sc, runs, ensemble_seed(SEED, &format!("sme/{label}")), None, f).unwrap();
    (a, b)
}

fn criterion_1(g: &mut Gate) {
    let t0 = Instant::now();
    let p = toy();
    let cfg = SolverConfig::default();
    let x0 = DVector::from_element(1, 1.0);
    let flow = gradient_flow_reference(&p, &m_hat(&cfg, p.a()), &x0, 20.0, 0.05).unwrap();
    let x = flow.xs.last().unwrap()[0];
    let ok = (x - 0.16374).abs() <= 1e-3 && t0.elapsed().as_secs_f64() < 1.0;
    g.report("1 toy minimizer", ok, format!("x_T = {x:.6}, target 0.16374 +- 1e-3, < 1 s"), t0);
}

fn criterion_2(g: &mut Gate) {
    let t0 = Instant::now();
    let p = toy();
    let ms: Vec<i32> = (4..=9).collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for alpha in [0.5, 1.0, 1.5] {
        let errs: Vec<f64> = ms
            .iter()
            .map(|&m| {
                let (a, b) = pair(&p, &toy_config(alpha, m), 10_000, &format!("c2/{alpha}/{m}"), TestFunction::XPlusXSquared);
                weak_error(&a, &b).unwrap()
            })
            .collect();
        let mf: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
        let slope = convergence_order(&mf, &errs).map(|f| f.slope).unwrap_or(f64::NAN);
        ok &= (0.7..=1.3).contains(&slope);
        detail.push(format!("alpha={alpha}: order {slope:.3}"));
    }
    g.report("2 weak order one", ok, format!("{}; band [0.7, 1.3]", detail.join(", ")), t0);
}

fn criterion_3(g: &mut Gate) {
    let t0 = Instant::now();
    let p = toy();
    // rho = 2^4 .. 2^9 with T = 0.5
    let ms: Vec<i32> = (3..=8).collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for (alpha, want_r) in [(1.0, (1.6, 2.4)), (1.5, (0.7, 1.3))] {
        let stats: Vec<EnsembleStats> = ms
            .iter()
            .map(|&m| {
                let cfg = toy_config(alpha, m);
                admm_ensemble(&p, &cfg, 1000, ensemble_seed(SEED, &format!("c3/{alpha}/{m}")), None, TestFunction::XPlusXSquared)
                    .unwrap()
            })
            .collect();
        let rep = residual_scaling(&ms, &stats).unwrap();
        let pass = (want_r.0..=want_r.1).contains(&rep.rate_r) && (1.6..=2.4).contains(&rep.rate_ra);
        ok &= pass;
        detail.push(format!("alpha={alpha}: r {:.3}, r^alpha {:.3}", rep.rate_r, rep.rate_ra));
    }
    g.report("3 residual scaling", ok, format!("{}; r band 2+-0.4 / 1+-0.3, r^alpha band 2+-0.4", detail.join(", ")), t0);
}

fn criterion_4(g: &mut Gate) {
    let t0 = Instant::now();
    let p = toy();
    let mut ok = true;
    let mut detail = Vec::new();
    // a large proximal weight keeps x nearly still so the recursion factor is |1 - alpha|
    for alpha in [0.5, 1.5] {
        let cfg = SolverConfig { alpha, c: 100.0, omega: 1.0, omega1: 1.0, z0: Some(vec![1.1]), ..SolverConfig::default() }
            .with_resolution(7);
        assert!((cfg.epsilon() - 2f64.powi(-8)).abs() < 1e-15);
        let tr = Solver::new(&p, &cfg).unwrap().run(SEED, None).unwrap();
        let ratio = tr.rs[1].norm() / tr.rs[0].norm();
        let dev = (ratio - (1.0 - alpha).abs()).abs();
        ok &= dev <= 0.1;
        detail.push(format!("alpha={alpha}: |r1/r0 - |1-alpha|| = {dev:.4}"));
    }
    for m in [10, 11] {
        for (alpha, want_div) in [(2.02, true), (1.9, false)] {
            let cfg = SolverConfig { alpha, c: 0.5, omega: 1.0, omega1: 1.0, ..SolverConfig::default() }.with_resolution(m);
            let solver = Solver::new(&p, &cfg).unwrap();
            let div = ensemble_seeds(SEED, 5).iter().filter(|&&s| solver.run(s, None).unwrap().diverged()).count();
            ok &= if want_div { div == 5 } else { div == 0 };
            detail.push(format!("m={m} alpha={alpha}: {div}/5 diverged"));
        }
    }
    g.report("4 relaxation boundary", ok, detail.join(", "), t0);
}

fn criterion_5(g: &mut Gate) {
    let t0 = Instant::now();
    let a = hilbert(3) * 0.5;
    let lam = MHat::from_params(0.15, 1.5, 1.0, &a).min_eigenvalue();
    let c0 = definiteness_threshold(1.5, 1.0, &a);
    let ok = (lam + 0.0153).abs() <= 1e-3 && (0.16..=0.17).contains(&c0);
    g.report("5 M-hat definiteness", ok, format!("lambda_min(c=0.15) = {lam:.5}, sign change at c = {c0:.5}"), t0);
}

fn criterion_6(g: &mut Gate) {
    let t0 = Instant::now();
    let p = toy();
    let (a, b) = pair(&p, &toy_config(1.5, 6), 10_000, "c6/toy", TestFunction::XPlusXSquared);
    let z = max_mean_zscore(&a, &b).unwrap();
    g.report("6a toy mean overlay", z <= 3.0, format!("max |mean diff| / pooled se = {z:.2}, limit 3"), t0);
    let t0 = Instant::now();
    let gap = max_std_gap(&a, &b, (0.1, 0.5)).unwrap();
    g.report("6b toy std overlay", gap <= 0.10, format!("max relative std gap on [0.1, 0.5] = {gap:.4}, limit 0.10"), t0);
    let t0 = Instant::now();
    let cfg = ExperimentConfig::preset("fig5_7").unwrap();
    let ridge = build_problem(&cfg.problem_params(GKind::Quadratic)).unwrap();
    let sc = cfg.solver_config(&cfg.variants()[0], 5);
    let (a, b) = pair(&ridge, &sc, 400, "c6/ridge", TestFunction::SumExpNeg);
    let gap = max_relative_phi_gap(&a, &b).unwrap();
    g.report("6c ridge mean overlay", gap <= 0.05, format!("max relative gap of E phi at m=5 = {gap:.4}, limit 0.05"), t0);
}

fn criterion_7(g: &mut Gate) {
    let t0 = Instant::now();
    let p = toy();
    let ms = [5, 6, 7];
    let mut eps = Vec::new();
    let stats: Vec<EnsembleStats> = ms
        .iter()
        .map(|&m| {
            let cfg = toy_config(1.5, m);
            eps.push(cfg.epsilon());
            admm_ensemble(&p, &cfg, 10_000, ensemble_seed(SEED, &format!("c7/{m}")), None, TestFunction::XPlusXSquared).unwrap()
        })
        .collect();
    let rep = std_scaling(&eps, &stats, (0.1, 0.5)).unwrap();
    g.report("7 sqrt-eps collapse", rep.max_gap_x <= 0.10, format!("max pairwise gap {:.4}, limit 0.10", rep.max_gap_x), t0);
}

fn prox_inclusion() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = rng_from_seed(SEED);
    use rand::Rng;
    for reg in [Regularizer::Quadratic { beta: 0.7 }, Regularizer::L1 { beta: 0.4 }] {
        for _ in 0..1000 {
            let w = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let t: f64 = rng.random_range(0.05..3.0);
            let z = reg.prox(&w, t).unwrap();
            let v = (&w - &z) / t;
            for i in 0..3 {
                let viol = match reg {
                    Regularizer::L1 { beta } if z[i] == 0.0 => (v[i].abs() - beta).max(0.0),
                    _ => (v[i] - reg.subgradient(&z)[i]).abs(),
                };
                worst = worst.max(viol);
            }
        }
    }
    worst
}

fn dual_identity() -> f64 {
    let p = toy();
    let cfg = toy_config(1.5, 6);
    let tr = Solver::new(&p, &cfg).unwrap().run(SEED, None).unwrap();
    let mut worst: f64 = 0.0;
    for (u, z) in tr.us.iter().zip(&tr.zs) {
        let g = p.regularizer().subgradient(z);
        let lhs = u * cfg.rho;
        worst = worst.max((&lhs - &g).norm() / g.norm().max(1e-300));
    }
    worst
}

fn psd_sqrt_error() -> f64 {
    let mut rng = rng_from_seed(SEED + 1);
    use rand::Rng;
    let mut worst: f64 = 0.0;
    for d in 1..=6 {
        for _ in 0..20 {
            let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let s = &b * b.transpose();
            let r = psd_sqrt(&s).unwrap();
            worst = worst.max(relative_frobenius(&(&r * r.transpose()), &s));
        }
    }
    worst
}

fn worker_determinism() -> bool {
    let p = toy();
    let cfg = toy_config(1.5, 5);
    let run = |w| admm_ensemble(&p, &cfg, 600, SEED, Some(w), TestFunction::XPlusXSquared).unwrap();
    let sc = SmeConfig::from_solver(&p, &cfg).unwrap();
    let sme = |w| sme_ensemble(&p, &sc, 600, SEED, Some(w), TestFunction::XPlusXSquared).unwrap();
    run(1) == run(4) && sme(1) == sme(3)
}

/// Largest z-score of the one-step drift and variance against their exact values.
fn em_moments() -> f64 {
    let p = toy();
    let cfg = toy_config(1.5, 4);
    let sc = SmeConfig::from_solver(&p, &cfg).unwrap();
    let x = DVector::from_element(1, 0.7);
    let dt = sc.dt();
    let mh = sc.mhat.matrix()[(0, 0)];
    let mean = 0.7 - p.potential_grad(&x).unwrap()[0] * dt / mh;
    let sig = p.sigma_exact(&x).unwrap().sigma[(0, 0)];
    let var = sc.epsilon * dt * sig / (mh * mh);
    let n = 100_000;
    let mut rng = rng_from_seed(SEED + 2);
    let draws: Vec<f64> = (0..n).map(|_| em_step_raw(&p, &x, &sc, dt, 1, 1.0, &mut rng).unwrap()[0]).collect();
    let m = draws.iter().sum::<f64>() / n as f64;
    let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let z_mean = (m - mean).abs() / (var / n as f64).sqrt();
    // Gaussian increments: var of the sample variance is 2 var^2 / (n - 1)
    let z_var = (v - var).abs() / (var * (2.0 / (n - 1) as f64).sqrt());
    z_mean.max(z_var)
}

/// Step scale `u_t` with fixed M-hat versus `M-hat / u_t`, independent seeds.
fn schedule_equivalence() -> (f64, f64, f64) {
    let params = PresetParams {
        preset: "custom".into(),
        d: 1,
        curvature: 1.0,
        noise: 1.0,
        v_spec: VSpec::Explicit(vec![0.0]),
        g_kind: GKind::Zero,
        ..PresetParams::default()
    };
    let p = build_problem(&params).unwrap();
    let cfg = SolverConfig {
        rho: 100.0,
        horizon: 4.0,
        omega1: 1.0,
        schedule: Some(ScheduleSpec::MhatGrowth { t_star: 1.0, a: 1.0 }),
        ..SolverConfig::default()
    };
    let mut fixed = SmeConfig::from_solver(&p, &cfg).unwrap();
    fixed.em_substeps = 2;
    let scaled = SmeConfig { step_scale: true, ..fixed.clone() };
    let runs = 4000;
    let f = TestFunction::Component(0);
    let a = sme_ensemble(&p, &fixed, runs, SEED + 3, None, f).unwrap();
    let b = sme_ensemble(&p, &scaled, runs, SEED + 4, None, f).unwrap();
    let z = max_mean_zscore(&a, &b).unwrap();
    let gap = max_std_gap(&a, &b, (0.5, 4.0)).unwrap();
    // relative se of a sample std is about 1/sqrt(2n); five of them for the difference
    let tol = 5.0 * (1.0 / runs as f64).sqrt();
    (z, gap, tol)
}

fn criterion_8(g: &mut Gate) {
    let t0 = Instant::now();
    let prox = prox_inclusion();
    let dual = dual_identity();
    let root = psd_sqrt_error();
    let det = worker_determinism();
    let em = em_moments();
    let (sz, sgap, stol) = schedule_equivalence();
    let ok = prox <= 1e-10 && dual <= 1e-9 && root <= 1e-8 && det && em <= 5.0 && sz <= 5.0 && sgap <= stol;
    g.report(
        "8 property suites",
        ok,
        format!(
            "prox {prox:.1e} <= 1e-10, dual {dual:.1e} <= 1e-9, psd_sqrt {root:.1e} <= 1e-8, \
             worker determinism {det}, EM moments {em:.2} sigma <= 5, \
             schedule equivalence mean z {sz:.2} <= 5 and std gap {sgap:.4} <= {stol:.4}"
        ),
        t0,
    );
}

fn criterion_9(g: &mut Gate) {
    let t0 = Instant::now();
    let mut ok = PRESETS.iter().all(|n| ExperimentConfig::preset(n).is_ok_and(|c| c.validate().is_ok()));
    let sweep = ExperimentConfig::preset("fig3_1b").unwrap().full_scale();
    ok &= sweep.ensemble.runs == 100_000 && sweep.m_values.contains(&11);
    let lasso = ExperimentConfig::preset("fig5_8").unwrap().full_scale();
    ok &= lasso.ensemble.runs == 4000 && lasso.experiment == "lasso";
    g.report(
        "9 full-scale presets (not run)",
        ok,
        format!("{} presets; weak-error sweep 1e5 runs to m=11, lasso 4000 runs", PRESETS.len()),
        t0,
    );
}

fn main() -> ExitCode {
    let mut g = Gate { failed: Vec::new() };
    criterion_1(&mut g);
    criterion_2(&mut g);
    criterion_3(&mut g);
    criterion_4(&mut g);
    criterion_5(&mut g);
    criterion_6(&mut g);
    criterion_7(&mut g);
    criterion_8(&mut g);
    criterion_9(&mut g);
    if g.failed.is_empty() {
        println!("acceptance: all criteria PASS");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAIL on {}", g.failed.join("; "));
        ExitCode::FAILURE
    }
}
