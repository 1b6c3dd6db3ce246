//! The generalized stochastic ADMM iteration.
//!
//! One step draws a batch `ξ¹…ξᴮ` and applies
//!
//! ```text
//! x⁺ = argmin (1−ω₁) f̄(x) + ω₁ f̄'(x_k)ᵀ(x−x_k)
//!             + (1−ω)(ρ/2)‖Ax − z_k + u_k‖² + ω ρ (Ax_k − z_k + u_k)ᵀA(x−x_k)
//!             + (τ/2)‖x − x_k‖²
//! z⁺ = prox_{g/ρ}(α A x⁺ + (1−α) z_k + u_k)
//! u⁺ = u_k + α A x⁺ + (1−α) z_k − z⁺
//! ```
//!
//! where `f̄` is the batch average and `τ = cρ`. The corner cases
//! `(ω₁, ω, τ) = (0, 0, 0)`, `(0, 1, τ)` and `(1, 1, τ)` are the standard,
//! linearized and gradient-based stochastic ADMM.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::observable::TestFunction;
use crate::problem::{Sample, StochasticProblem};
use crate::rng::rng_from_seed;
use crate::schedules::ScheduleSpec;

/// All G-sADMM parameters. `ε = 1/ρ` and `τ = cρ` are derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rho: f64,
    pub alpha: f64,
    pub omega: f64,
    pub omega1: f64,
    pub c: f64,
    /// Base batch size `B₀`.
    pub batch: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    /// Defaults to `A x₀`.
    pub z0: Option<Vec<f64>>,
    /// Defaults to `ε g'(z₀)` so that `ρ u₀ = g'(z₀)`.
    pub u0: Option<Vec<f64>>,
    /// Optional open-loop schedule for the batch size or `M̂`.
    pub schedule: Option<ScheduleSpec>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub divergence_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 32.0,
            alpha: 1.0,
            omega: 1.0,
            omega1: 0.0,
            c: 1.0,
            batch: 1,
            horizon: 0.5,
            x0: vec![1.0],
            z0: None,
            u0: None,
            schedule: None,
            newton_tol: 1e-11,
            newton_max_iter: 100,
            divergence_threshold: 1e8,
        }
    }
}

/// Parameters in force for one step after applying the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub c: f64,
    pub alpha: f64,
    pub batch: usize,
}

impl SolverConfig {
    pub fn epsilon(&self) -> f64 {
        1.0 / self.rho
    }

    pub fn tau(&self) -> f64 {
        self.c * self.rho
    }

    /// `⌊ρT⌋`, treating products within a few ulps of an integer as that
    /// integer so that `ρ = 2^m/T` gives exactly `2^m` steps.
    pub fn steps(&self) -> usize {
        let p = self.rho * self.horizon;
        let r = p.round();
        if (p - r).abs() <= 1e-9 * r.max(1.0) {
            r as usize
        } else {
            p.floor() as usize
        }
    }

    /// Sets `ρ = 2^m / T`.
    pub fn with_resolution(mut self, m: i32) -> Self {
        self.rho = 2f64.powi(m) / self.horizon;
        self
    }

    /// True when `ω` or `ω₁` lies strictly inside `(0, 1)`; such runs use the
    /// same machinery but sit outside the settings the theory covers.
    pub fn is_extrapolated(&self) -> bool {
        let inner = |w: f64| w > 0.0 && w < 1.0;
        inner(self.omega) || inner(self.omega1)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self, problem: &StochasticProblem) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return bad(format!("rho must be positive and finite, got {}", self.rho));
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        for (name, w) in [("omega", self.omega), ("omega1", self.omega1)] {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("{name} must lie in [0, 1], got {w}"));
            }
        }
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return bad(format!("c must be >= 0, got {}", self.c));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.steps() == 0 {
            return bad(format!("rho * T = {} gives no steps", self.rho * self.horizon));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 || !(self.divergence_threshold > 0.0) {
            return bad("newton_tol, newton_max_iter and divergence_threshold must be positive".into());
        }
        let (d, m) = (problem.dim(), problem.constraint_dim());
        if self.x0.len() != d {
            return Err(Error::DimensionMismatch(format!("x0 has length {}, expected {d}", self.x0.len())));
        }
        for (name, v) in [("z0", &self.z0), ("u0", &self.u0)] {
            if let Some(v) = v {
                if v.len() != m {
                    return Err(Error::DimensionMismatch(format!("{name} has length {}, expected {m}", v.len())));
                }
            }
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
            if !s.is_open_loop() {
                return Err(Error::Unsupported("solver schedules must be open-loop".into()));
            }
        }
        Ok(())
    }

    /// `(x₀, z₀, u₀)` with the documented defaults.
    pub fn initial_state(&self, problem: &StochasticProblem) -> SolverState {
        let x = DVector::from_column_slice(&self.x0);
        let z = match &self.z0 {
            Some(z) => DVector::from_column_slice(z),
            None => problem.a() * &x,
        };
        let u = match &self.u0 {
            Some(u) => DVector::from_column_slice(u),
            None => problem.regularizer().subgradient(&z) * self.epsilon(),
        };
        SolverState { k: 0, x, z, u }
    }

    /// `(c, α, B)` used for the step leaving `t_k = kε`.
    ///
    /// An `M̂` schedule `M̂_t = s M̂₀` is realized exactly through
    /// `c_t = s c` and `1/α_t − ω = s (1/α − ω)`.
    pub fn step_params(&self, k: usize) -> Result<StepParams> {
        let t = k as f64 * self.epsilon();
        let Some(sched) = &self.schedule else {
            return Ok(StepParams { c: self.c, alpha: self.alpha, batch: self.batch });
        };
        let s = sched.mhat_scale(t)?;
        let alpha = if s == 1.0 {
            self.alpha
        } else {
            let inv = self.omega + s * (1.0 / self.alpha - self.omega);
            if !(inv > 0.0) || !inv.is_finite() {
                return Err(Error::InvalidParameter(format!("schedule gives no valid relaxation at t = {t}")));
            }
            1.0 / inv
        };
        Ok(StepParams { c: self.c * s, alpha, batch: sched.batch(t, self.batch, self.epsilon())? })
    }
}

/// Iteration variables `(k, x_k, z_k, u_k)`; `u` is the scaled dual.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub k: usize,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// `‖x‖` exceeded the divergence threshold (or became non-finite) at
    /// this step; the arrays stop there.
    Diverged { step: usize },
}

/// Per-step record of one run.
///
/// `ras[k]` is the α-residual `αAx_k + (1−α)z_{k−1} − z_k = u_k − u_{k−1}`
/// for `k ≥ 1`; `ras[0]` repeats `rs[0]`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub fingerprint: String,
    pub seed: u64,
    pub epsilon: f64,
    pub xs: Vec<DVector<f64>>,
    pub zs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub rs: Vec<DVector<f64>>,
    pub ras: Vec<DVector<f64>>,
    /// Relaxation used for the step into index `k` (`alphas[0]` is unused
    /// and set to the nominal value).
    pub alphas: Vec<f64>,
    pub test_values: Option<Vec<f64>>,
    pub status: RunStatus,
    pub extrapolated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.epsilon).collect()
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// Column names and rows in the trajectory CSV layout
    /// `step, t, x_*, z_*, u_*, r_norm, ralpha_norm, phi`.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let d = self.xs.first().map_or(0, |x| x.len());
        let m = self.zs.first().map_or(0, |z| z.len());
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("x_{i}")));
        header.extend((0..m).map(|i| format!("z_{i}")));
        header.extend((0..m).map(|i| format!("u_{i}")));
        header.extend(["r_norm", "ralpha_norm", "phi"].map(String::from));
        let rows = (0..self.len())
            .map(|k| {
                let mut row = vec![k as f64, k as f64 * self.epsilon];
                row.extend(self.xs[k].iter());
                row.extend(self.zs[k].iter());
                row.extend(self.us[k].iter());
                row.push(self.rs[k].norm());
                row.push(self.ras[k].norm());
                row.push(self.test_values.as_ref().map_or(f64::NAN, |v| v[k]));
                row
            })
            .collect();
        (header, rows)
    }
}

/// A validated problem/config pair with cached `AᵀA`.
#[derive(Debug)]
pub struct Solver<'a> {
    problem: &'a StochasticProblem,
    config: &'a SolverConfig,
    ata: DMatrix<f64>,
}

impl<'a> Solver<'a> {
    pub fn new(problem: &'a StochasticProblem, config: &'a SolverConfig) -> Result<Self> {
        config.validate(problem)?;
        let ata = problem.a().transpose() * problem.a();
        Ok(Self { problem, config, ata })
    }

    pub fn problem(&self) -> &StochasticProblem {
        self.problem
    }

    pub fn config(&self) -> &SolverConfig {
        self.config
    }

    fn batch_mean_grad(&self, x: &DVector<f64>, batch: &[Sample]) -> DVector<f64> {
        self.problem.batch_grad(x, batch)
    }

    fn batch_mean_hessian(&self, x: &DVector<f64>, batch: &[Sample]) -> Result<DMatrix<f64>> {
        let d = self.problem.dim();
        let mut h = DMatrix::zeros(d, d);
        for xi in batch {
            h += self
                .problem
                .loss()
                .hessian(x, xi)
                .ok_or_else(|| Error::Unsupported("implicit loss step needs per-sample Hessians".into()))?;
        }
        Ok(h / batch.len() as f64)
    }

    fn batch_mean_value(&self, x: &DVector<f64>, batch: &[Sample]) -> f64 {
        batch.iter().map(|xi| self.problem.loss().value(x, xi)).sum::<f64>() / batch.len() as f64
    }

    /// `τI + (1−ω)ρAᵀA`.
    fn coupling_matrix(&self, c: f64) -> DMatrix<f64> {
        let d = self.problem.dim();
        let rho = self.config.rho;
        DMatrix::identity(d, d) * (c * rho) + &self.ata * ((1.0 - self.config.omega) * rho)
    }

    /// The x-subproblem minimizer.
    pub fn x_update(&self, state: &SolverState, batch: &[Sample], params: &StepParams) -> Result<DVector<f64>> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let cfg = self.config;
        let a = self.problem.a();
        let xk = &state.x;
        // q = ρAᵀ(Ax_k − z_k + u_k)
        let mut resid = a * xk - &state.z + &state.u;
        resid *= cfg.rho;
        let q = a.transpose() * resid;
        let gk = self.batch_mean_grad(xk, batch);
        let w1 = cfg.omega1;

        if w1 == 1.0 {
            let rhs = -(gk + q);
            if cfg.omega == 1.0 {
                let tau = params.c * cfg.rho;
                if tau == 0.0 {
                    return Err(Error::SingularSubproblem);
                }
                return Ok(xk + rhs / tau);
            }
            return Ok(xk + solve_spd(self.coupling_matrix(params.c), rhs)?);
        }

        let k_mat = self.coupling_matrix(params.c);
        if self.problem.loss().is_quadratic() {
            let h = self.batch_mean_hessian(xk, batch)?;
            let lhs = k_mat + h * (1.0 - w1);
            return Ok(xk + solve_spd(lhs, -(gk + q))?);
        }
        self.newton(xk, batch, &(gk * w1 + q), &k_mat, w1)
    }

    /// Damped Newton on `F(δ) = (1−ω₁) f̄(x_k+δ) + bᵀδ + ½δᵀKδ`,
    /// `b = ω₁ f̄'(x_k) + q`.
    fn newton(&self, xk: &DVector<f64>, batch: &[Sample], b: &DVector<f64>, k_mat: &DMatrix<f64>, w1: f64) -> Result<DVector<f64>> {
        let cfg = self.config;
        let objective = |delta: &DVector<f64>| {
            let x = xk + delta;
            (1.0 - w1) * self.batch_mean_value(&x, batch) + b.dot(delta) + 0.5 * delta.dot(&(k_mat * delta))
        };
        let mut delta = DVector::zeros(xk.len());
        let mut residual = f64::INFINITY;
        for _ in 0..cfg.newton_max_iter {
            let x = xk + &delta;
            let scale = 1.0 + x.norm();
            let g = self.batch_mean_grad(&x, batch) * (1.0 - w1) + b + k_mat * &delta;
            residual = g.norm();
            if residual <= cfg.newton_tol * scale {
                return Ok(x);
            }
            let h = self.batch_mean_hessian(&x, batch)? * (1.0 - w1) + k_mat;
            let p = solve_spd(h, -&g)?;
            let mut t = 1.0;
            if p.norm() > 1e-6 * scale {
                let f0 = objective(&delta);
                let slope = g.dot(&p);
                while t > 1e-10 && !(objective(&(&delta + &p * t)) <= f0 + 1e-4 * t * slope) {
                    t *= 0.5;
                }
            }
            let stepv = p * t;
            delta += &stepv;
            // Round-off floor: the gradient cannot be resolved any further.
            if stepv.norm() <= 4.0 * f64::EPSILON * scale {
                return Ok(xk + delta);
            }
        }
        Err(Error::NewtonFailed { iterations: cfg.newton_max_iter, residual })
    }

    /// `prox_{g/ρ}(αAx⁺ + (1−α)z_k + u_k)`; also returns `Ax⁺`.
    pub fn z_update(&self, x_new: &DVector<f64>, state: &SolverState, params: &StepParams) -> Result<(DVector<f64>, DVector<f64>)> {
        let ax = self.problem.a() * x_new;
        let w = relaxed(&ax, &state.z, params.alpha) + &state.u;
        let z = self.problem.regularizer().prox(&w, self.config.epsilon())?;
        Ok((z, ax))
    }

    /// `u⁺ = u_k + r^α` with `r^α = αAx⁺ + (1−α)z_k − z⁺`; returns `(u⁺, r^α)`.
    pub fn u_update(&self, ax_new: &DVector<f64>, z_new: &DVector<f64>, state: &SolverState, params: &StepParams) -> (DVector<f64>, DVector<f64>) {
        u_update(ax_new, z_new, &state.z, &state.u, params.alpha)
    }

    /// One full iteration; returns the new state and the α-residual.
    pub fn step(&self, state: &SolverState, rng: &mut dyn RngCore) -> Result<(SolverState, DVector<f64>, StepParams)> {
        let params = self.config.step_params(state.k)?;
        let batch: Vec<Sample> = (0..params.batch).map(|_| self.problem.sample(rng)).collect();
        let x = self.x_update(state, &batch, &params)?;
        let (z, ax) = self.z_update(&x, state, &params)?;
        let (u, ra) = self.u_update(&ax, &z, state, &params);
        Ok((SolverState { k: state.k + 1, x, z, u }, ra, params))
    }

    /// Runs `⌊ρT⌋` steps from the configured initial state.
    pub fn run(&self, seed: u64, test_fn: Option<TestFunction>) -> Result<Trajectory> {
        let cfg = self.config;
        let steps = cfg.steps();
        let mut rng = rng_from_seed(seed);
        let mut state = cfg.initial_state(self.problem);
        let a = self.problem.a();
        let mut tr = Trajectory {
            fingerprint: cfg.fingerprint(),
            seed,
            epsilon: cfg.epsilon(),
            xs: Vec::with_capacity(steps + 1),
            zs: Vec::with_capacity(steps + 1),
            us: Vec::with_capacity(steps + 1),
            rs: Vec::with_capacity(steps + 1),
            ras: Vec::with_capacity(steps + 1),
            alphas: Vec::with_capacity(steps + 1),
            test_values: test_fn.map(|_| Vec::with_capacity(steps + 1)),
            status: RunStatus::Completed,
            extrapolated: cfg.is_extrapolated(),
        };
        let r0 = a * &state.x - &state.z;
        tr.ras.push(r0.clone());
        tr.alphas.push(cfg.alpha);
        record(&mut tr, self.problem, &state, r0, test_fn);
        for k in 0..steps {
            let (next, ra, params) = self.step(&state, &mut rng)?;
            state = next;
            let r = a * &state.x - &state.z;
            tr.ras.push(ra);
            tr.alphas.push(params.alpha);
            let xn = state.x.norm();
            let blown = !xn.is_finite() || xn > cfg.divergence_threshold;
            record(&mut tr, self.problem, &state, r, test_fn);
            if blown {
                tr.status = RunStatus::Diverged { step: k + 1 };
                break;
            }
        }
        Ok(tr)
    }
}

fn record(tr: &mut Trajectory, problem: &StochasticProblem, s: &SolverState, r: DVector<f64>, test_fn: Option<TestFunction>) {
    if let (Some(vals), Some(f)) = (tr.test_values.as_mut(), test_fn) {
        vals.push(f.eval_on(problem, &s.x));
    }
    tr.xs.push(s.x.clone());
    tr.zs.push(s.z.clone());
    tr.us.push(s.u.clone());
    tr.rs.push(r);
}

/// `α·ax + (1−α)·z`.
fn relaxed(ax: &DVector<f64>, z: &DVector<f64>, alpha: f64) -> DVector<f64> {
    ax * alpha + z * (1.0 - alpha)
}

/// Dual update; the returned increment is bitwise the one added to `u`.
pub fn u_update(ax_new: &DVector<f64>, z_new: &DVector<f64>, z_old: &DVector<f64>, u_old: &DVector<f64>, alpha: f64) -> (DVector<f64>, DVector<f64>) {
    let ra = relaxed(ax_new, z_old, alpha) - z_new;
    (u_old + &ra, ra)
}

/// Solves `H x = b` for symmetric `H`, preferring Cholesky.
fn solve_spd(h: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if h.nrows() == 1 {
        let v = h[(0, 0)];
        if v == 0.0 || !v.is_finite() {
            return Err(Error::SingularSubproblem);
        }
        return Ok(b / v);
    }
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    h.lu().solve(&b).ok_or(Error::SingularSubproblem)
}

/// Convenience wrapper: validates and runs one trajectory.
pub fn run_trajectory(problem: &StochasticProblem, config: &SolverConfig, seed: u64, test_fn: Option<TestFunction>) -> Result<Trajectory> {
    Solver::new(problem, config)?.run(seed, test_fn)
}

/// One x-update at the state's step index.
pub fn x_update(problem: &StochasticProblem, state: &SolverState, batch: &[Sample], config: &SolverConfig) -> Result<DVector<f64>> {
    let s = Solver::new(problem, config)?;
    s.x_update(state, batch, &config.step_params(state.k)?)
}

/// One z-update at the state's step index.
pub fn z_update(problem: &StochasticProblem, x_new: &DVector<f64>, state: &SolverState, config: &SolverConfig) -> Result<DVector<f64>> {
    let s = Solver::new(problem, config)?;
    Ok(s.z_update(x_new, state, &config.step_params(state.k)?)?.0)
}

/// One full step.
pub fn step(problem: &StochasticProblem, state: &SolverState, rng: &mut dyn RngCore, config: &SolverConfig) -> Result<SolverState> {
    Ok(Solver::new(problem, config)?.step(state, rng)?.0)
}

/// Residual `r_k`, α-residual `r^α_k` and modified α-residual
/// `r̂^α_{k+1} = α r_k + (α−1)(z_{k+1} − z_k)` (index 0 repeats `r_0`).
#[derive(Clone, Debug)]
pub struct ResidualSeries {
    pub r: Vec<DVector<f64>>,
    pub r_alpha: Vec<DVector<f64>>,
    pub r_hat_alpha: Vec<DVector<f64>>,
}

pub fn residual_series(tr: &Trajectory) -> ResidualSeries {
    let mut r_hat = Vec::with_capacity(tr.len());
    if let Some(r0) = tr.rs.first() {
        r_hat.push(r0.clone());
    }
    for k in 1..tr.len() {
        let a = tr.alphas[k];
        r_hat.push(&tr.rs[k - 1] * a + (&tr.zs[k] - &tr.zs[k - 1]) * (a - 1.0));
    }
    ResidualSeries { r: tr.rs.clone(), r_alpha: tr.ras.clone(), r_hat_alpha: r_hat }
}

pub fn norms(v: &[DVector<f64>]) -> Vec<f64> {
    v.iter().map(|x| x.norm()).collect()
}
