//! The stochastic modified equation
//!
//! ```text
//! M̂ dX_t = −∇V(X_t) dt + √(ε / B_t) σ(X_t) dW_t,   M̂ = cI + (1/α − ω)AᵀA,
//! ```
//!
//! integrated by Euler–Maruyama with `em_substeps` steps per `ε`, and the
//! noise-free gradient flow `M̂ Ẋ = −∇V(X)` integrated by RK4.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use crate::linalg::psd_sqrt;
use crate::linalg::{asymmetry, symmetric_eigenvalues};
use crate::observable::TestFunction;
use crate::problem::{SigmaMode, StochasticProblem};
use crate::rng::rng_from_seed;
use crate::schedules::ScheduleSpec;
use crate::solver::{RunStatus, SolverConfig};

/// `M̂` with its spectrum summary and, when positive definite, a cached
/// Cholesky factor.
#[derive(Clone, Debug)]
pub struct MHat {
    matrix: DMatrix<f64>,
    min_eigenvalue: f64,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl MHat {
    /// Wraps a symmetric matrix. Indefinite matrices are accepted and flagged.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch("M̂ must be square".into()));
        }
        let asym = asymmetry(&matrix);
        if asym > 1e-12 {
            return Err(Error::InvalidParameter(format!("M̂ asymmetric by {asym:e}")));
        }
        let min_eigenvalue = symmetric_eigenvalues(&matrix).first().copied().unwrap_or(0.0);
        let chol = if min_eigenvalue > 0.0 { matrix.clone().cholesky() } else { None };
        Ok(Self { matrix, min_eigenvalue, chol })
    }

    /// `cI + (1/α − ω)AᵀA`.
    pub fn from_params(c: f64, alpha: f64, omega: f64, a: &DMatrix<f64>) -> Self {
        let d = a.ncols();
        let mut m = a.transpose() * a * (1.0 / alpha - omega);
        m += DMatrix::<f64>::identity(d, d) * c;
        // AᵀA is symmetric up to round-off; make it exact
        let m = (&m + m.transpose()) * 0.5;
        Self::new(m).expect("symmetrized square matrix")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn is_positive_definite(&self) -> bool {
        self.chol.is_some()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `M̂⁻¹ v`; refuses indefinite matrices.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.chol {
            Some(ch) => Ok(ch.solve(v)),
            None => Err(Error::IndefiniteMhat { min_eigenvalue: self.min_eigenvalue }),
        }
    }
}

/// `M̂` for a solver configuration.
pub fn m_hat(config: &SolverConfig, a: &DMatrix<f64>) -> MHat {
    MHat::from_params(config.c, config.alpha, config.omega, a)
}

/// Euler–Maruyama settings.
#[derive(Clone, Debug)]
pub struct SmeConfig {
    pub epsilon: f64,
    /// Integration steps per `ε`; `dt = ε / em_substeps`.
    pub em_substeps: usize,
    pub mhat: MHat,
    pub sigma_mode: SigmaMode,
    /// Base batch size `B₀`.
    pub batch: usize,
    pub schedule: Option<ScheduleSpec>,
    /// Realize an `M̂` schedule `M̂_t = M̂₀ / u_t` as a step scale `u_t` on
    /// drift and noise with fixed `M̂₀` instead. The two laws coincide.
    pub step_scale: bool,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub divergence_threshold: f64,
}

#[derive(Serialize)]
struct SmeSnapshot<'a> {
    epsilon: f64,
    em_substeps: usize,
    mhat: &'a [f64],
    sigma_mode: SigmaMode,
    batch: usize,
    schedule: &'a Option<ScheduleSpec>,
    step_scale: bool,
    horizon: f64,
    x0: &'a [f64],
}

impl SmeConfig {
    /// The SME matching a solver configuration, with 4 substeps per `ε`.
    pub fn from_solver(problem: &StochasticProblem, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate(problem)?;
        Ok(Self {
            epsilon: cfg.epsilon(),
            em_substeps: 4,
            mhat: m_hat(cfg, problem.a()),
            sigma_mode: problem.sigma_mode(),
            batch: cfg.batch,
            schedule: cfg.schedule.clone(),
            step_scale: false,
            horizon: cfg.horizon,
            x0: DVector::from_column_slice(&cfg.x0),
            divergence_threshold: cfg.divergence_threshold,
        })
    }

    pub fn dt(&self) -> f64 {
        self.epsilon / self.em_substeps as f64
    }

    /// Number of `ε`-grid intervals, `⌊T/ε⌋` (with the same integer guard
    /// as the solver).
    pub fn grid_steps(&self) -> usize {
        let p = self.horizon / self.epsilon;
        let r = p.round();
        if (p - r).abs() <= 1e-9 * r.max(1.0) {
            r as usize
        } else {
            p.floor() as usize
        }
    }

    pub fn validate(&self, problem: &StochasticProblem) -> Result<()> {
        if !(self.epsilon > 0.0) || self.em_substeps == 0 || !(self.horizon > 0.0) || self.batch == 0 {
            return Err(Error::InvalidParameter("SME needs epsilon > 0, em_substeps >= 1, T > 0, batch >= 1".into()));
        }
        if self.x0.len() != problem.dim() || self.mhat.dim() != problem.dim() {
            return Err(Error::DimensionMismatch("SME state and M̂ must match the problem dimension".into()));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        if !self.mhat.is_positive_definite() {
            return Err(Error::IndefiniteMhat { min_eigenvalue: self.mhat.min_eigenvalue() });
        }
        if let SigmaMode::Sampled(n) = self.sigma_mode {
            if n < 2 {
                return Err(Error::InvalidParameter("sampled covariance needs N >= 2".into()));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let snap = SmeSnapshot {
            epsilon: self.epsilon,
            em_substeps: self.em_substeps,
            mhat: self.mhat.matrix().as_slice(),
            sigma_mode: self.sigma_mode,
            batch: self.batch,
            schedule: &self.schedule,
            step_scale: self.step_scale,
            horizon: self.horizon,
            x0: self.x0.as_slice(),
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&snap).expect("snapshot serializes")))
    }
}

/// One Euler–Maruyama step of size `dt` with step scale `u` and batch `b`:
/// `X + M̂⁻¹ u (−∇V dt + √(ε dt / b) σ η)`.
pub fn em_step_raw(
    problem: &StochasticProblem,
    x: &DVector<f64>,
    cfg: &SmeConfig,
    dt: f64,
    batch: usize,
    u: f64,
    rng: &mut dyn RngCore,
) -> Result<DVector<f64>> {
    let grad = problem.potential_grad(x)?;
    let sigma = problem.sigma(x, cfg.sigma_mode, rng)?;
    let root = psd_sqrt(&sigma.sigma)?;
    let eta = DVector::from_fn(x.len(), |_, _| StandardNormal.sample(&mut *rng));
    let mut incr = root * eta * (cfg.epsilon * dt / batch as f64).sqrt() - grad * dt;
    incr *= u;
    Ok(x + cfg.mhat.solve(&incr)?)
}

/// One Euler–Maruyama step from time `t`, applying the configured schedule.
pub fn em_step(problem: &StochasticProblem, x: &DVector<f64>, cfg: &SmeConfig, t: f64, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
    let (batch, scale) = match &cfg.schedule {
        Some(s) => (s.batch(t, cfg.batch, cfg.epsilon)?, s.mhat_scale(t)?),
        None => (cfg.batch, 1.0),
    };
    if scale == 1.0 {
        return em_step_raw(problem, x, cfg, cfg.dt(), batch, 1.0, rng);
    }
    if cfg.step_scale {
        em_step_raw(problem, x, cfg, cfg.dt(), batch, 1.0 / scale, rng)
    } else {
        let scaled = SmeConfig { mhat: MHat::new(cfg.mhat.matrix() * scale)?, ..cfg.clone() };
        em_step_raw(problem, x, &scaled, cfg.dt(), batch, 1.0, rng)
    }
}

/// A continuous-time path sampled on a uniform grid.
#[derive(Clone, Debug)]
pub struct ContinuousTrajectory {
    pub ts: Vec<f64>,
    pub xs: Vec<DVector<f64>>,
    pub test_values: Option<Vec<f64>>,
    pub seed: u64,
    pub fingerprint: String,
    pub status: RunStatus,
}

impl ContinuousTrajectory {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// Column names and rows: `step, t, X_*, phi`.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let d = self.xs.first().map_or(0, |x| x.len());
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("X_{i}")));
        header.push("phi".into());
        let rows = (0..self.len())
            .map(|k| {
                let mut row = vec![k as f64, self.ts[k]];
                row.extend(self.xs[k].iter());
                row.push(self.test_values.as_ref().map_or(f64::NAN, |v| v[k]));
                row
            })
            .collect();
        (header, rows)
    }
}

/// Integrates the SME over `[0, T]`, recording `X` at `t_k = kε`.
pub fn run_sme(problem: &StochasticProblem, cfg: &SmeConfig, seed: u64, test_fn: Option<TestFunction>) -> Result<ContinuousTrajectory> {
    cfg.validate(problem)?;
    let steps = cfg.grid_steps();
    let mut rng = rng_from_seed(seed);
    let mut x = cfg.x0.clone();
    let mut tr = ContinuousTrajectory {
        ts: Vec::with_capacity(steps + 1),
        xs: Vec::with_capacity(steps + 1),
        test_values: test_fn.map(|_| Vec::with_capacity(steps + 1)),
        seed,
        fingerprint: cfg.fingerprint(),
        status: RunStatus::Completed,
    };
    let push = |tr: &mut ContinuousTrajectory, k: usize, x: &DVector<f64>| {
        tr.ts.push(k as f64 * cfg.epsilon);
        if let (Some(v), Some(f)) = (tr.test_values.as_mut(), test_fn) {
            v.push(f.eval_on(problem, x));
        }
        tr.xs.push(x.clone());
    };
    push(&mut tr, 0, &x);
    let dt = cfg.dt();
    'outer: for k in 0..steps {
        for j in 0..cfg.em_substeps {
            let t = k as f64 * cfg.epsilon + j as f64 * dt;
            x = em_step(problem, &x, cfg, t, &mut rng)?;
            let n = x.norm();
            if !n.is_finite() || n > cfg.divergence_threshold {
                push(&mut tr, k + 1, &x);
                tr.status = RunStatus::Diverged { step: k + 1 };
                break 'outer;
            }
        }
        push(&mut tr, k + 1, &x);
    }
    Ok(tr)
}

/// Solves `M̂ Ẋ = −∇V(X)` with classical RK4 at step `record_dt / 16`,
/// recording at multiples of `record_dt` up to `T`.
pub fn gradient_flow_reference(
    problem: &StochasticProblem,
    mhat: &MHat,
    x0: &DVector<f64>,
    horizon: f64,
    record_dt: f64,
) -> Result<ContinuousTrajectory> {
    if !(record_dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidParameter("gradient flow needs positive T and record_dt".into()));
    }
    if !mhat.is_positive_definite() {
        return Err(Error::IndefiniteMhat { min_eigenvalue: mhat.min_eigenvalue() });
    }
    let f = |x: &DVector<f64>| -> Result<DVector<f64>> { mhat.solve(&-problem.potential_grad(x)?) };
    let p = horizon / record_dt;
    let n = if (p - p.round()).abs() <= 1e-9 * p.round().max(1.0) { p.round() } else { p.floor() } as usize;
    let h = record_dt / 16.0;
    let mut x = x0.clone();
    let mut ts = vec![0.0];
    let mut xs = vec![x.clone()];
    for k in 0..n {
        for _ in 0..16 {
            let k1 = f(&x)?;
            let k2 = f(&(&x + &k1 * (0.5 * h)))?;
            let k3 = f(&(&x + &k2 * (0.5 * h)))?;
            let k4 = f(&(&x + &k3 * h))?;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        ts.push((k + 1) as f64 * record_dt);
        xs.push(x.clone());
    }
    Ok(ContinuousTrajectory { ts, xs, test_values: None, seed: 0, fingerprint: String::new(), status: RunStatus::Completed })
}

/// Smallest eigenvalue of `M̂` as a function of `c` and the `c` where it
/// crosses zero, `c₀ = −(1/α − ω) λ_min(AᵀA)` when `1/α < ω` (else 0).
pub fn definiteness_threshold(alpha: f64, omega: f64, a: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(&(a.transpose() * a));
    let coef = 1.0 / alpha - omega;
    let worst = if coef >= 0.0 { ev[0] } else { ev[ev.len() - 1] };
    (-coef * worst).max(0.0)
}
