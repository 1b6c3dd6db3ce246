//! Adaptive step, batch and preconditioner schedules for the two-phase regime.
//!
//! Before the transition time `t*` the drift dominates and the defaults are
//! kept. After `t*` the fluctuations dominate and either the batch size grows
//! or the effective step `u_t` shrinks, which is the same as growing `M̂`:
//! `M̂_t = M̂₀ / u_t`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;

/// Floor applied to the feedback control.
pub const U_MIN: f64 = 1e-6;

/// A time-dependent schedule attached to a solver or SME configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Constant,
    /// `u_t = min(1, 2 E V / (ε σ²))` with `E V` estimated from the ensemble.
    /// Needs ensemble-level state, so it is only usable in lockstep runs.
    FeedbackU {
        sigma: f64,
        #[serde(default = "default_window")]
        window: usize,
    },
    /// `u_t = 1 / (1 + a(t − t*))` after `t*`.
    OpenLoopU { t_star: f64, a: f64 },
    /// Batch growth after `t*` (see [`batch_growth`]).
    BatchGrowth { t_star: f64, sigma: f64, x_tstar: f64 },
    /// `M̂_t = M̂₀ (1 + a·max(0, t − t*))`.
    MhatGrowth { t_star: f64, a: f64 },
}

fn default_window() -> usize {
    10
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match *self {
            ScheduleSpec::Constant => Ok(()),
            ScheduleSpec::FeedbackU { sigma, window } => {
                if !(sigma > 0.0) || window == 0 {
                    return bad("feedback_u needs sigma > 0 and window >= 1");
                }
                Ok(())
            }
            ScheduleSpec::OpenLoopU { t_star, a } | ScheduleSpec::MhatGrowth { t_star, a } => {
                if !(a > 0.0) || !t_star.is_finite() {
                    return bad("schedule needs a > 0 and finite t_star");
                }
                Ok(())
            }
            ScheduleSpec::BatchGrowth { t_star, sigma, x_tstar } => {
                if !t_star.is_finite() || !(sigma > 0.0) {
                    return bad("batch_growth needs finite t_star and sigma > 0");
                }
                if x_tstar == 0.0 {
                    return Err(Error::ScheduleUndefined("batch_growth with X_t* = 0".into()));
                }
                Ok(())
            }
        }
    }

    /// True when the schedule is a pure function of time.
    pub fn is_open_loop(&self) -> bool {
        !matches!(self, ScheduleSpec::FeedbackU { .. })
    }

    /// Factor `s(t) ≥ 1` with `M̂_t = s(t) M̂₀`.
    pub fn mhat_scale(&self, t: f64) -> Result<f64> {
        match *self {
            ScheduleSpec::OpenLoopU { t_star, a } => Ok(1.0 / open_loop_u(t, t_star, a)),
            ScheduleSpec::MhatGrowth { t_star, a } => Ok(1.0 + a * (t - t_star).max(0.0)),
            ScheduleSpec::FeedbackU { .. } => {
                Err(Error::Unsupported("feedback_u needs an ensemble estimate of E V".into()))
            }
            _ => Ok(1.0),
        }
    }

    /// Batch size at time `t` given the base size.
    pub fn batch(&self, t: f64, b0: usize, epsilon: f64) -> Result<usize> {
        match *self {
            ScheduleSpec::BatchGrowth { t_star, sigma, x_tstar } => batch_growth(t, t_star, b0, sigma, epsilon, x_tstar),
            _ => Ok(b0),
        }
    }
}

/// Feedback control `min(1, 2·EV/(ε σ²))`, floored at [`U_MIN`].
pub fn feedback_u(ev: f64, epsilon: f64, sigma: f64) -> Result<f64> {
    feedback_u_with_floor(ev, epsilon, sigma, U_MIN)
}

pub fn feedback_u_with_floor(ev: f64, epsilon: f64, sigma: f64, u_min: f64) -> Result<f64> {
    if !(ev >= 0.0) || !(sigma > 0.0) || !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "feedback_u needs EV >= 0, sigma > 0, epsilon > 0 (got {ev}, {sigma}, {epsilon})"
        )));
    }
    Ok((2.0 * ev / (epsilon * sigma * sigma)).min(1.0).max(u_min))
}

/// `1 / (1 + a(t − t*))` for `t ≥ t*`, 1 before.
pub fn open_loop_u(t: f64, t_star: f64, a: f64) -> f64 {
    if t <= t_star {
        1.0
    } else {
        1.0 / (1.0 + a * (t - t_star))
    }
}

/// `B_t = B₀ (σ²ε / (2 X_{t*})) (e^{2(t−t*)} − 1)` after `t*`, clamped below
/// by `B₀`. The formula divides by `X_{t*}` itself, as printed; a negative
/// `X_{t*}` therefore just keeps `B₀`.
pub fn batch_growth(t: f64, t_star: f64, b0: usize, sigma: f64, epsilon: f64, x_tstar: f64) -> Result<usize> {
    if x_tstar == 0.0 {
        return Err(Error::ScheduleUndefined("batch_growth with X_t* = 0".into()));
    }
    let b0 = b0.max(1);
    if t <= t_star {
        return Ok(b0);
    }
    let raw = b0 as f64 * (sigma * sigma * epsilon / (2.0 * x_tstar)) * ((2.0 * (t - t_star)).exp() - 1.0);
    // `as` saturates for huge values
    Ok((raw.round() as usize).max(b0))
}

/// `base · (1 + a·max(0, t − t*))`; `base` must be positive definite.
pub fn mhat_schedule(base: &DMatrix<f64>, t: f64, t_star: f64, a: f64) -> Result<DMatrix<f64>> {
    let ev = symmetric_eigenvalues(base);
    let min = ev.first().copied().unwrap_or(0.0);
    if !(min > 0.0) {
        return Err(Error::IndefiniteMhat { min_eigenvalue: min });
    }
    Ok(base * (1.0 + a * (t - t_star).max(0.0)))
}

/// Policies compared by [`schedule_demo`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Constant,
    FeedbackU,
    OpenLoopU,
    BatchGrowth,
}

/// The solvable 1-D model `dX = −u a(X − b) dt + u √(ε/B) σ dW`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleDemoParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub x0: f64,
    pub horizon: f64,
    pub b0: usize,
    pub em_substeps: usize,
    pub runs: usize,
    pub window: usize,
    pub policies: Vec<Policy>,
}

impl Default for ScheduleDemoParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            sigma: 1.0,
            epsilon: 0.01,
            x0: 1.0,
            horizon: 8.0,
            b0: 1,
            em_substeps: 4,
            runs: 2000,
            window: 10,
            policies: vec![Policy::Constant, Policy::FeedbackU, Policy::OpenLoopU, Policy::BatchGrowth],
        }
    }
}

impl ScheduleDemoParams {
    /// `t* = log(2a(x₀−b)²/(σ²ε) + 1) / (2a)`.
    pub fn transition_time(&self) -> f64 {
        let d = self.x0 - self.b;
        (2.0 * self.a * d * d / (self.sigma * self.sigma * self.epsilon) + 1.0).ln() / (2.0 * self.a)
    }

    fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !(self.sigma > 0.0) || !(self.epsilon > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter("schedule demo needs a, sigma, epsilon, T > 0".into()));
        }
        if self.runs < 2 || self.em_substeps == 0 || self.window == 0 || self.b0 == 0 {
            return Err(Error::InvalidParameter("schedule demo needs runs >= 2 and positive substeps, window, B0".into()));
        }
        Ok(())
    }
}

/// Ensemble-mean objective `E V(X_t)` per policy on the `ε` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDemoReport {
    pub ts: Vec<f64>,
    pub t_star: f64,
    pub policies: Vec<Policy>,
    /// `ev[p][k]` for policy `p` at `ts[k]`.
    pub ev: Vec<Vec<f64>>,
    pub terminal_ev: Vec<f64>,
}

impl ScheduleDemoReport {
    pub fn table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut header = vec!["t".to_string()];
        header.extend(self.policies.iter().map(|p| format!("ev_{}", serde_json::to_value(p).unwrap().as_str().unwrap())));
        let rows = (0..self.ts.len())
            .map(|k| std::iter::once(self.ts[k]).chain(self.ev.iter().map(|e| e[k])).collect())
            .collect();
        (header, rows)
    }
}

/// Runs all paths of each policy in lockstep so the feedback policy can
/// use the ensemble estimate of `E V`, smoothed over the last `window`
/// grid values.
pub fn schedule_demo(p: &ScheduleDemoParams, base_seed: u64) -> Result<ScheduleDemoReport> {
    use rand_distr::{Distribution, StandardNormal};

    p.validate()?;
    let t_star = p.transition_time();
    let steps = (p.horizon / p.epsilon).round() as usize;
    let dt = p.epsilon / p.em_substeps as f64;
    let ts: Vec<f64> = (0..=steps).map(|k| k as f64 * p.epsilon).collect();
    let v = |x: f64| 0.5 * p.a * (x - p.b) * (x - p.b);
    // X_{t*} from the noise-free mean path
    let x_tstar = (p.x0 - p.b) * (-p.a * t_star).exp();
    let mut all_ev = Vec::new();
    for (pi, policy) in p.policies.iter().enumerate() {
        let mut rngs: Vec<_> = (0..p.runs as u64)
            .map(|i| crate::rng::rng_from_seed(crate::rng::split_seed(base_seed ^ (pi as u64 + 1), i)))
            .collect();
        let mut xs = vec![p.x0; p.runs];
        let mut ev = vec![v(p.x0)];
        for k in 0..steps {
            let t = k as f64 * p.epsilon;
            let recent = &ev[ev.len().saturating_sub(p.window)..];
            let ev_est = recent.iter().sum::<f64>() / recent.len() as f64;
            let (u, batch) = match policy {
                Policy::Constant => (1.0, p.b0),
                Policy::FeedbackU => (feedback_u(ev_est, p.epsilon, p.sigma)?, p.b0),
                Policy::OpenLoopU => (open_loop_u(t, t_star, p.a), p.b0),
                Policy::BatchGrowth => (1.0, batch_growth(t, t_star, p.b0, p.sigma, p.epsilon, x_tstar)?),
            };
            let noise = u * (p.epsilon * dt / batch as f64).sqrt() * p.sigma;
            for (x, rng) in xs.iter_mut().zip(rngs.iter_mut()) {
                for _ in 0..p.em_substeps {
                    let eta: f64 = StandardNormal.sample(rng);
                    *x += -u * p.a * (*x - p.b) * dt + noise * eta;
                }
            }
            ev.push(xs.iter().map(|&x| v(x)).sum::<f64>() / p.runs as f64);
        }
        all_ev.push(ev);
    }
    let terminal_ev = all_ev.iter().map(|e| *e.last().expect("nonempty")).collect();
    Ok(ScheduleDemoReport { ts, t_star, policies: p.policies.clone(), ev: all_ev, terminal_ev })
}
