//! Monte Carlo ensembles and the statistics built on them.
//!
//! Runs are generated in parallel in fixed-size chunks, then folded into
//! per-step Welford accumulators strictly in run-index order. Run `i` always
//! uses the seed [`split_seed`]`(base_seed, i)`, so the statistics are
//! bit-identical for any number of workers.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observable::TestFunction;
use crate::problem::StochasticProblem;
use crate::rng::split_seed;
use crate::sme::{run_sme, ContinuousTrajectory, SmeConfig};
use crate::solver::{Solver, SolverConfig, Trajectory};

const CHUNK: usize = 256;

/// What one run contributes to the statistics.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub completed: bool,
    pub ts: Vec<f64>,
    pub phi: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub z: Option<Vec<DVector<f64>>>,
    pub r_norm: Option<Vec<f64>>,
    pub ra_norm: Option<Vec<f64>>,
}

impl RunRecord {
    pub fn from_trajectory(tr: &Trajectory) -> Self {
        Self {
            completed: !tr.diverged(),
            ts: tr.ts(),
            phi: tr.test_values.clone().unwrap_or_else(|| vec![f64::NAN; tr.len()]),
            x: tr.xs.clone(),
            z: Some(tr.zs.clone()),
            r_norm: Some(tr.rs.iter().map(|r| r.norm()).collect()),
            ra_norm: Some(tr.ras.iter().map(|r| r.norm()).collect()),
        }
    }

    pub fn from_continuous(tr: &ContinuousTrajectory) -> Self {
        Self {
            completed: !tr.diverged(),
            ts: tr.ts.clone(),
            phi: tr.test_values.clone().unwrap_or_else(|| vec![f64::NAN; tr.len()]),
            x: tr.xs.clone(),
            z: None,
            r_norm: None,
            ra_norm: None,
        }
    }
}

/// Per-step ensemble statistics over the completed runs.
///
/// Standard deviations use the `n − 1` normalization and are `NaN` when
/// fewer than two runs completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub ts: Vec<f64>,
    pub mean_phi: Vec<f64>,
    pub std_phi: Vec<f64>,
    pub mean_x: Vec<DVector<f64>>,
    pub std_x: Vec<DVector<f64>>,
    pub mean_z: Option<Vec<DVector<f64>>>,
    pub std_z: Option<Vec<DVector<f64>>>,
    pub mean_r: Option<Vec<f64>>,
    pub std_r: Option<Vec<f64>>,
    pub mean_ra: Option<Vec<f64>>,
    pub std_ra: Option<Vec<f64>>,
    /// Runs requested.
    pub requested: usize,
    /// Runs aggregated (`requested − diverged`).
    pub runs: usize,
    pub diverged: usize,
    pub seeds: Vec<u64>,
}

impl EnsembleStats {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn std_defined(&self) -> bool {
        self.runs >= 2
    }

    /// Monte Carlo standard error of `mean_phi[k]`.
    pub fn se_phi(&self, k: usize) -> f64 {
        self.std_phi[k] / (self.runs as f64).sqrt()
    }

    /// Monte Carlo standard error of `mean_x[k]`.
    pub fn se_x(&self, k: usize) -> DVector<f64> {
        &self.std_x[k] / (self.runs as f64).sqrt()
    }

    /// Divergence-dominated: more than half the runs diverged.
    pub fn divergence_dominated(&self) -> bool {
        2 * self.diverged > self.requested
    }

    /// Column names and rows: `t, mean_phi, std_phi, se_phi, mean_x_*, std_x_*`
    /// plus the z and residual columns when present.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let d = self.mean_x.first().map_or(0, |x| x.len());
        let mut header: Vec<String> = ["t", "mean_phi", "std_phi", "se_phi"].map(String::from).to_vec();
        header.extend((0..d).map(|i| format!("mean_x_{i}")));
        header.extend((0..d).map(|i| format!("std_x_{i}")));
        let m = self.mean_z.as_ref().and_then(|z| z.first()).map_or(0, |z| z.len());
        if self.mean_z.is_some() {
            header.extend((0..m).map(|i| format!("mean_z_{i}")));
            header.extend((0..m).map(|i| format!("std_z_{i}")));
        }
        if self.mean_r.is_some() {
            header.extend(["mean_r_norm", "std_r_norm", "mean_ralpha_norm", "std_ralpha_norm"].map(String::from));
        }
        let rows = (0..self.len())
            .map(|k| {
                let mut row = vec![self.ts[k], self.mean_phi[k], self.std_phi[k], self.se_phi(k)];
                row.extend(self.mean_x[k].iter());
                row.extend(self.std_x[k].iter());
                if let (Some(mz), Some(sz)) = (&self.mean_z, &self.std_z) {
                    row.extend(mz[k].iter());
                    row.extend(sz[k].iter());
                }
                if let (Some(mr), Some(sr), Some(ma), Some(sa)) = (&self.mean_r, &self.std_r, &self.mean_ra, &self.std_ra) {
                    row.extend([mr[k], sr[k], ma[k], sa[k]]);
                }
                row
            })
            .collect();
        (header, rows)
    }
}

/// Welford accumulator over a flat feature vector per grid point.
struct Accumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(len: usize) -> Self {
        Self { n: 0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(v) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    fn std(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![f64::NAN; self.m2.len()];
        }
        self.m2.iter().map(|s| (s / (self.n - 1) as f64).sqrt()).collect()
    }
}

#[derive(Clone, Copy)]
struct Layout {
    steps: usize,
    d: usize,
    m: Option<usize>,
    residuals: bool,
}

impl Layout {
    fn of(r: &RunRecord) -> Self {
        Self {
            steps: r.ts.len(),
            d: r.x.first().map_or(0, |x| x.len()),
            m: r.z.as_ref().map(|z| z.first().map_or(0, |v| v.len())),
            residuals: r.r_norm.is_some(),
        }
    }

    fn width(&self) -> usize {
        1 + self.d + self.m.map_or(0, |m| m) + if self.residuals { 2 } else { 0 }
    }

    fn flatten(&self, r: &RunRecord, out: &mut Vec<f64>) {
        out.clear();
        for k in 0..self.steps {
            out.push(r.phi[k]);
            out.extend(r.x[k].iter());
            if let Some(z) = &r.z {
                out.extend(z[k].iter());
            }
            if let (Some(a), Some(b)) = (&r.r_norm, &r.ra_norm) {
                out.push(a[k]);
                out.push(b[k]);
            }
        }
    }
}

/// The seeds used by an ensemble, in run order.
pub fn ensemble_seeds(base_seed: u64, runs: usize) -> Vec<u64> {
    (0..runs as u64).map(|i| split_seed(base_seed, i)).collect()
}

/// Runs `runs` independent trajectories through `runner(seed)` and folds
/// them in run-index order. `workers = None` uses the global thread pool.
pub fn run_ensemble<F>(runs: usize, base_seed: u64, workers: Option<usize>, runner: F) -> Result<EnsembleStats>
where
    F: Fn(u64) -> Result<RunRecord> + Sync,
{
    if runs == 0 {
        return Err(Error::InvalidParameter("ensemble needs at least one run".into()));
    }
    let seeds = ensemble_seeds(base_seed, runs);
    let pool = match workers {
        Some(w) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    let mut acc: Option<(Layout, Accumulator, Vec<f64>, Vec<f64>)> = None;
    let mut diverged = 0;
    for chunk in seeds.chunks(CHUNK) {
        let work = || chunk.par_iter().map(|&s| runner(s)).collect::<Vec<_>>();
        let results = match &pool {
            Some(p) => p.install(work),
            None => work(),
        };
        for rec in results {
            let rec = rec?;
            if !rec.completed {
                diverged += 1;
                continue;
            }
            let (layout, a, buf, _) = acc.get_or_insert_with(|| {
                let l = Layout::of(&rec);
                (l, Accumulator::new(l.steps * l.width()), Vec::new(), rec.ts.clone())
            });
            if Layout::of(&rec).steps != layout.steps {
                return Err(Error::GridMismatch("runs produced different grid lengths".into()));
            }
            layout.flatten(&rec, buf);
            a.push(buf);
        }
    }
    let Some((layout, a, _, ts)) = acc else {
        return Err(Error::AllDiverged { runs });
    };
    let std = a.std();
    let w = layout.width();
    let d = layout.d;
    let col = |v: &[f64], k: usize, off: usize, len: usize| DVector::from_column_slice(&v[k * w + off..k * w + off + len]);
    let steps = layout.steps;
    let pick = |v: &[f64], off: usize| (0..steps).map(|k| v[k * w + off]).collect::<Vec<_>>();
    let mut stats = EnsembleStats {
        ts,
        mean_phi: pick(&a.mean, 0),
        std_phi: pick(&std, 0),
        mean_x: (0..steps).map(|k| col(&a.mean, k, 1, d)).collect(),
        std_x: (0..steps).map(|k| col(&std, k, 1, d)).collect(),
        mean_z: None,
        std_z: None,
        mean_r: None,
        std_r: None,
        mean_ra: None,
        std_ra: None,
        requested: runs,
        runs: a.n,
        diverged,
        seeds,
    };
    let mut off = 1 + d;
    if let Some(m) = layout.m {
        stats.mean_z = Some((0..steps).map(|k| col(&a.mean, k, off, m)).collect());
        stats.std_z = Some((0..steps).map(|k| col(&std, k, off, m)).collect());
        off += m;
    }
    if layout.residuals {
        stats.mean_r = Some(pick(&a.mean, off));
        stats.std_r = Some(pick(&std, off));
        stats.mean_ra = Some(pick(&a.mean, off + 1));
        stats.std_ra = Some(pick(&std, off + 1));
    }
    Ok(stats)
}

/// Ensemble of discrete G-sADMM runs.
pub fn admm_ensemble(
    problem: &StochasticProblem,
    cfg: &SolverConfig,
    runs: usize,
    base_seed: u64,
    workers: Option<usize>,
    test_fn: TestFunction,
) -> Result<EnsembleStats> {
    let solver = Solver::new(problem, cfg)?;
    run_ensemble(runs, base_seed, workers, |seed| {
        solver.run(seed, Some(test_fn)).map(|t| RunRecord::from_trajectory(&t))
    })
}

/// Ensemble of SME paths.
pub fn sme_ensemble(
    problem: &StochasticProblem,
    cfg: &SmeConfig,
    runs: usize,
    base_seed: u64,
    workers: Option<usize>,
    test_fn: TestFunction,
) -> Result<EnsembleStats> {
    cfg.validate(problem)?;
    run_ensemble(runs, base_seed, workers, |seed| {
        run_sme(problem, cfg, seed, Some(test_fn)).map(|t| RunRecord::from_continuous(&t))
    })
}

fn check_grids(a: &EnsembleStats, b: &EnsembleStats) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!("grid lengths {} and {}", a.len(), b.len())));
    }
    for (s, t) in a.ts.iter().zip(&b.ts) {
        if (s - t).abs() > 1e-12 * (1.0 + s.abs()) {
            return Err(Error::GridMismatch(format!("grid times {s} and {t}")));
        }
    }
    Ok(())
}

/// Weak error with the Monte Carlo error at the maximizing step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakError {
    pub err: f64,
    /// `√(se_a² + se_b²)` at the maximizing step.
    pub stderr: f64,
    pub step: usize,
}

/// `max_{k ≥ 1} |E φ(x_k) − E φ(X_{kε})|`.
pub fn weak_error(a: &EnsembleStats, b: &EnsembleStats) -> Result<f64> {
    Ok(weak_error_detail(a, b)?.err)
}

pub fn weak_error_detail(a: &EnsembleStats, b: &EnsembleStats) -> Result<WeakError> {
    check_grids(a, b)?;
    let mut best = WeakError { err: 0.0, stderr: 0.0, step: 0 };
    for k in 1..a.len() {
        let e = (a.mean_phi[k] - b.mean_phi[k]).abs();
        if e > best.err {
            let se = (a.se_phi(k).powi(2) + b.se_phi(k).powi(2)).sqrt();
            best = WeakError { err: e, stderr: se, step: k };
        }
    }
    Ok(best)
}

/// Least-squares slope with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub stderr: f64,
    pub points: usize,
}

/// Slope of `log₂ err` against `−m`, so errors `∝ 2^{−pm}` give `p`.
/// Non-positive or non-finite errors are dropped.
pub fn convergence_order(m_values: &[f64], errs: &[f64]) -> Result<OrderFit> {
    if m_values.len() != errs.len() {
        return Err(Error::DimensionMismatch("m values and errors differ in length".into()));
    }
    let pts: Vec<(f64, f64)> = m_values
        .iter()
        .zip(errs)
        .filter(|(_, e)| **e > 0.0 && e.is_finite())
        .map(|(m, e)| (-m, e.log2()))
        .collect();
    let n = pts.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} usable points, need 3")));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all m values equal".into()));
    }
    let slope = sxy / sxx;
    let ssr: f64 = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let stderr = (ssr / (nf - 2.0) / sxx).sqrt();
    Ok(OrderFit { slope, stderr, points: n })
}

/// Weak errors over a resolution sweep and the fitted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorReport {
    pub m_values: Vec<i32>,
    pub errs: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub slope: f64,
    pub slope_ci: f64,
}

impl WeakErrorReport {
    pub fn new(m_values: Vec<i32>, points: &[WeakError]) -> Result<Self> {
        let errs: Vec<f64> = points.iter().map(|p| p.err).collect();
        let ms: Vec<f64> = m_values.iter().map(|&m| m as f64).collect();
        let fit = convergence_order(&ms, &errs)?;
        Ok(Self { m_values, errs, stderrs: points.iter().map(|p| p.stderr).collect(), slope: fit.slope, slope_ci: fit.stderr })
    }

    /// Columns `m, err, stderr`.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let rows = (0..self.m_values.len()).map(|i| vec![self.m_values[i] as f64, self.errs[i], self.stderrs[i]]).collect();
        (vec!["m".into(), "err".into(), "stderr".into()], rows)
    }
}

/// Residual magnitudes over a resolution sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub m_values: Vec<i32>,
    pub max_mean_r: Vec<f64>,
    pub max_std_r: Vec<f64>,
    pub max_mean_ra: Vec<f64>,
    pub max_std_ra: Vec<f64>,
    /// Fitted decrease of `log₂ max_k E‖r_k‖` per doubling of `ρ`.
    pub rate_r: f64,
    pub rate_ra: f64,
    pub rate_std_r: f64,
    pub rate_std_ra: f64,
}

impl ResidualReport {
    /// Columns `m, max_mean_r, max_std_r, max_mean_ralpha, max_std_ralpha`.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let header = ["m", "max_mean_r", "max_std_r", "max_mean_ralpha", "max_std_ralpha"].map(String::from).to_vec();
        let rows = (0..self.m_values.len())
            .map(|i| vec![self.m_values[i] as f64, self.max_mean_r[i], self.max_std_r[i], self.max_mean_ra[i], self.max_std_ra[i]])
            .collect();
        (header, rows)
    }
}

fn max_after_first(v: &[f64]) -> f64 {
    v.iter().skip(1).copied().fold(0.0, f64::max)
}

/// Fits residual decay rates from ensembles at `ρ = 2^m / T`.
pub fn residual_scaling(m_values: &[i32], stats: &[EnsembleStats]) -> Result<ResidualReport> {
    if m_values.len() != stats.len() {
        return Err(Error::DimensionMismatch("one ensemble per m value".into()));
    }
    if stats.len() < 3 {
        return Err(Error::InsufficientData("residual scaling needs at least 3 resolutions".into()));
    }
    let get = |f: &dyn Fn(&EnsembleStats) -> Option<&Vec<f64>>| -> Result<Vec<f64>> {
        stats
            .iter()
            .map(|s| f(s).map(|v| max_after_first(v)).ok_or_else(|| Error::Unsupported("ensemble carries no residuals".into())))
            .collect()
    };
    let max_mean_r = get(&|s| s.mean_r.as_ref())?;
    let max_std_r = get(&|s| s.std_r.as_ref())?;
    let max_mean_ra = get(&|s| s.mean_ra.as_ref())?;
    let max_std_ra = get(&|s| s.std_ra.as_ref())?;
    let ms: Vec<f64> = m_values.iter().map(|&m| m as f64).collect();
    let rate = |v: &[f64]| convergence_order(&ms, v).map(|f| f.slope);
    Ok(ResidualReport {
        m_values: m_values.to_vec(),
        rate_r: rate(&max_mean_r)?,
        rate_ra: rate(&max_mean_ra)?,
        rate_std_r: rate(&max_std_r)?,
        rate_std_ra: rate(&max_std_ra)?,
        max_mean_r,
        max_std_r,
        max_mean_ra,
        max_std_ra,
    })
}

/// `ε^{−1/2}`-rescaled standard deviations and their largest pairwise gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdScalingReport {
    pub epsilons: Vec<f64>,
    /// Comparison times (the coarsest grid restricted to the window).
    pub ts: Vec<f64>,
    /// `curves_x[e][j]`: rescaled std of component-wise `x` at `ts[j]`.
    pub curves_x: Vec<Vec<DVector<f64>>>,
    pub curves_z: Option<Vec<Vec<DVector<f64>>>>,
    /// Largest `|a − b| / ((a + b)/2)` over pairs, times and components.
    pub max_gap_x: f64,
    pub max_gap_z: Option<f64>,
}

fn interp(ts: &[f64], vs: &[DVector<f64>], t: f64) -> DVector<f64> {
    let i = ts.partition_point(|&s| s < t - 1e-12);
    if i < ts.len() && (ts[i] - t).abs() <= 1e-12 * (1.0 + t.abs()) {
        return vs[i].clone();
    }
    let i = i.clamp(1, ts.len() - 1);
    let w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
    &vs[i - 1] * (1.0 - w) + &vs[i] * w
}

/// Relative gap used for curve comparisons: `|a − b| / ((|a| + |b|)/2)`.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let s = 0.5 * (a.abs() + b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

fn max_pairwise_gap(curves: &[Vec<DVector<f64>>]) -> f64 {
    let mut gap: f64 = 0.0;
    for i in 0..curves.len() {
        for j in (i + 1)..curves.len() {
            for (a, b) in curves[i].iter().zip(&curves[j]) {
                for (x, y) in a.iter().zip(b.iter()) {
                    gap = gap.max(relative_gap(*x, *y));
                }
            }
        }
    }
    gap
}

/// Rescales `std x_k` (and `std z_k` when present) by `ε^{−1/2}` and
/// compares the curves on `window = (t0, t1)`.
pub fn std_scaling(epsilons: &[f64], stats: &[EnsembleStats], window: (f64, f64)) -> Result<StdScalingReport> {
    if epsilons.len() != stats.len() || stats.len() < 2 {
        return Err(Error::InsufficientData("std scaling needs at least two ensembles, one per epsilon".into()));
    }
    let coarse = epsilons
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty");
    let tol = 1e-12;
    let ts: Vec<f64> = stats[coarse].ts.iter().copied().filter(|&t| t >= window.0 - tol && t <= window.1 + tol).collect();
    if ts.is_empty() {
        return Err(Error::InsufficientData("no grid times inside the window".into()));
    }
    let rescale = |series: &[DVector<f64>], s: &EnsembleStats, eps: f64| -> Vec<DVector<f64>> {
        ts.iter().map(|&t| interp(&s.ts, series, t) / eps.sqrt()).collect()
    };
    let curves_x: Vec<Vec<DVector<f64>>> = stats.iter().zip(epsilons).map(|(s, &e)| rescale(&s.std_x, s, e)).collect();
    let curves_z: Option<Vec<Vec<DVector<f64>>>> = stats
        .iter()
        .zip(epsilons)
        .map(|(s, &e)| s.std_z.as_ref().map(|z| rescale(z, s, e)))
        .collect();
    let max_gap_x = max_pairwise_gap(&curves_x);
    let max_gap_z = curves_z.as_ref().map(|c| max_pairwise_gap(c));
    Ok(StdScalingReport { epsilons: epsilons.to_vec(), ts, curves_x, curves_z, max_gap_x, max_gap_z })
}

/// First grid time where `‖E x − x*‖ ≤ ‖std x‖`; `None` if it never happens.
pub fn transition_time(stats: &EnsembleStats, x_star: &DVector<f64>) -> Option<f64> {
    (0..stats.len()).find(|&k| (&stats.mean_x[k] - x_star).norm() <= stats.std_x[k].norm()).map(|k| stats.ts[k])
}

/// `½ log(2x₀² / (σ²ε) + 1)` for `dX = −X dt + √ε σ dW`.
pub fn transition_time_closed_form(x0: f64, sigma: f64, epsilon: f64) -> f64 {
    0.5 * (2.0 * x0 * x0 / (sigma * sigma * epsilon) + 1.0).ln()
}

/// Largest `|Δ mean_x| / pooled se` over steps `k ≥ 1` and components.
pub fn max_mean_zscore(a: &EnsembleStats, b: &EnsembleStats) -> Result<f64> {
    check_grids(a, b)?;
    let mut z: f64 = 0.0;
    for k in 1..a.len() {
        let (sa, sb) = (a.se_x(k), b.se_x(k));
        for i in 0..sa.len() {
            let se = (sa[i].powi(2) + sb[i].powi(2)).sqrt();
            let diff = (a.mean_x[k][i] - b.mean_x[k][i]).abs();
            if se > 0.0 {
                z = z.max(diff / se);
            } else if diff > 0.0 {
                z = f64::INFINITY;
            }
        }
    }
    Ok(z)
}

/// Largest relative gap of `std x_k` between two ensembles on a window.
pub fn max_std_gap(a: &EnsembleStats, b: &EnsembleStats, window: (f64, f64)) -> Result<f64> {
    check_grids(a, b)?;
    let mut g: f64 = 0.0;
    for k in 0..a.len() {
        let t = a.ts[k];
        if t < window.0 - 1e-12 || t > window.1 + 1e-12 {
            continue;
        }
        for (x, y) in a.std_x[k].iter().zip(b.std_x[k].iter()) {
            g = g.max(relative_gap(*x, *y));
        }
    }
    Ok(g)
}

/// `max_{k ≥ 1} |E φ_a − E φ_b| / |E φ_b|`.
pub fn max_relative_phi_gap(a: &EnsembleStats, b: &EnsembleStats) -> Result<f64> {
    check_grids(a, b)?;
    Ok((1..a.len()).map(|k| (a.mean_phi[k] - b.mean_phi[k]).abs() / b.mean_phi[k].abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_problem, GKind, PresetParams};

    fn record(vals: &[f64]) -> RunRecord {
        RunRecord {
            completed: true,
            ts: (0..vals.len()).map(|k| k as f64 * 0.1).collect(),
            phi: vals.to_vec(),
            x: vals.iter().map(|&v| DVector::from_element(1, v)).collect(),
            z: None,
            r_norm: None,
            ra_norm: None,
        }
    }

    #[test]
    fn single_run_mean_is_the_run() {
        let s = run_ensemble(1, 5, Some(1), |_| Ok(record(&[1.0, 2.0, 3.0]))).unwrap();
        assert_eq!(s.mean_phi, vec![1.0, 2.0, 3.0]);
        assert!(!s.std_defined());
        assert!(s.std_phi.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn diverged_runs_are_counted_not_averaged() {
        let s = run_ensemble(4, 1, Some(2), |seed| {
            let mut r = record(&[1.0, 1.0]);
            r.completed = seed % 2 == 0;
            Ok(r)
        })
        .unwrap();
        assert_eq!(s.runs + s.diverged, 4);
        let all = run_ensemble(3, 1, None, |_| {
            let mut r = record(&[1.0]);
            r.completed = false;
            Ok(r)
        });
        assert!(matches!(all, Err(Error::AllDiverged { runs: 3 })));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let p = build_problem(&PresetParams::toy(GKind::Quadratic)).unwrap();
        let cfg = SolverConfig { alpha: 1.5, ..Default::default() }.with_resolution(4);
        let a = admm_ensemble(&p, &cfg, 300, 9, Some(1), TestFunction::XPlusXSquared).unwrap();
        let b = admm_ensemble(&p, &cfg, 300, 9, Some(3), TestFunction::XPlusXSquared).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_ensembles_have_zero_weak_error() {
        let s = run_ensemble(3, 2, None, |seed| Ok(record(&[0.0, seed as f64 * 1e-20, 2.0]))).unwrap();
        assert_eq!(weak_error(&s, &s).unwrap(), 0.0);
        let mut t = s.clone();
        t.ts.pop();
        t.mean_phi.pop();
        assert!(matches!(weak_error(&s, &t), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn order_fit_examples() {
        let ms = [4.0, 5.0, 6.0, 7.0];
        for p in [0.5, 1.0, 2.0] {
            let errs: Vec<f64> = ms.iter().map(|m| 3.0 * 2f64.powf(-p * m)).collect();
            assert!((convergence_order(&ms, &errs).unwrap().slope - p).abs() < 1e-12);
        }
        let flat = convergence_order(&ms, &[0.2; 4]).unwrap();
        assert!(flat.slope.abs() < 1e-12);
        assert!(matches!(convergence_order(&ms, &[0.1, 0.0, -1.0, 0.2]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn exact_sqrt_eps_family_collapses() {
        let mk = |eps: f64| {
            let n = (0.5 / eps).round() as usize;
            let ts: Vec<f64> = (0..=n).map(|k| k as f64 * eps).collect();
            let std_x: Vec<DVector<f64>> = ts.iter().map(|t| DVector::from_element(1, (1.0 + t) * eps.sqrt())).collect();
            EnsembleStats {
                mean_phi: vec![0.0; ts.len()],
                std_phi: vec![0.0; ts.len()],
                mean_x: std_x.clone(),
                std_x,
                ts,
                mean_z: None,
                std_z: None,
                mean_r: None,
                std_r: None,
                mean_ra: None,
                std_ra: None,
                requested: 2,
                runs: 2,
                diverged: 0,
                seeds: vec![],
            }
        };
        let eps = [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];
        let stats: Vec<_> = eps.iter().map(|&e| mk(e)).collect();
        let rep = std_scaling(&eps, &stats, (0.1, 0.5)).unwrap();
        assert!(rep.max_gap_x < 1e-12, "{}", rep.max_gap_x);
    }

    #[test]
    fn transition_time_never_without_noise() {
        let s = run_ensemble(2, 0, None, |_| Ok(record(&[1.0, 0.5, 0.25]))).unwrap();
        assert_eq!(transition_time(&s, &DVector::zeros(1)), None);
        assert!((transition_time_closed_form(1.0, 1.0, 0.01) - 2.652).abs() < 1e-3);
        assert!(transition_time_closed_form(1.0, 1.0, 0.02) < transition_time_closed_form(1.0, 1.0, 0.01));
    }
}
