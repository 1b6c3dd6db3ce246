//! Stochastic composite problems `min E_ξ f(x, ξ) + g(Ax)`.
//!
//! A [`StochasticProblem`] bundles a loss oracle (samples, per-sample values,
//! gradients and Hessians, plus closed-form means when they exist), a
//! [`Regularizer`] acting on `z = Ax`, and the constraint matrix `A`. The
//! oracles are immutable; randomness always comes from a caller-supplied RNG.
//!
//! Built-in losses:
//! - [`ToyLoss`]: `f(x, ξ) = (ξ+1)x⁴ + (2+ξ)x² − (1+ξ)x` with `ξ = ±1`.
//! - [`RegressionLoss`]: `f(x, ξ) = ½(ξ_inᵀx − ξ_obs)²` with uniform inputs on
//!   `[−½, ½]^d` and Gaussian label noise.
//! - [`GaussianQuadraticLoss`]: `½a‖x − b‖² + s ηᵀx`, the solvable model used
//!   by the schedule and transition-time tooling.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, asymmetry, symmetric_eigenvalues, PSD_TOL};

/// One draw of the random element `ξ`, flattened into a vector.
pub type Sample = DVector<f64>;

/// Stochastic loss `f(x, ξ)` together with whatever closed forms it knows.
pub trait LossOracle: Send + Sync + fmt::Debug {
    /// Input dimension `d`.
    fn dim(&self) -> usize;

    fn sample(&self, rng: &mut dyn RngCore) -> Sample;

    fn value(&self, x: &DVector<f64>, xi: &Sample) -> f64;

    fn gradient(&self, x: &DVector<f64>, xi: &Sample) -> DVector<f64>;

    fn hessian(&self, _x: &DVector<f64>, _xi: &Sample) -> Option<DMatrix<f64>> {
        None
    }

    /// True when `f(·, ξ)` is quadratic for every `ξ`, so a single Newton
    /// step solves any quadratic-regularized subproblem exactly.
    fn is_quadratic(&self) -> bool {
        false
    }

    fn mean_value(&self, _x: &DVector<f64>) -> Option<f64> {
        None
    }

    fn mean_gradient(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn mean_hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Closed-form gradient-noise covariance `Σ(x)`.
    fn covariance(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// `f(x, ξ) = (ξ+1)x⁴ + (2+ξ)x² − (1+ξ)x`, `ξ ∈ {−1, +1}` equiprobable.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyLoss;

impl ToyLoss {
    fn xi(s: &Sample) -> f64 {
        s[0]
    }
}

impl LossOracle for ToyLoss {
    fn dim(&self) -> usize {
        1
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Sample {
        let xi = if rng.random::<bool>() { 1.0 } else { -1.0 };
        DVector::from_element(1, xi)
    }

    fn value(&self, x: &DVector<f64>, s: &Sample) -> f64 {
        let (x, xi) = (x[0], Self::xi(s));
        (xi + 1.0) * x.powi(4) + (2.0 + xi) * x * x - (1.0 + xi) * x
    }

    fn gradient(&self, x: &DVector<f64>, s: &Sample) -> DVector<f64> {
        let (x, xi) = (x[0], Self::xi(s));
        DVector::from_element(1, 4.0 * (xi + 1.0) * x.powi(3) + 2.0 * (2.0 + xi) * x - (1.0 + xi))
    }

    fn hessian(&self, x: &DVector<f64>, s: &Sample) -> Option<DMatrix<f64>> {
        let (x, xi) = (x[0], Self::xi(s));
        Some(DMatrix::from_element(1, 1, 12.0 * (xi + 1.0) * x * x + 2.0 * (2.0 + xi)))
    }

    fn mean_value(&self, x: &DVector<f64>) -> Option<f64> {
        let x = x[0];
        Some(x.powi(4) + 2.0 * x * x - x)
    }

    fn mean_gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let x = x[0];
        Some(DVector::from_element(1, 4.0 * x.powi(3) + 4.0 * x - 1.0))
    }

    fn mean_hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 12.0 * x[0] * x[0] + 4.0))
    }

    fn covariance(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        // f'(x, ξ) − f'(x) = ξ (4x³ + 2x − 1)
        let x = x[0];
        let s = 4.0 * x.powi(3) + 2.0 * x - 1.0;
        Some(DMatrix::from_element(1, 1, s * s))
    }
}

/// Least-squares regression loss `½(ξ_inᵀx − ξ_obs)²` with
/// `ξ_in ~ U[−½, ½]^d` (independent components) and
/// `ξ_obs = ξ_inᵀv + ζ`, `ζ ~ N(0, σ_ζ²)`.
///
/// A sample is stored as `(ξ_in, ζ)`, length `d + 1`.
#[derive(Clone, Debug)]
pub struct RegressionLoss {
    v: DVector<f64>,
    noise_var: f64,
}

/// Second moment of a `U[−½, ½]` coordinate.
const UNIFORM_M2: f64 = 1.0 / 12.0;
/// Fourth moment of a `U[−½, ½]` coordinate.
const UNIFORM_M4: f64 = 1.0 / 80.0;

impl RegressionLoss {
    pub fn new(v: DVector<f64>, noise_var: f64) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::InvalidParameter("regression needs d >= 1".into()));
        }
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma_zeta_sq must be >= 0, got {noise_var}")));
        }
        Ok(Self { v, noise_var })
    }

    pub fn truth(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// `Ω = E[ξ_in ξ_inᵀ] = I/12`.
    pub fn input_covariance(&self) -> DMatrix<f64> {
        DMatrix::identity(self.v.len(), self.v.len()) * UNIFORM_M2
    }

    fn split<'a>(&self, s: &'a Sample) -> (nalgebra::DVectorView<'a, f64>, f64) {
        let d = self.v.len();
        (s.rows(0, d), s[d])
    }

    /// Prediction residual `ξ_inᵀ(x − v) − ζ`.
    fn residual(&self, x: &DVector<f64>, s: &Sample) -> f64 {
        let (input, zeta) = self.split(s);
        input.dot(&(x - &self.v)) - zeta
    }
}

impl LossOracle for RegressionLoss {
    fn dim(&self) -> usize {
        self.v.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Sample {
        let d = self.v.len();
        let mut s = DVector::zeros(d + 1);
        for i in 0..d {
            s[i] = rng.random::<f64>() - 0.5;
        }
        let z: f64 = StandardNormal.sample(rng);
        s[d] = self.noise_var.sqrt() * z;
        s
    }

    fn value(&self, x: &DVector<f64>, s: &Sample) -> f64 {
        let r = self.residual(x, s);
        0.5 * r * r
    }

    fn gradient(&self, x: &DVector<f64>, s: &Sample) -> DVector<f64> {
        let r = self.residual(x, s);
        self.split(s).0.into_owned() * r
    }

    fn hessian(&self, _x: &DVector<f64>, s: &Sample) -> Option<DMatrix<f64>> {
        let input = self.split(s).0.into_owned();
        Some(&input * input.transpose())
    }

    fn is_quadratic(&self) -> bool {
        true
    }

    fn mean_value(&self, x: &DVector<f64>) -> Option<f64> {
        let delta = x - &self.v;
        Some(0.5 * UNIFORM_M2 * delta.norm_squared() + 0.5 * self.noise_var)
    }

    fn mean_gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some((x - &self.v) * UNIFORM_M2)
    }

    fn mean_hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.input_covariance())
    }

    fn covariance(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        // E[(δᵀξ)² ξξᵀ] − Ωδδᵀ Ω + σ_ζ² Ω with independent uniform coordinates.
        let d = self.v.len();
        let delta = x - &self.v;
        let dn2 = delta.norm_squared();
        let m22 = UNIFORM_M2 * UNIFORM_M2;
        Some(DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                let di2 = delta[i] * delta[i];
                UNIFORM_M4 * di2 + m22 * (dn2 - di2) - m22 * di2 + self.noise_var * UNIFORM_M2
            } else {
                // 2 m2² δiδj from the fourth moment minus m2² δiδj
                m22 * delta[i] * delta[j]
            }
        }))
    }
}

/// `f(x, η) = ½a‖x − b‖² + s ηᵀx`, `η ~ N(0, I)`. Gradient noise is
/// state-independent with `Σ = s² I`.
#[derive(Clone, Debug)]
pub struct GaussianQuadraticLoss {
    pub curvature: f64,
    pub center: DVector<f64>,
    pub noise: f64,
}

impl LossOracle for GaussianQuadraticLoss {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Sample {
        DVector::from_fn(self.center.len(), |_, _| StandardNormal.sample(&mut *rng))
    }

    fn value(&self, x: &DVector<f64>, eta: &Sample) -> f64 {
        0.5 * self.curvature * (x - &self.center).norm_squared() + self.noise * eta.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>, eta: &Sample) -> DVector<f64> {
        (x - &self.center) * self.curvature + eta * self.noise
    }

    fn hessian(&self, _x: &DVector<f64>, _eta: &Sample) -> Option<DMatrix<f64>> {
        let d = self.center.len();
        Some(DMatrix::identity(d, d) * self.curvature)
    }

    fn is_quadratic(&self) -> bool {
        true
    }

    fn mean_value(&self, x: &DVector<f64>) -> Option<f64> {
        Some(0.5 * self.curvature * (x - &self.center).norm_squared())
    }

    fn mean_gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some((x - &self.center) * self.curvature)
    }

    fn mean_hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.hessian(x, &DVector::zeros(0))
    }

    fn covariance(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let d = self.center.len();
        Some(DMatrix::identity(d, d) * (self.noise * self.noise))
    }
}

/// The noise-free version of a loss: every "sample" is empty and the
/// per-sample oracles return the exact means. Used for ODE-limit checks.
#[derive(Clone, Debug)]
pub struct MeanLoss(pub Arc<dyn LossOracle>);

impl LossOracle for MeanLoss {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample(&self, _rng: &mut dyn RngCore) -> Sample {
        DVector::zeros(0)
    }

    fn value(&self, x: &DVector<f64>, _xi: &Sample) -> f64 {
        self.0.mean_value(x).expect("MeanLoss requires a closed-form mean value")
    }

    fn gradient(&self, x: &DVector<f64>, _xi: &Sample) -> DVector<f64> {
        self.0.mean_gradient(x).expect("MeanLoss requires a closed-form mean gradient")
    }

    fn hessian(&self, x: &DVector<f64>, _xi: &Sample) -> Option<DMatrix<f64>> {
        self.0.mean_hessian(x)
    }

    fn is_quadratic(&self) -> bool {
        self.0.is_quadratic()
    }

    fn mean_value(&self, x: &DVector<f64>) -> Option<f64> {
        self.0.mean_value(x)
    }

    fn mean_gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.0.mean_gradient(x)
    }

    fn mean_hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.0.mean_hessian(x)
    }

    fn covariance(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let d = self.0.dim();
        self.0.mean_gradient(x).map(|_| DMatrix::zeros(d, d))
    }
}

/// User-supplied regularizer. Only `value` and `subgradient` are mandatory;
/// the solver needs `prox` and the SME only needs `subgradient`.
pub trait CustomRegularizer: Send + Sync + fmt::Debug {
    fn value(&self, z: &DVector<f64>) -> f64;
    fn subgradient(&self, z: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    /// `argmin_z g(z) + ‖w − z‖² / (2t)`, if known.
    fn prox(&self, _w: &DVector<f64>, _t: f64) -> Option<DVector<f64>> {
        None
    }
}

/// The regularizer `g` acting on `z = Ax`.
#[derive(Clone, Debug)]
pub enum Regularizer {
    /// `g ≡ 0`.
    Zero,
    /// `g(z) = (β/2)‖z‖²`.
    Quadratic { beta: f64 },
    /// `g(z) = β‖z‖₁`.
    L1 { beta: f64 },
    Custom(Arc<dyn CustomRegularizer>),
}

/// Sign with `sign(0) = 0`.
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match self {
            Regularizer::Quadratic { beta } | Regularizer::L1 { beta } if !(*beta >= 0.0) => {
                Err(Error::InvalidParameter(format!("regularizer weight must be >= 0, got {beta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::Quadratic { beta } => 0.5 * beta * z.norm_squared(),
            Regularizer::L1 { beta } => beta * z.lp_norm(1),
            Regularizer::Custom(c) => c.value(z),
        }
    }

    /// Gradient for smooth `g`, the `sign(0) = 0` selection for `ℓ1`.
    pub fn subgradient(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Regularizer::Zero => DVector::zeros(z.len()),
            Regularizer::Quadratic { beta } => z * *beta,
            Regularizer::L1 { beta } => z.map(|v| beta * sign0(v)),
            Regularizer::Custom(c) => c.subgradient(z),
        }
    }

    /// Hessian where it exists (`None` for `ℓ1`).
    pub fn hessian(&self, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        let m = z.len();
        match self {
            Regularizer::Zero => Some(DMatrix::zeros(m, m)),
            Regularizer::Quadratic { beta } => Some(DMatrix::identity(m, m) * *beta),
            Regularizer::L1 { .. } => None,
            Regularizer::Custom(c) => c.hessian(z),
        }
    }

    pub fn is_smooth(&self) -> bool {
        match self {
            Regularizer::Zero | Regularizer::Quadratic { .. } => true,
            Regularizer::L1 { .. } => false,
            Regularizer::Custom(c) => c.hessian(&DVector::zeros(0)).is_some(),
        }
    }

    /// `argmin_z { g(z) + ‖w − z‖² / (2t) }`.
    pub fn prox(&self, w: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        if !(t > 0.0) {
            return Err(Error::InvalidParameter(format!("prox scale must be > 0, got {t}")));
        }
        match self {
            Regularizer::Zero => Ok(w.clone()),
            Regularizer::Quadratic { beta } => Ok(w / (1.0 + t * beta)),
            Regularizer::L1 { beta } => {
                let thr = t * beta;
                Ok(w.map(|v| sign0(v) * (v.abs() - thr).max(0.0)))
            }
            Regularizer::Custom(c) => c
                .prox(w, t)
                .ok_or_else(|| Error::Unsupported("custom regularizer has no prox".into())),
        }
    }
}

/// How the SME realizes the diffusion covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    Exact,
    /// Empirical covariance from `N` fresh samples per evaluation.
    Sampled(usize),
}

/// A diffusion covariance evaluated at one point.
#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    pub sigma: DMatrix<f64>,
    pub source: SigmaMode,
    pub x_probe: DVector<f64>,
}

impl CovarianceEstimate {
    /// Checks symmetry (1e−12 absolute) and PSD-ness (eigenvalues no lower
    /// than −1e−10 · λmax).
    pub fn validate(&self) -> Result<()> {
        let asym = asymmetry(&self.sigma);
        if asym > 1e-12 {
            return Err(Error::InvalidParameter(format!("covariance asymmetric by {asym:e}")));
        }
        let ev = symmetric_eigenvalues(&self.sigma);
        let lmax = ev.last().copied().unwrap_or(0.0).max(0.0);
        let lmin = ev.first().copied().unwrap_or(0.0);
        if lmin < -PSD_TOL * lmax {
            return Err(Error::NotPsd { eigenvalue: lmin, tolerance: -PSD_TOL * lmax });
        }
        Ok(())
    }
}

/// The composite problem `min E_ξ f(x, ξ) + g(z)` s.t. `Ax = z`.
#[derive(Clone, Debug)]
pub struct StochasticProblem {
    loss: Arc<dyn LossOracle>,
    regularizer: Regularizer,
    a: DMatrix<f64>,
    sigma_mode: SigmaMode,
}

impl StochasticProblem {
    /// Wires a problem together, checking shapes and that `A` has full
    /// column rank.
    pub fn new(loss: Arc<dyn LossOracle>, regularizer: Regularizer, a: DMatrix<f64>) -> Result<Self> {
        let d = loss.dim();
        if d == 0 {
            return Err(Error::InvalidParameter("input dimension must be >= 1".into()));
        }
        if a.ncols() != d {
            return Err(Error::DimensionMismatch(format!("A has {} columns but the loss has dimension {d}", a.ncols())));
        }
        regularizer.validate()?;
        linalg::check_full_column_rank(&a)?;
        Ok(Self { loss, regularizer, a, sigma_mode: SigmaMode::Exact })
    }

    /// Same problem with the noise switched off.
    pub fn deterministic(&self) -> Result<Self> {
        let x = DVector::zeros(self.dim());
        if self.loss.mean_gradient(&x).is_none() || self.loss.mean_value(&x).is_none() {
            return Err(Error::Unsupported("noise-free problem needs closed-form means".into()));
        }
        Ok(Self { loss: Arc::new(MeanLoss(self.loss.clone())), sigma_mode: SigmaMode::Exact, ..self.clone() })
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.sigma_mode = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn constraint_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn loss(&self) -> &dyn LossOracle {
        &*self.loss
    }

    pub fn regularizer(&self) -> &Regularizer {
        &self.regularizer
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Sample {
        self.loss.sample(rng)
    }

    /// `f'(x, ξ)` for one drawn sample.
    pub fn stoch_grad(&self, x: &DVector<f64>, xi: &Sample) -> DVector<f64> {
        self.loss.gradient(x, xi)
    }

    /// Average of `f'(x, ξᵢ)` over a batch.
    pub fn batch_grad(&self, x: &DVector<f64>, batch: &[Sample]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for xi in batch {
            g += self.loss.gradient(x, xi);
        }
        g / batch.len() as f64
    }

    pub fn mean_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.loss
            .mean_gradient(x)
            .ok_or_else(|| Error::Unsupported("loss has no closed-form mean gradient".into()))
    }

    /// `V(x) = f(x) + g(Ax)`.
    pub fn potential(&self, x: &DVector<f64>) -> Result<f64> {
        let f = self
            .loss
            .mean_value(x)
            .ok_or_else(|| Error::Unsupported("loss has no closed-form mean value".into()))?;
        Ok(f + self.regularizer.value(&(&self.a * x)))
    }

    /// `∇V(x) = f'(x) + Aᵀ g'(Ax)`, using the `sign(0) = 0` selection for
    /// `ℓ1` (a formal drift, not a true gradient).
    pub fn potential_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = self.mean_grad(x)?;
        g.gemv_tr(1.0, &self.a, &self.regularizer.subgradient(&(&self.a * x)), 1.0);
        Ok(g)
    }

    pub fn sigma_exact(&self, x: &DVector<f64>) -> Result<CovarianceEstimate> {
        let sigma = self
            .loss
            .covariance(x)
            .ok_or_else(|| Error::Unsupported("loss has no closed-form covariance".into()))?;
        Ok(CovarianceEstimate { sigma, source: SigmaMode::Exact, x_probe: x.clone() })
    }

    /// `Σ_N(x) = (1/N) Σᵢ (f'(x) − f'(x, ξᵢ))(f'(x) − f'(x, ξᵢ))ᵀ` from `n`
    /// fresh samples. The centre is the exact mean gradient when the loss
    /// provides one, otherwise the sample mean.
    pub fn sigma_sampled(&self, x: &DVector<f64>, n: usize, rng: &mut dyn RngCore) -> Result<CovarianceEstimate> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("sampled covariance needs N >= 2, got {n}")));
        }
        let grads: Vec<DVector<f64>> = (0..n).map(|_| self.loss.gradient(x, &self.loss.sample(rng))).collect();
        let centre = match self.loss.mean_gradient(x) {
            Some(g) => g,
            None => grads.iter().fold(DVector::zeros(self.dim()), |acc, g| acc + g) / n as f64,
        };
        Ok(CovarianceEstimate { sigma: outer_average(&centre, &grads), source: SigmaMode::Sampled(n), x_probe: x.clone() })
    }

    /// Covariance according to the problem's configured [`SigmaMode`].
    pub fn sigma(&self, x: &DVector<f64>, mode: SigmaMode, rng: &mut dyn RngCore) -> Result<CovarianceEstimate> {
        match mode {
            SigmaMode::Exact => self.sigma_exact(x),
            SigmaMode::Sampled(n) => self.sigma_sampled(x, n, rng),
        }
    }
}

/// `(1/N) Σ (c − gᵢ)(c − gᵢ)ᵀ`, symmetric by construction.
pub(crate) fn outer_average(centre: &DVector<f64>, grads: &[DVector<f64>]) -> DMatrix<f64> {
    let d = centre.len();
    let mut s = DMatrix::zeros(d, d);
    for g in grads {
        let dev = centre - g;
        s.ger(1.0, &dev, &dev, 1.0);
    }
    s /= grads.len() as f64;
    // ger accumulates identical products for (i,j) and (j,i); enforce exact symmetry anyway
    for i in 0..d {
        for j in (i + 1)..d {
            let v = s[(i, j)];
            s[(j, i)] = v;
        }
    }
    s
}

/// Which regularizer a preset uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GKind {
    Quadratic,
    L1,
    Zero,
}

/// Ground-truth vector of the regression presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VSpec {
    Linspace { a: f64, b: f64 },
    Explicit(Vec<f64>),
}

impl VSpec {
    pub fn build(&self, d: usize) -> Result<DVector<f64>> {
        match self {
            VSpec::Linspace { a, b } => Ok(linalg::linspace(*a, *b, d)),
            VSpec::Explicit(v) if v.len() == d => Ok(DVector::from_column_slice(v)),
            VSpec::Explicit(v) => Err(Error::DimensionMismatch(format!("v has length {} but d = {d}", v.len()))),
        }
    }
}

/// Preset parameters as they appear in experiment configs.
///
/// `preset` is one of `toy`, `ridge`, `lasso`, `custom`. `beta` defaults to
/// 2 for the toy problem with a quadratic `g` (that is, `g(z) = z²`), to 1
/// for the toy problem with `ℓ1`, and to 0.2 for the regression presets.
/// `custom` builds a [`GaussianQuadraticLoss`] from `curvature` and
/// `noise`, centred at `v`, with `A = I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetParams {
    pub preset: String,
    pub d: usize,
    pub beta: Option<f64>,
    pub sigma_zeta_sq: f64,
    pub v_spec: VSpec,
    pub g_kind: GKind,
    pub curvature: f64,
    pub noise: f64,
}

impl Default for PresetParams {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            d: 3,
            beta: None,
            sigma_zeta_sq: 0.1,
            v_spec: VSpec::Linspace { a: 1.0, b: 2.0 },
            g_kind: GKind::Quadratic,
            curvature: 1.0,
            noise: 1.0,
        }
    }
}

impl PresetParams {
    pub fn toy(g_kind: GKind) -> Self {
        Self { preset: "toy".into(), g_kind, ..Self::default() }
    }

    pub fn ridge() -> Self {
        Self { preset: "ridge".into(), ..Self::default() }
    }

    pub fn lasso() -> Self {
        Self { preset: "lasso".into(), g_kind: GKind::L1, ..Self::default() }
    }

    fn regularizer(&self, default_beta: f64, kind: GKind) -> Regularizer {
        let beta = self.beta.unwrap_or(default_beta);
        match kind {
            GKind::Quadratic => Regularizer::Quadratic { beta },
            GKind::L1 => Regularizer::L1 { beta },
            GKind::Zero => Regularizer::Zero,
        }
    }
}

/// Builds one of the preset problems.
pub fn build_problem(params: &PresetParams) -> Result<StochasticProblem> {
    if let Some(b) = params.beta {
        if !(b >= 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be >= 0, got {b}")));
        }
    }
    match params.preset.as_str() {
        "toy" => {
            let default_beta = if params.g_kind == GKind::L1 { 1.0 } else { 2.0 };
            let reg = params.regularizer(default_beta, params.g_kind);
            StochasticProblem::new(Arc::new(ToyLoss), reg, DMatrix::identity(1, 1))
        }
        "ridge" | "lasso" => {
            if params.d == 0 {
                return Err(Error::InvalidParameter("d must be >= 1".into()));
            }
            let kind = if params.preset == "ridge" { GKind::Quadratic } else { GKind::L1 };
            let loss = RegressionLoss::new(params.v_spec.build(params.d)?, params.sigma_zeta_sq)?;
            let a = linalg::hilbert(params.d) * 0.5;
            StochasticProblem::new(Arc::new(loss), params.regularizer(0.2, kind), a)
                .map(|p| p.with_sigma_mode(SigmaMode::Sampled(9)))
        }
        "custom" => {
            if params.d == 0 || !(params.curvature > 0.0) || !(params.noise >= 0.0) {
                return Err(Error::InvalidParameter("custom needs d >= 1, curvature > 0, noise >= 0".into()));
            }
            let loss = GaussianQuadraticLoss {
                curvature: params.curvature,
                center: params.v_spec.build(params.d)?,
                noise: params.noise,
            };
            let reg = params.regularizer(0.0, params.g_kind);
            StochasticProblem::new(Arc::new(loss), reg, DMatrix::identity(params.d, params.d))
        }
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Ridge minimizer `x* = (Ω + βAᵀA)⁻¹ Ω v`.
pub fn ridge_minimizer(a: &DMatrix<f64>, beta: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    let d = v.len();
    let omega = DMatrix::<f64>::identity(d, d) * UNIFORM_M2;
    let lhs = &omega + a.transpose() * a * beta;
    lhs.lu()
        .solve(&(&omega * v))
        .ok_or_else(|| Error::InvalidParameter("ridge normal matrix is singular".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn toy() -> StochasticProblem {
        build_problem(&PresetParams::toy(GKind::Quadratic)).unwrap()
    }

    #[test]
    fn toy_gradient_examples() {
        let p = toy();
        assert_eq!(p.stoch_grad(&v1(0.0), &v1(1.0))[0], -2.0);
        assert_eq!(p.stoch_grad(&v1(0.0), &v1(-1.0))[0], 0.0);
        assert_eq!(p.mean_grad(&v1(0.0)).unwrap()[0], -1.0);
    }

    #[test]
    fn toy_mean_is_two_point_average() {
        let p = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = v1(rng.random::<f64>() * 4.0 - 2.0);
            let avg = 0.5 * (p.stoch_grad(&x, &v1(1.0))[0] + p.stoch_grad(&x, &v1(-1.0))[0]);
            assert_relative_eq!(avg, p.mean_grad(&x).unwrap()[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn toy_minimizer_zeroes_potential_gradient() {
        let p = toy();
        let g = p.potential_grad(&v1(0.16374)).unwrap()[0];
        assert!(g.abs() < 1e-3, "{g}");
    }

    #[test]
    fn toy_potential_and_covariance() {
        let p = toy();
        assert_eq!(p.potential(&v1(0.0)).unwrap(), 0.0);
        assert_eq!(p.sigma_exact(&v1(0.0)).unwrap().sigma[(0, 0)], 1.0);
        assert_relative_eq!(p.sigma_exact(&v1(0.5)).unwrap().sigma[(0, 0)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn ridge_truth_point() {
        let p = build_problem(&PresetParams::ridge()).unwrap();
        let v = linalg::linspace(1.0, 2.0, 3);
        assert!(p.mean_grad(&v).unwrap().norm() == 0.0);
        let s = p.sigma_exact(&v).unwrap().sigma;
        assert_relative_eq!(s, DMatrix::identity(3, 3) * (0.1 / 12.0), epsilon = 1e-15);
        let expect = 0.05 + p.regularizer().value(&(p.a() * &v));
        assert_relative_eq!(p.potential(&v).unwrap(), expect, epsilon = 1e-14);
        // zero label noise at the truth gives a zero gradient
        let mut xi = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.0]);
        xi[3] = 0.0;
        assert_eq!(p.stoch_grad(&v, &xi).norm(), 0.0);
    }

    #[test]
    fn prox_examples() {
        let q = Regularizer::Quadratic { beta: 0.2 };
        assert_relative_eq!(q.prox(&v1(1.1), 0.5).unwrap()[0], 1.0, epsilon = 1e-15);
        let l = Regularizer::L1 { beta: 0.2 };
        assert_eq!(l.prox(&v1(0.05), 0.5).unwrap()[0], 0.0);
        assert_relative_eq!(l.prox(&v1(-1.0), 0.5).unwrap()[0], -0.9, epsilon = 1e-15);
        assert_eq!(Regularizer::Zero.prox(&v1(3.0), 0.1).unwrap()[0], 3.0);
        assert!(q.prox(&v1(1.0), 0.0).is_err());
    }

    #[derive(Debug)]
    struct NoProx;
    impl CustomRegularizer for NoProx {
        fn value(&self, _z: &DVector<f64>) -> f64 {
            0.0
        }
        fn subgradient(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(z.len())
        }
    }

    #[test]
    fn custom_without_prox_is_unsupported() {
        let r = Regularizer::Custom(Arc::new(NoProx));
        assert!(matches!(r.prox(&v1(1.0), 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn l1_subgradient_selection() {
        let l = Regularizer::L1 { beta: 2.0 };
        let g = l.subgradient(&DVector::from_vec(vec![-3.0, 0.0, 0.5]));
        assert_eq!(g.as_slice(), &[-2.0, 0.0, 2.0]);
    }

    #[test]
    fn preset_errors() {
        let bad = PresetParams { preset: "nope".into(), ..PresetParams::default() };
        assert!(matches!(build_problem(&bad), Err(Error::UnknownPreset(_))));
        let neg = PresetParams { beta: Some(-1.0), ..PresetParams::ridge() };
        assert!(build_problem(&neg).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let loss = GaussianQuadraticLoss { curvature: 1.0, center: DVector::zeros(2), noise: 1.0 };
        assert!(matches!(
            StochasticProblem::new(Arc::new(loss), Regularizer::Zero, singular),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn sampled_covariance_degenerate_rank_one() {
        #[derive(Debug)]
        struct Fixed;
        impl LossOracle for Fixed {
            fn dim(&self) -> usize {
                2
            }
            fn sample(&self, _rng: &mut dyn RngCore) -> Sample {
                DVector::from_vec(vec![1.0, 2.0])
            }
            fn value(&self, x: &DVector<f64>, s: &Sample) -> f64 {
                x.dot(s)
            }
            fn gradient(&self, _x: &DVector<f64>, s: &Sample) -> DVector<f64> {
                s.clone()
            }
            fn mean_gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
                Some(DVector::zeros(x.len()))
            }
        }
        let p = StochasticProblem::new(Arc::new(Fixed), Regularizer::Zero, DMatrix::identity(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = p.sigma_sampled(&DVector::zeros(2), 2, &mut rng).unwrap();
        est.validate().unwrap();
        let sv = est.sigma.clone().svd(false, false).singular_values;
        assert!(sv.min() < 1e-12 * sv.max());
        assert!(p.sigma_sampled(&DVector::zeros(2), 1, &mut rng).is_err());
    }
}
