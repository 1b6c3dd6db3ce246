//! Test functions `φ` whose expectations are compared across processes.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::problem::StochasticProblem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    /// `Σᵢ xᵢ + xᵢ²` (the scalar `x + x²` in one dimension).
    XPlusXSquared,
    /// `Σᵢ exp(−xᵢ)`.
    SumExpNeg,
    /// `xᵢ`.
    Component(usize),
    /// `‖x‖²`.
    SquaredNorm,
    /// The objective `V(x) = f(x) + g(Ax)`; needs the problem, see [`TestFunction::eval_on`].
    Objective,
}

impl TestFunction {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match *self {
            TestFunction::XPlusXSquared => x.iter().map(|v| v + v * v).sum(),
            TestFunction::SumExpNeg => x.iter().map(|v| (-v).exp()).sum(),
            TestFunction::Component(i) => x[i],
            TestFunction::SquaredNorm => x.norm_squared(),
            TestFunction::Objective => f64::NAN,
        }
    }

    /// Like [`TestFunction::eval`] but resolves `Objective` against `problem`.
    pub fn eval_on(&self, problem: &StochasticProblem, x: &DVector<f64>) -> f64 {
        match self {
            TestFunction::Objective => problem.potential(x).unwrap_or(f64::NAN),
            _ => self.eval(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(TestFunction::XPlusXSquared.eval(&x), 2.0);
        assert_eq!(TestFunction::SumExpNeg.eval(&x), (-1.0f64).exp() + 1.0);
        assert_eq!(TestFunction::Component(0).eval(&x), 1.0);
        assert_eq!(TestFunction::SquaredNorm.eval(&x), 1.0);
    }
}
