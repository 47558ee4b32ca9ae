//! Scalar proximal operators `prox_{eta f}(x) = argmin_w (w - x)^2 / 2 + eta f(w)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ScalarFnArc = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Smooth convex penalty given by `f`, `f'`, `f''` and its strong-convexity modulus.
#[derive(Clone)]
pub struct SmoothPenalty {
    pub name: String,
    pub f: ScalarFnArc,
    pub df: ScalarFnArc,
    pub d2f: ScalarFnArc,
    pub alpha: f64,
}

impl SmoothPenalty {
    /// `f(x) = x^4 / 4`.
    pub fn quartic() -> Self {
        SmoothPenalty {
            name: "quartic".into(),
            f: Arc::new(|x| x.powi(4) / 4.0),
            df: Arc::new(|x| x.powi(3)),
            d2f: Arc::new(|x| 3.0 * x * x),
            alpha: 0.0,
        }
    }

    /// `f(x) = a x^2 / 2 + log cosh(x)`, strongly convex with modulus `a`.
    pub fn logcosh_ridge(a: f64) -> Self {
        SmoothPenalty {
            name: format!("logcosh_ridge({a})"),
            f: Arc::new(move |x| a * x * x / 2.0 + x.cosh().ln()),
            df: Arc::new(move |x| a * x + x.tanh()),
            d2f: Arc::new(move |x| a + 1.0 - x.tanh().powi(2)),
            alpha: a,
        }
    }
}

impl fmt::Debug for SmoothPenalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SmoothPenalty({}, alpha={})", self.name, self.alpha)
    }
}

impl PartialEq for SmoothPenalty {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.alpha == other.alpha
    }
}

/// Separable regularizer `f` acting coordinatewise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProxSpec {
    Zero,
    Ridge { lambda: f64 },
    Lasso { lambda: f64 },
    /// `x^4 / 4`.
    Quartic,
    /// `a x^2 / 2 + log cosh x`.
    LogcoshRidge { a: f64 },
    #[serde(skip)]
    Smooth(SmoothPenalty),
}

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;

impl ProxSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProxSpec::Ridge { lambda } | ProxSpec::Lasso { lambda } if !(*lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::validation("prox.lambda", format!("must be finite and nonnegative, got {lambda}")))
            }
            ProxSpec::LogcoshRidge { a } if !(*a >= 0.0 && a.is_finite()) => {
                Err(Error::validation("prox.a", format!("must be finite and nonnegative, got {a}")))
            }
            _ => Ok(()),
        }
    }

    fn smooth(&self) -> Option<SmoothPenalty> {
        match self {
            ProxSpec::Quartic => Some(SmoothPenalty::quartic()),
            ProxSpec::LogcoshRidge { a } => Some(SmoothPenalty::logcosh_ridge(*a)),
            ProxSpec::Smooth(p) => Some(p.clone()),
            _ => None,
        }
    }

    /// Strong-convexity modulus of `f`.
    pub fn strong_convexity(&self) -> f64 {
        match self {
            ProxSpec::Zero | ProxSpec::Lasso { .. } | ProxSpec::Quartic => 0.0,
            ProxSpec::Ridge { lambda } => *lambda,
            ProxSpec::LogcoshRidge { a } => *a,
            ProxSpec::Smooth(p) => p.alpha,
        }
    }

    /// Penalty value `f(x)`.
    pub fn penalty(&self, x: f64) -> f64 {
        match self {
            ProxSpec::Zero => 0.0,
            ProxSpec::Ridge { lambda } => lambda * x * x / 2.0,
            ProxSpec::Lasso { lambda } => lambda * x.abs(),
            _ => (self.smooth().expect("smooth penalty").f)(x),
        }
    }

    /// Derivative `f'(x)` (subgradient 0 for the lasso kink).
    pub fn penalty_derivative(&self, x: f64) -> f64 {
        match self {
            ProxSpec::Zero => 0.0,
            ProxSpec::Ridge { lambda } => lambda * x,
            ProxSpec::Lasso { lambda } => lambda * if x == 0.0 { 0.0 } else { x.signum() },
            _ => (self.smooth().expect("smooth penalty").df)(x),
        }
    }

    /// A point mapped to 0 by the prox, namely `eta f'(0)`.
    pub fn preimage_of_zero(&self, eta: f64) -> f64 {
        eta * self.penalty_derivative(0.0)
    }

    pub fn eval(&self, eta: f64, x: f64) -> Result<f64> {
        match self {
            ProxSpec::Zero => Ok(x),
            ProxSpec::Ridge { lambda } => Ok(x / (1.0 + eta * lambda)),
            ProxSpec::Lasso { lambda } => Ok(x.signum() * (x.abs() - eta * lambda).max(0.0)),
            _ => newton_prox(&self.smooth().expect("smooth penalty"), eta, x),
        }
    }

    /// Derivative of `x -> prox(x)`; 0 or 1 almost everywhere for the lasso.
    pub fn derivative(&self, eta: f64, x: f64) -> f64 {
        match self {
            ProxSpec::Zero => 1.0,
            ProxSpec::Ridge { lambda } => 1.0 / (1.0 + eta * lambda),
            ProxSpec::Lasso { lambda } => {
                if x.abs() > eta * lambda {
                    1.0
                } else {
                    0.0
                }
            }
            _ => {
                let p = self.smooth().expect("smooth penalty");
                let w = newton_prox(&p, eta, x).unwrap_or(f64::NAN);
                1.0 / (1.0 + eta * (p.d2f)(w))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            ProxSpec::Zero => "zero".into(),
            ProxSpec::Ridge { lambda } => format!("ridge({lambda})"),
            ProxSpec::Lasso { lambda } => format!("lasso({lambda})"),
            ProxSpec::Quartic => "quartic".into(),
            ProxSpec::LogcoshRidge { a } => format!("logcosh_ridge({a})"),
            ProxSpec::Smooth(p) => p.name.clone(),
        }
    }
}

/// Free-function form of [`ProxSpec::eval`].
pub fn prox_eval(spec: &ProxSpec, eta: f64, x: f64) -> Result<f64> {
    if !(eta >= 0.0) {
        return Err(Error::validation("eta", format!("must be nonnegative, got {eta}")));
    }
    spec.eval(eta, x)
}

/// Root of `g(w) = w - x + eta f'(w)`, which is increasing in `w`. The root lies
/// between `x` and `x - eta f'(x)`; Newton steps leaving that bracket fall back to bisection.
fn newton_prox(p: &SmoothPenalty, eta: f64, x: f64) -> Result<f64> {
    let g = |w: f64| w - x + eta * (p.df)(w);
    let other = x - eta * (p.df)(x);
    let (mut lo, mut hi) = if other <= x { (other, x) } else { (x, other) };
    let mut w = x;
    for _ in 0..NEWTON_MAX_ITER {
        let gw = g(w);
        if gw.abs() <= NEWTON_TOL * (1.0 + x.abs()) {
            return Ok(w);
        }
        if gw > 0.0 {
            hi = w;
        } else {
            lo = w;
        }
        let step = gw / (1.0 + eta * (p.d2f)(w));
        let next = w - step;
        w = if next > lo && next < hi && next.is_finite() { next } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * (1.0 + x.abs()) {
            return Ok(w);
        }
    }
    Err(Error::Numerical(format!("prox Newton iteration did not converge for x = {x}")))
}
