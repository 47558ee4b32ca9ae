//! Scalar losses `L(x)` of the residual `x = Y_i - <A_i, mu>`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::prox::ScalarFnArc;

/// User-supplied loss with its first two derivatives.
#[derive(Clone)]
pub struct CustomLoss {
    pub name: String,
    pub l: ScalarFnArc,
    pub dl: ScalarFnArc,
    pub d2l: ScalarFnArc,
}

impl fmt::Debug for CustomLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomLoss({})", self.name)
    }
}

impl PartialEq for CustomLoss {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && Arc::ptr_eq(&self.dl, &other.dl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Loss {
    /// `x^2 / 2`.
    Squared,
    /// `x^2 / 2 + a cos x`; non-convex once `a > 1`.
    SmoothCos { a: f64 },
    /// `delta^2 (sqrt(1 + (x/delta)^2) - 1)`.
    PseudoHuber { delta: f64 },
    #[serde(skip)]
    Custom(CustomLoss),
}

impl Loss {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Loss::Squared => x * x / 2.0,
            Loss::SmoothCos { a } => x * x / 2.0 + a * x.cos(),
            Loss::PseudoHuber { delta } => delta * delta * ((1.0 + (x / delta).powi(2)).sqrt() - 1.0),
            Loss::Custom(c) => (c.l)(x),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match self {
            Loss::Squared => x,
            Loss::SmoothCos { a } => x - a * x.sin(),
            Loss::PseudoHuber { delta } => x / (1.0 + (x / delta).powi(2)).sqrt(),
            Loss::Custom(c) => (c.dl)(x),
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match self {
            Loss::Squared => 1.0,
            Loss::SmoothCos { a } => 1.0 - a * x.cos(),
            Loss::PseudoHuber { delta } => (1.0 + (x / delta).powi(2)).powf(-1.5),
            Loss::Custom(c) => (c.d2l)(x),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Loss::Squared => "squared".into(),
            Loss::SmoothCos { a } => format!("smooth_cos({a})"),
            Loss::PseudoHuber { delta } => format!("pseudo_huber({delta})"),
            Loss::Custom(c) => c.name.clone(),
        }
    }

    /// Upper bound on `|L''|`, when known.
    pub fn curvature_bound(&self) -> Option<f64> {
        match self {
            Loss::Squared => Some(1.0),
            Loss::SmoothCos { a } => Some(1.0 + a.abs()),
            Loss::PseudoHuber { .. } => Some(1.0),
            Loss::Custom(_) => None,
        }
    }
}
