//! Smoothed logistic loss written through the latent noise.
//!
//! With labels `Y = 2 * 1{y + xi >= 0} - 1`, where `y = <A_i, mu0>`, the per-sample
//! loss `rho(-Y x)` equals `L(x, y; xi) = rho(-(2 * 1{y + xi >= 0} - 1) x)`. The
//! smoothed version replaces the indicator by `phi_sigma(y + xi)`, with `phi` the
//! cubic smoothstep on `[-1, 1]` and `phi_sigma(u) = phi(u / sigma)`.

use rand::Rng;

use crate::seed;

/// `log(1 + e^x)`.
pub fn rho(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + e^{-x})`.
pub fn rho1(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn rho2(x: f64) -> f64 {
    let s = rho1(x);
    s * (1.0 - s)
}

/// Cubic smoothstep: 0 below -1, 1 above 1.
pub fn smoothstep(x: f64) -> f64 {
    if x <= -1.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let p = (x + 1.0) / 2.0;
        p * p * (3.0 - 2.0 * p)
    }
}

pub fn smoothstep_derivative(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        let p = (x + 1.0) / 2.0;
        3.0 * p * (1.0 - p)
    }
}

/// `phi_sigma(u)`; `sigma = 0` gives the indicator `1{u >= 0}`.
pub fn mollifier(sigma: f64, u: f64) -> f64 {
    if sigma == 0.0 {
        if u >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        smoothstep(u / sigma)
    }
}

pub fn mollifier_derivative(sigma: f64, u: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        smoothstep_derivative(u / sigma) / sigma
    }
}

/// `L_sigma(x, y; xi)`.
pub fn loss(sigma: f64, x: f64, y: f64, xi: f64) -> f64 {
    let s = 2.0 * mollifier(sigma, y + xi) - 1.0;
    rho(-s * x)
}

/// `d/dx L_sigma(x, y; xi) = -s rho'(-s x)` with `s = 2 phi_sigma(y + xi) - 1`.
pub fn d1(sigma: f64, x: f64, y: f64, xi: f64) -> f64 {
    let s = 2.0 * mollifier(sigma, y + xi) - 1.0;
    -s * rho1(-s * x)
}

/// `(d/dx, d/dy)` of [`d1`].
pub fn d1_gradient(sigma: f64, x: f64, y: f64, xi: f64) -> (f64, f64) {
    let s = 2.0 * mollifier(sigma, y + xi) - 1.0;
    let dx = s * s * rho2(-s * x);
    let ds = -rho1(-s * x) + s * x * rho2(-s * x);
    (dx, 2.0 * mollifier_derivative(sigma, y + xi) * ds)
}

/// Default clamp level `20 log n`.
pub fn default_clamp(n: usize) -> f64 {
    20.0 * (n.max(2) as f64).ln()
}

/// `m` i.i.d. standard logistic draws.
pub fn sample_logistic_noise(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::stream_rng(seed, "logistic-noise", 0);
    (0..m)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            (u / (1.0 - u)).ln()
        })
        .collect()
}
