//! Row-separate nonlinearities and named first-order programs.
//!
//! A symmetric program runs `z(t) = A F_t(z(0..t-1)) + G_t(z(0..t-1))`. An
//! asymmetric one alternates
//! `u(t) = A F1_t(v(0..t-1)) + G1_t(u(0..t-1))` and
//! `v(t) = A^T G2_t(u(0..t)) + F2_t(v(0..t-1))`.
//! Every `F`/`G` is a [`RowFunction`]: coordinate `k` of the output depends only on
//! row `k` of the history, and the function carries analytic first partials.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::erm::logistic;
use crate::erm::loss::Loss;
use crate::erm::prox::ProxSpec;
use crate::error::{Error, Result};

/// Scalar map with derivative, used inside [`Pointwise`].
pub trait Scalar: Send + Sync + fmt::Debug {
    fn value(&self, x: f64) -> f64;
    fn deriv(&self, x: f64) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct Identity;

impl Scalar for Identity {
    fn value(&self, x: f64) -> f64 {
        x
    }
    fn deriv(&self, _: f64) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tanh;

impl Scalar for Tanh {
    fn value(&self, x: f64) -> f64 {
        x.tanh()
    }
    fn deriv(&self, x: f64) -> f64 {
        1.0 - x.tanh().powi(2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sin;

impl Scalar for Sin {
    fn value(&self, x: f64) -> f64 {
        x.sin()
    }
    fn deriv(&self, x: f64) -> f64 {
        x.cos()
    }
}

/// `x -> L'(x)` with derivative `L''`.
#[derive(Debug, Clone)]
pub struct LossDerivative(pub Loss);

impl Scalar for LossDerivative {
    fn value(&self, x: f64) -> f64 {
        self.0.d1(x)
    }
    fn deriv(&self, x: f64) -> f64 {
        self.0.d2(x)
    }
}

/// `x -> prox_{eta f}(x)`.
#[derive(Debug, Clone)]
pub struct Prox {
    pub spec: ProxSpec,
    pub eta: f64,
}

impl Scalar for Prox {
    fn value(&self, x: f64) -> f64 {
        self.spec.eval(self.eta, x).unwrap_or(f64::NAN)
    }
    fn deriv(&self, x: f64) -> f64 {
        self.spec.derivative(self.eta, x)
    }
}

/// A row-separate map `R^{rows x arity} -> R^{rows}`.
pub trait RowFunction: Send + Sync {
    /// Number of past iterates consumed.
    fn arity(&self) -> usize;

    fn eval(&self, row: usize, history: &[f64]) -> f64;

    /// First partial with respect to `history[which]`.
    fn partial(&self, row: usize, history: &[f64], which: usize) -> f64;

    fn gradient(&self, row: usize, history: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate().take(self.arity()) {
            *o = self.partial(row, history, j);
        }
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        None
    }

    /// Rows with equal keys evaluate identically; the default treats every row as distinct.
    fn row_key(&self, row: usize) -> u64 {
        row as u64 ^ 0xA5A5_0000_0000_0000
    }

    fn is_zero(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

pub type Row = Arc<dyn RowFunction>;

fn hash_f64s(values: impl IntoIterator<Item = f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn row_of(v: &Option<Arc<[f64]>>, row: usize, default: f64) -> f64 {
    v.as_ref().map_or(default, |v| v[row])
}

/// Identically zero.
#[derive(Debug, Clone)]
pub struct Zero {
    pub arity: usize,
}

impl RowFunction for Zero {
    fn arity(&self) -> usize {
        self.arity
    }
    fn eval(&self, _: usize, _: &[f64]) -> f64 {
        0.0
    }
    fn partial(&self, _: usize, _: &[f64], _: usize) -> f64 {
        0.0
    }
    fn gradient(&self, _: usize, _: &[f64], out: &mut [f64]) {
        out.iter_mut().take(self.arity).for_each(|o| *o = 0.0);
    }
    fn lipschitz_hint(&self) -> Option<f64> {
        Some(0.0)
    }
    fn row_key(&self, _: usize) -> u64 {
        0
    }
    fn is_zero(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        "0".into()
    }
}

pub fn zero(arity: usize) -> Row {
    Arc::new(Zero { arity })
}

/// `scale * weight_r * f(inner * h[index] + offset_r) + shift_r`.
#[derive(Clone)]
pub struct Pointwise {
    pub arity: usize,
    pub index: usize,
    pub inner: f64,
    pub offset: Option<Arc<[f64]>>,
    pub func: Arc<dyn Scalar>,
    pub scale: f64,
    pub weight: Option<Arc<[f64]>>,
    pub shift: Option<Arc<[f64]>>,
}

impl Pointwise {
    /// `f(h[index])`.
    pub fn new(arity: usize, index: usize, func: Arc<dyn Scalar>) -> Self {
        assert!(index < arity);
        Pointwise { arity, index, inner: 1.0, offset: None, func, scale: 1.0, weight: None, shift: None }
    }

    pub fn inner(mut self, inner: f64, offset: Option<Arc<[f64]>>) -> Self {
        self.inner = inner;
        self.offset = offset;
        self
    }

    pub fn outer(mut self, scale: f64, weight: Option<Arc<[f64]>>) -> Self {
        self.scale = scale;
        self.weight = weight;
        self
    }

    pub fn shift(mut self, shift: Option<Arc<[f64]>>) -> Self {
        self.shift = shift;
        self
    }

    pub fn boxed(self) -> Row {
        Arc::new(self)
    }
}

impl RowFunction for Pointwise {
    fn arity(&self) -> usize {
        self.arity
    }
    fn eval(&self, row: usize, h: &[f64]) -> f64 {
        let x = self.inner * h[self.index] + row_of(&self.offset, row, 0.0);
        self.scale * row_of(&self.weight, row, 1.0) * self.func.value(x) + row_of(&self.shift, row, 0.0)
    }
    fn partial(&self, row: usize, h: &[f64], which: usize) -> f64 {
        if which != self.index {
            return 0.0;
        }
        let x = self.inner * h[self.index] + row_of(&self.offset, row, 0.0);
        self.scale * row_of(&self.weight, row, 1.0) * self.func.deriv(x) * self.inner
    }
    fn gradient(&self, row: usize, h: &[f64], out: &mut [f64]) {
        out.iter_mut().take(self.arity).for_each(|o| *o = 0.0);
        out[self.index] = self.partial(row, h, self.index);
    }
    fn row_key(&self, row: usize) -> u64 {
        hash_f64s([
            row_of(&self.offset, row, 0.0),
            row_of(&self.weight, row, 1.0),
            row_of(&self.shift, row, 0.0),
        ])
    }
    fn describe(&self) -> String {
        format!("{}*{:?}({}*h[{}]+off)", self.scale, self.func, self.inner, self.index)
    }
}

/// `sum_j coeffs[j] h[j] + shift_r + constant`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub coeffs: Vec<f64>,
    pub shift: Option<Arc<[f64]>>,
    pub constant: f64,
}

impl Affine {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Affine { coeffs, shift: None, constant: 0.0 }
    }

    pub fn with_shift(mut self, shift: Option<Arc<[f64]>>, constant: f64) -> Self {
        self.shift = shift;
        self.constant = constant;
        self
    }

    pub fn boxed(self) -> Row {
        Arc::new(self)
    }
}

impl RowFunction for Affine {
    fn arity(&self) -> usize {
        self.coeffs.len()
    }
    fn eval(&self, row: usize, h: &[f64]) -> f64 {
        let lin: f64 = self.coeffs.iter().zip(h).map(|(c, x)| c * x).sum();
        lin + row_of(&self.shift, row, 0.0) + self.constant
    }
    fn partial(&self, _: usize, _: &[f64], which: usize) -> f64 {
        self.coeffs.get(which).copied().unwrap_or(0.0)
    }
    fn gradient(&self, _: usize, _: &[f64], out: &mut [f64]) {
        out[..self.coeffs.len()].copy_from_slice(&self.coeffs);
    }
    fn lipschitz_hint(&self) -> Option<f64> {
        Some(self.coeffs.iter().map(|c| c.abs()).sum())
    }
    fn row_key(&self, row: usize) -> u64 {
        hash_f64s([row_of(&self.shift, row, 0.0)])
    }
    fn is_zero(&self) -> bool {
        self.shift.is_none() && self.constant == 0.0 && self.coeffs.iter().all(|c| *c == 0.0)
    }
    fn describe(&self) -> String {
        format!("affine{:?}+{}", self.coeffs, self.constant)
    }
}

/// Sum of row functions sharing one arity.
#[derive(Clone)]
pub struct Sum(pub Vec<Row>);

impl RowFunction for Sum {
    fn arity(&self) -> usize {
        self.0.iter().map(|f| f.arity()).max().unwrap_or(0)
    }
    fn eval(&self, row: usize, h: &[f64]) -> f64 {
        self.0.iter().map(|f| f.eval(row, h)).sum()
    }
    fn partial(&self, row: usize, h: &[f64], which: usize) -> f64 {
        self.0.iter().filter(|f| which < f.arity()).map(|f| f.partial(row, h, which)).sum()
    }
    fn row_key(&self, row: usize) -> u64 {
        let mut h = DefaultHasher::new();
        for f in &self.0 {
            f.row_key(row).hash(&mut h);
        }
        h.finish()
    }
    fn is_zero(&self) -> bool {
        self.0.iter().all(|f| f.is_zero())
    }
    fn describe(&self) -> String {
        self.0.iter().map(|f| f.describe()).collect::<Vec<_>>().join(" + ")
    }
}

/// Closure-backed row function; every row is its own class.
pub struct FnRow {
    pub arity: usize,
    pub name: String,
    pub f: Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>,
    pub df: Arc<dyn Fn(usize, &[f64], usize) -> f64 + Send + Sync>,
}

impl RowFunction for FnRow {
    fn arity(&self) -> usize {
        self.arity
    }
    fn eval(&self, row: usize, h: &[f64]) -> f64 {
        (self.f)(row, h)
    }
    fn partial(&self, row: usize, h: &[f64], which: usize) -> f64 {
        if which >= self.arity {
            0.0
        } else {
            (self.df)(row, h, which)
        }
    }
    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// `-eta * d1 L_sigma(clamp(h[cur]), h[init]; xi_r)`: the logistic score track.
#[derive(Clone)]
pub struct LogisticScore {
    pub arity: usize,
    pub current: usize,
    pub init: usize,
    pub eta: f64,
    pub sigma: f64,
    pub clamp: f64,
    pub xi: Arc<[f64]>,
}

impl RowFunction for LogisticScore {
    fn arity(&self) -> usize {
        self.arity
    }
    fn eval(&self, row: usize, h: &[f64]) -> f64 {
        let x = h[self.current].clamp(-self.clamp, self.clamp);
        -self.eta * logistic::d1(self.sigma, x, h[self.init], self.xi[row])
    }
    fn partial(&self, row: usize, h: &[f64], which: usize) -> f64 {
        let raw = h[self.current];
        let x = raw.clamp(-self.clamp, self.clamp);
        let (dx, dy) = logistic::d1_gradient(self.sigma, x, h[self.init], self.xi[row]);
        let mut out = 0.0;
        if which == self.current && raw.abs() < self.clamp {
            out += -self.eta * dx;
        }
        if which == self.init {
            out += -self.eta * dy;
        }
        out
    }
    fn lipschitz_hint(&self) -> Option<f64> {
        Some(self.eta)
    }
    fn row_key(&self, row: usize) -> u64 {
        hash_f64s([self.xi[row]])
    }
    fn describe(&self) -> String {
        format!("logistic_score(eta={}, sigma={})", self.eta, self.sigma)
    }
}

/// Symmetric program over `R^n`. `f[t-1]` and `g[t-1]` are `F_t`, `G_t` with arity `t`.
#[derive(Clone)]
pub struct SymmetricProgram {
    pub name: String,
    pub f: Vec<Row>,
    pub g: Vec<Row>,
    pub z0: Array1<f64>,
}

impl SymmetricProgram {
    pub fn horizon(&self) -> usize {
        self.f.len()
    }

    pub fn dim(&self) -> usize {
        self.z0.len()
    }

    pub fn with_z0(mut self, z0: Array1<f64>) -> Self {
        self.z0 = z0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.f.len() != self.g.len() {
            return Err(Error::validation("program", "F and G must have the same length"));
        }
        for t in 1..=self.horizon() {
            if self.f[t - 1].arity() != t || self.g[t - 1].arity() != t {
                return Err(Error::validation("program", format!("F_{t} and G_{t} must have arity {t}")));
            }
        }
        Ok(())
    }

    /// Finite-difference check of every partial at `probes` random points per function.
    pub fn check_partials(&self, probes: usize, seed: u64) -> Result<()> {
        for (t, (f, g)) in self.f.iter().zip(&self.g).enumerate() {
            check_partials(f.as_ref(), self.dim(), probes, seed ^ (2 * t as u64))
                .map_err(|e| Error::validation(format!("F_{}", t + 1), e))?;
            check_partials(g.as_ref(), self.dim(), probes, seed ^ (2 * t as u64 + 1))
                .map_err(|e| Error::validation(format!("G_{}", t + 1), e))?;
        }
        Ok(())
    }
}

/// Asymmetric program with `A` of shape `m x n`, `u` in `R^m` and `v` in `R^n`.
///
/// For step `t`: `F1_t`, `F2_t` act on `v(0..t-1)` (arity `t`), `G1_t` on `u(0..t-1)`
/// (arity `t`) and `G2_t` on `u(0..t)` (arity `t + 1`).
#[derive(Clone)]
pub struct AsymmetricProgram {
    pub name: String,
    pub f1: Vec<Row>,
    pub f2: Vec<Row>,
    pub g1: Vec<Row>,
    pub g2: Vec<Row>,
    pub u0: Array1<f64>,
    pub v0: Array1<f64>,
}

impl AsymmetricProgram {
    pub fn horizon(&self) -> usize {
        self.f1.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.u0.len(), self.v0.len())
    }

    pub fn validate(&self) -> Result<()> {
        let t_max = self.horizon();
        if self.f2.len() != t_max || self.g1.len() != t_max || self.g2.len() != t_max {
            return Err(Error::validation("program", "F1, F2, G1, G2 must have the same length"));
        }
        for t in 1..=t_max {
            let i = t - 1;
            if self.f1[i].arity() != t || self.f2[i].arity() != t || self.g1[i].arity() != t {
                return Err(Error::validation("program", format!("F1_{t}, F2_{t}, G1_{t} must have arity {t}")));
            }
            if self.g2[i].arity() != t + 1 {
                return Err(Error::validation("program", format!("G2_{t} must have arity {}", t + 1)));
            }
        }
        Ok(())
    }

    pub fn check_partials(&self, probes: usize, seed: u64) -> Result<()> {
        let (m, n) = self.dims();
        for t in 0..self.horizon() {
            let s = seed ^ (4 * t as u64);
            check_partials(self.f1[t].as_ref(), n, probes, s).map_err(|e| Error::validation(format!("F1_{}", t + 1), e))?;
            check_partials(self.f2[t].as_ref(), n, probes, s + 1)
                .map_err(|e| Error::validation(format!("F2_{}", t + 1), e))?;
            check_partials(self.g1[t].as_ref(), m, probes, s + 2)
                .map_err(|e| Error::validation(format!("G1_{}", t + 1), e))?;
            check_partials(self.g2[t].as_ref(), m, probes, s + 3)
                .map_err(|e| Error::validation(format!("G2_{}", t + 1), e))?;
        }
        Ok(())
    }
}

/// Compares every partial of `f` with a central difference at `probes` random
/// `(row, history)` points. Steps are `1e-5 * max(1, |x|)`; agreement is required
/// to `1e-5` relative to `max(1, |partial|)`.
pub fn check_partials(f: &dyn RowFunction, rows: usize, probes: usize, seed: u64) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = f.arity();
    let mut h = vec![0.0; k];
    for _ in 0..probes {
        let row = rng.gen_range(0..rows.max(1));
        for x in h.iter_mut() {
            *x = 2.0 * rng.sample::<f64, _>(StandardNormal);
        }
        let v = f.eval(row, &h);
        if !v.is_finite() {
            return Err(format!("non-finite value at row {row}, history {h:?}"));
        }
        for j in 0..k {
            let step = 1e-5 * h[j].abs().max(1.0);
            let mut hp = h.clone();
            let mut hm = h.clone();
            hp[j] += step;
            hm[j] -= step;
            let fd = (f.eval(row, &hp) - f.eval(row, &hm)) / (2.0 * step);
            let an = f.partial(row, &h, j);
            if (fd - an).abs() > 1e-5 * an.abs().max(1.0) {
                return Err(format!("partial {j} at row {row}: analytic {an}, finite difference {fd}"));
            }
        }
    }
    Ok(())
}

fn arc(v: &Array1<f64>) -> Arc<[f64]> {
    Arc::from(v.as_slice().expect("contiguous").to_vec())
}

/// `F_t(z) = z(t-1)`, `G_t = 0`.
pub fn build_power_iteration(horizon: usize, z0: Array1<f64>) -> SymmetricProgram {
    SymmetricProgram {
        name: "power_iteration".into(),
        f: (1..=horizon).map(|t| Pointwise::new(t, t - 1, Arc::new(Identity)).boxed()).collect(),
        g: (1..=horizon).map(zero).collect(),
        z0,
    }
}

/// `F_t(z) = tanh(z(t-1))`, `G_t = 0`.
pub fn build_tanh_gfom(horizon: usize, z0: Array1<f64>) -> SymmetricProgram {
    SymmetricProgram {
        name: "tanh_gfom".into(),
        f: (1..=horizon).map(|t| Pointwise::new(t, t - 1, Arc::new(Tanh)).boxed()).collect(),
        g: (1..=horizon).map(zero).collect(),
        z0,
    }
}

/// Proximal gradient descent for `sum_i L(Y_i - <A_i, mu>) + sum_j f(mu_j)` with
/// `Y = A mu0 + xi`. The program tracks `u(t) = A(mu(t-1) - mu0)` and the pre-prox
/// variable `v(t)`, so `mu(t) = prox(v(t))`.
pub fn build_pgd_linear(
    loss: &Loss,
    prox: &ProxSpec,
    eta: f64,
    mu0: &Array1<f64>,
    xi: &Array1<f64>,
    horizon: usize,
) -> Result<AsymmetricProgram> {
    if !(eta > 0.0) {
        return Err(Error::validation("eta", "must be positive"));
    }
    prox.validate()?;
    let (m, n) = (xi.len(), mu0.len());
    let p: Arc<dyn Scalar> = Arc::new(Prox { spec: prox.clone(), eta });
    let neg_mu0: Arc<[f64]> = mu0.iter().map(|x| -x).collect();
    let xi = arc(xi);
    let dl: Arc<dyn Scalar> = Arc::new(LossDerivative(loss.clone()));
    Ok(AsymmetricProgram {
        name: "pgd_linear".into(),
        f1: (1..=horizon).map(|t| Pointwise::new(t, t - 1, p.clone()).shift(Some(neg_mu0.clone())).boxed()).collect(),
        f2: (1..=horizon).map(|t| Pointwise::new(t, t - 1, p.clone()).boxed()).collect(),
        g1: (1..=horizon).map(zero).collect(),
        g2: (1..=horizon)
            .map(|t| Pointwise::new(t + 1, t, dl.clone()).inner(-1.0, Some(xi.clone())).outer(eta, None).boxed())
            .collect(),
        u0: Array1::zeros(m),
        v0: Array1::from_elem(n, prox.preimage_of_zero(eta)),
    })
}

/// Iterate of [`build_pgd_linear`] at step `t`: `prox(v(t))`.
pub fn pgd_iterate(prox: &ProxSpec, eta: f64, v: &Array1<f64>) -> Array1<f64> {
    v.mapv(|x| prox.eval(eta, x).unwrap_or(f64::NAN))
}

/// Parameters of (stochastic) gradient descent with ridge penalty and optional momentum.
#[derive(Clone, Debug)]
pub struct GdParams {
    pub loss: Loss,
    pub eta: f64,
    pub lambda: f64,
    /// Heavy-ball coefficient; 0 gives plain gradient descent.
    pub beta: f64,
}

/// Gradient descent `mu(t) = mu(t-1) + eta sum_{i in S_{t-1}} A_i L'(Y_i - <A_i, mu(t-1)>) - eta lambda mu(t-1)`
/// (plus `beta (mu(t-1) - mu(t-2))` for `t >= 2`) started at `mu(0) = 0`.
/// The program tracks `v(t) = mu(t) - mu0` and `u(t) = A v(t-1)`.
/// `masks[t-1]` is the sample mask `S_{t-1}`; `None` uses every sample.
pub fn build_gd(
    params: &GdParams,
    mu0: &Array1<f64>,
    xi: &Array1<f64>,
    masks: Option<&[Vec<bool>]>,
    horizon: usize,
) -> Result<AsymmetricProgram> {
    let GdParams { loss, eta, lambda, beta } = params.clone();
    if !(eta > 0.0) {
        return Err(Error::validation("eta", "must be positive"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::validation("lambda", "must be nonnegative"));
    }
    let m = xi.len();
    if let Some(masks) = masks {
        if masks.len() < horizon || masks.iter().any(|s| s.len() != m) {
            return Err(Error::validation("masks", format!("need {horizon} masks of length {m}")));
        }
    }
    let xi_arc = arc(xi);
    let shift: Arc<[f64]> = mu0.iter().map(|x| -eta * lambda * x).collect();
    let dl: Arc<dyn Scalar> = Arc::new(LossDerivative(loss));
    let f2 = (1..=horizon)
        .map(|t| {
            let mut c = vec![0.0; t];
            c[t - 1] = 1.0 - eta * lambda;
            if t >= 2 && beta != 0.0 {
                c[t - 1] += beta;
                c[t - 2] -= beta;
            }
            Affine::new(c).with_shift(Some(shift.clone()), 0.0).boxed()
        })
        .collect();
    let g2 = (1..=horizon)
        .map(|t| {
            let w = masks.map(|s| s[t - 1].iter().map(|b| if *b { 1.0 } else { 0.0 }).collect::<Arc<[f64]>>());
            Pointwise::new(t + 1, t, dl.clone()).inner(-1.0, Some(xi_arc.clone())).outer(eta, w).boxed()
        })
        .collect();
    Ok(AsymmetricProgram {
        name: if beta == 0.0 { "gd_ridge" } else { "gd_momentum" }.into(),
        f1: (1..=horizon).map(|t| Pointwise::new(t, t - 1, Arc::new(Identity)).boxed()).collect(),
        f2,
        g1: (1..=horizon).map(zero).collect(),
        g2,
        u0: Array1::zeros(m),
        v0: mu0.mapv(|x| -x),
    })
}

/// Plain (stochastic) gradient descent with ridge penalty.
pub fn build_gd_ridge(
    loss: &Loss,
    eta: f64,
    lambda: f64,
    mu0: &Array1<f64>,
    xi: &Array1<f64>,
    masks: Option<&[Vec<bool>]>,
    horizon: usize,
) -> Result<AsymmetricProgram> {
    build_gd(&GdParams { loss: loss.clone(), eta, lambda, beta: 0.0 }, mu0, xi, masks, horizon)
}

/// Smoothed logistic regression by proximal gradient descent, `horizon` steps.
///
/// The returned program has `horizon + 1` steps: step 1 stores `u(1) = A mu0` (and
/// `v(1)` with `prox(v(1)) = 0`), and for `t >= 2`
/// `u(t) = A prox(v(t-1))`, `v(t) = A^T[-eta d1 L_sigma(u(t), u(1); xi)] + prox(v(t-1))`.
/// The logistic iterate `mu(t)` is `prox(v(t + 1))`.
pub fn build_logistic(
    prox: &ProxSpec,
    eta: f64,
    sigma: f64,
    mu0: &Array1<f64>,
    xi: &Array1<f64>,
    clamp: f64,
    horizon: usize,
) -> Result<AsymmetricProgram> {
    if !(sigma >= 0.0) {
        return Err(Error::validation("sigma", "must be nonnegative"));
    }
    if !(clamp > 0.0) {
        return Err(Error::validation("clamp", "must be positive"));
    }
    if !(eta > 0.0) {
        return Err(Error::validation("eta", "must be positive"));
    }
    prox.validate()?;
    let (m, n) = (xi.len(), mu0.len());
    let p: Arc<dyn Scalar> = Arc::new(Prox { spec: prox.clone(), eta });
    let xi = arc(xi);
    let steps = horizon + 1;
    let mut f1: Vec<Row> = vec![Affine::new(vec![0.0]).with_shift(Some(arc(mu0)), 0.0).boxed()];
    let mut f2: Vec<Row> = vec![Affine::new(vec![0.0]).with_shift(None, prox.preimage_of_zero(eta)).boxed()];
    let mut g2: Vec<Row> = vec![zero(2)];
    for t in 2..=steps {
        f1.push(Pointwise::new(t, t - 1, p.clone()).boxed());
        f2.push(Pointwise::new(t, t - 1, p.clone()).boxed());
        g2.push(Arc::new(LogisticScore { arity: t + 1, current: t, init: 1, eta, sigma, clamp, xi: xi.clone() }));
    }
    Ok(AsymmetricProgram {
        name: "logistic".into(),
        f1,
        f2,
        g1: (1..=steps).map(zero).collect(),
        g2,
        u0: Array1::zeros(m),
        v0: Array1::zeros(n),
    })
}

/// Block of the embedded program: evaluates `inner` on selected history entries for rows
/// inside `[start, start + len)` and returns 0 elsewhere.
struct Embedded {
    arity: usize,
    start: usize,
    len: usize,
    inner: Row,
    indices: Vec<usize>,
}

impl Embedded {
    fn gather(&self, h: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| h[i]).collect()
    }
    fn local(&self, row: usize) -> Option<usize> {
        (row >= self.start && row < self.start + self.len).then(|| row - self.start)
    }
}

impl RowFunction for Embedded {
    fn arity(&self) -> usize {
        self.arity
    }
    fn eval(&self, row: usize, h: &[f64]) -> f64 {
        match self.local(row) {
            Some(r) => self.inner.eval(r, &self.gather(h)),
            None => 0.0,
        }
    }
    fn partial(&self, row: usize, h: &[f64], which: usize) -> f64 {
        match (self.local(row), self.indices.iter().position(|&i| i == which)) {
            (Some(r), Some(p)) => self.inner.partial(r, &self.gather(h), p),
            _ => 0.0,
        }
    }
    fn row_key(&self, row: usize) -> u64 {
        match self.local(row) {
            Some(r) => self.inner.row_key(r) ^ 0x5555,
            None => 0,
        }
    }
    fn is_zero(&self) -> bool {
        self.inner.is_zero()
    }
    fn describe(&self) -> String {
        format!("embed[{}..{}]({})", self.start, self.start + self.len, self.inner.describe())
    }
}

fn embed(arity: usize, start: usize, len: usize, inner: &Row, indices: Vec<usize>) -> Row {
    if inner.is_zero() {
        return zero(arity);
    }
    Arc::new(Embedded { arity, start, len, inner: inner.clone(), indices })
}

/// Embeds an asymmetric program into a symmetric one over `R^{m+n}` driven by
/// `[[0, A], [A^T, 0]]` (see [`crate::dynamics::embed_matrix`]).
///
/// `z(0) = (u0, v0)`, `z(2t-1) = (u(t), 0)` and `z(2t) = (0, v(t))`, so the history of
/// `u` sits at indices `0, 1, 3, ..., 2t-1` and that of `v` at `0, 2, ..., 2t`.
pub fn symmetrize(prog: &AsymmetricProgram, m: usize, n: usize) -> Result<SymmetricProgram> {
    prog.validate()?;
    if prog.dims() != (m, n) {
        return Err(Error::Config(format!("program has dims {:?}, expected ({m}, {n})", prog.dims())));
    }
    let u_idx = |t: usize| -> Vec<usize> { (0..=t).map(|s| if s == 0 { 0 } else { 2 * s - 1 }).collect() };
    let v_idx = |t: usize| -> Vec<usize> { (0..=t).map(|s| 2 * s).collect() };
    let mut f = Vec::new();
    let mut g = Vec::new();
    for t in 1..=prog.horizon() {
        let i = t - 1;
        // Step 2t-1 produces u(t).
        f.push(embed(2 * t - 1, m, n, &prog.f1[i], v_idx(t - 1)));
        g.push(embed(2 * t - 1, 0, m, &prog.g1[i], u_idx(t - 1)));
        // Step 2t produces v(t).
        f.push(embed(2 * t, 0, m, &prog.g2[i], u_idx(t)));
        g.push(embed(2 * t, m, n, &prog.f2[i], v_idx(t - 1)));
    }
    let mut z0 = Array1::zeros(m + n);
    z0.slice_mut(ndarray::s![..m]).assign(&prog.u0);
    z0.slice_mut(ndarray::s![m..]).assign(&prog.v0);
    Ok(SymmetricProgram { name: format!("{}_embedded", prog.name), f, g, z0 })
}

fn random_row(arity: usize, rows: usize, rng: &mut ChaCha8Rng, scale: f64) -> Row {
    let mut parts: Vec<Row> = Vec::new();
    let idx = rng.gen_range(0..arity);
    let offsets: Arc<[f64]> = (0..rows).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let func: Arc<dyn Scalar> = if rng.gen::<bool>() { Arc::new(Tanh) } else { Arc::new(Sin) };
    parts.push(
        Pointwise::new(arity, idx, func)
            .inner(rng.gen_range(0.5..1.5), Some(offsets))
            .outer(scale * rng.gen_range(0.5..1.5), None)
            .boxed(),
    );
    let coeffs = (0..arity).map(|_| scale * rng.gen_range(-0.5..0.5) / arity as f64).collect();
    parts.push(Affine::new(coeffs).boxed());
    Arc::new(Sum(parts))
}

/// Random symmetric program mixing `tanh`/`sin` rows with per-row offsets and affine rows.
pub fn random_symmetric(n: usize, horizon: usize, seed: u64) -> SymmetricProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
    let mut f = Vec::new();
    let mut g = Vec::new();
    for t in 1..=horizon {
        f.push(random_row(t, n, &mut rng, 1.0));
        g.push(random_row(t, n, &mut rng, 0.3));
    }
    SymmetricProgram { name: "random".into(), f, g, z0 }
}

/// Asymmetric counterpart of [`random_symmetric`].
pub fn random_asymmetric(m: usize, n: usize, horizon: usize, seed: u64) -> AsymmetricProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u0 = Array1::from_shape_fn(m, |_| rng.sample::<f64, _>(StandardNormal));
    let v0 = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
    let (mut f1, mut f2, mut g1, mut g2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in 1..=horizon {
        f1.push(random_row(t, n, &mut rng, 1.0));
        f2.push(random_row(t, n, &mut rng, 0.3));
        g1.push(random_row(t, m, &mut rng, 0.3));
        g2.push(random_row(t + 1, m, &mut rng, 1.0));
    }
    AsymmetricProgram { name: "random".into(), f1, f2, g1, g2, u0, v0 }
}

/// Program keys accepted in config files.
pub const PROGRAM_KEYS: &[(&str, &str)] = &[
    ("power_iteration", "symmetric: F_t = z(t-1), G_t = 0"),
    ("tanh_gfom", "symmetric: F_t = tanh(z(t-1)), G_t = 0"),
    ("tanh_amp", "symmetric: AMP with F_t = tanh(z(t-1)) and state-evolution Onsager terms"),
    ("random", "symmetric or asymmetric: random tanh/sin/affine rows"),
    ("pgd_linear", "asymmetric: proximal gradient descent for a linear model"),
    ("gd_ridge", "asymmetric: (stochastic) gradient descent with ridge penalty"),
    ("gd_momentum", "asymmetric: gradient descent with heavy-ball momentum"),
    ("logistic", "asymmetric: smoothed logistic regression by proximal gradient descent"),
];
