//! Gaussian state evolution for symmetric and asymmetric first-order programs and AMP.
//!
//! A symmetric program is described by a transform `Theta_t` and a Gaussian path
//! `Z(1), Z(2), ...`; an asymmetric one by `(Phi_t, U)` and `(Xi_t, V)`. Expectations
//! over the Gaussian paths are Monte Carlo averages with common random numbers, and
//! derivatives through the transforms use the programs' analytic partials.
//!
//! The same transforms turn a program into an AMP iteration whose Onsager table is the
//! coefficient table of the state evolution ([`gfom_to_amp_symmetric`], [`gfom_to_amp_asymmetric`]). Pushing the AMP
//! iterates through the transform reproduces the program iterates exactly, for any
//! matrix.

mod engine;
mod map;

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use engine::{extend_cholesky, noise_columns, NEG_TOL};
pub use map::{ComposedRow, MapKind, TransformMap, Workspace};

use crate::dynamics::CoefTable;
use crate::ensembles::VarianceProfile;
use crate::error::{Error, Result};
use crate::programs::{AsymmetricProgram, FnRow, Row, SymmetricProgram};
use crate::seed::stream_rng;
use engine::Side;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    Analytic,
    /// Central differences through the whole transform; a cross-check, much slower.
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeOptions {
    pub mc_samples: usize,
    pub seed: u64,
    pub moment_matching: bool,
    pub derivative: DerivativeMode,
    /// Batches for the batch-means standard errors.
    pub batches: usize,
}

impl Default for SeOptions {
    fn default() -> Self {
        SeOptions {
            mc_samples: 20_000,
            seed: 0,
            moment_matching: true,
            derivative: DerivativeMode::Analytic,
            batches: 32,
        }
    }
}

impl SeOptions {
    pub fn with_samples(mut self, mc_samples: usize) -> Self {
        self.mc_samples = mc_samples;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self, horizon: usize) -> Result<()> {
        if self.batches < 2 {
            return Err(Error::validation("batches", "need at least 2"));
        }
        if self.mc_samples < 2 * self.batches || self.mc_samples <= horizon {
            return Err(Error::validation(
                "mc_samples",
                format!("need at least {} samples and more than the horizon {horizon}", 2 * self.batches),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    Symmetric,
    Asymmetric,
    AmpSymmetric,
    AmpAsymmetric,
}

/// Per-coordinate Gaussian laws of one path family. Coordinates sharing a profile
/// row share a class; index 0 of every matrix is the deterministic start.
#[derive(Clone, Debug)]
pub struct GaussianLawTable {
    pub init: Vec<f64>,
    pub law_of: Vec<usize>,
    pub covs: Vec<Array2<f64>>,
    pub chols: Vec<Array2<f64>>,
    pub homogeneous: bool,
}

impl GaussianLawTable {
    pub fn dim(&self) -> usize {
        self.init.len()
    }

    /// `Cov(X_k(t), X_k(s))` for `t, s >= 1`.
    pub fn cov(&self, k: usize, t: usize, s: usize) -> f64 {
        self.covs[self.law_of[k]][[t, s]]
    }

    pub fn matrix(&self, k: usize) -> &Array2<f64> {
        &self.covs[self.law_of[k]]
    }

    fn sample_input<R: Rng>(&self, k: usize, level: usize, rng: &mut R, input: &mut [f64], eps: &mut [f64]) {
        let l = &self.chols[self.law_of[k]];
        input[0] = self.init[k];
        for w in 1..=level {
            eps[w] = rng.sample(StandardNormal);
            input[w] = (1..=w).map(|j| l[[w, j]] * eps[j]).sum();
        }
    }
}

/// One path family of a state evolution: its transform, law and error bars.
#[derive(Clone, Debug)]
pub struct SideRecord {
    pub name: String,
    pub map: Arc<TransformMap>,
    pub law: GaussianLawTable,
    /// `cov_se[t][s]`: standard error of the coordinate-averaged `Cov(X(t), X(s))`.
    pub cov_se: Vec<Vec<f64>>,
    /// `coef_se[t][s]`: standard error of the coordinate-averaged coefficient `c[t][s]`.
    pub coef_se: Vec<Vec<f64>>,
    /// Expectation classes `(representative, members)`.
    pub classes: Vec<(usize, Vec<usize>)>,
}

impl SideRecord {
    fn from_side(side: Side) -> Self {
        SideRecord {
            name: side.name.to_string(),
            law: GaussianLawTable {
                init: side.init,
                homogeneous: side.law_reps.len() == 1,
                law_of: side.law_of,
                covs: side.covs,
                chols: side.chols,
            },
            map: Arc::new(side.map),
            cov_se: side.cov_se,
            coef_se: side.coef_se,
            classes: side.classes.into_iter().map(|c| (c.rep, c.members)).collect(),
        }
    }

    pub fn coefs(&self) -> &CoefTable {
        &self.map.coefs
    }

    /// Largest finite standard error over all stored covariances and coefficients.
    pub fn max_se(&self) -> f64 {
        self.cov_se.iter().chain(&self.coef_se).flatten().fold(0.0, |m: f64, x| m.max(*x))
    }

    fn to_json(&self) -> Value {
        let horizon = self.map.horizon();
        let coefs: Vec<Vec<Vec<f64>>> =
            (1..=horizon).map(|t| (1..=t).map(|s| self.map.coefs.get(t, s).to_vec()).collect()).collect();
        let covs: Vec<Vec<Vec<f64>>> = self
            .law
            .covs
            .iter()
            .map(|c| c.outer_iter().skip(1).map(|r| r.iter().skip(1).copied().collect()).collect())
            .collect();
        json!({
            "name": self.name,
            "map": self.map.kind,
            "coefficients": coefs,
            "coefficient_se": self.coef_se.iter().skip(1).map(|r| r.iter().skip(1).copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "covariances": covs,
            "covariance_se": self.cov_se.iter().skip(1).map(|r| r.iter().skip(1).copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "law_of": self.law.law_of,
            "homogeneous": self.law.homogeneous,
        })
    }
}

/// Output of a state-evolution run.
#[derive(Clone, Debug)]
pub struct SeRecord {
    pub kind: SeKind,
    pub horizon: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// `[z]` for symmetric runs, `[u, v]` for asymmetric ones.
    pub sides: Vec<SideRecord>,
}

/// Path family selector for predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Z,
    U,
    V,
}

impl SeRecord {
    pub fn side(&self, track: Track) -> Result<&SideRecord> {
        let symmetric = matches!(self.kind, SeKind::Symmetric | SeKind::AmpSymmetric);
        match (track, symmetric) {
            (Track::Z, true) => Ok(&self.sides[0]),
            (Track::U, false) => Ok(&self.sides[0]),
            (Track::V, false) => Ok(&self.sides[1]),
            _ => Err(Error::validation("track", format!("{track:?} is not part of a {:?} record", self.kind))),
        }
    }

    /// Keeps iterations `1..=horizon`.
    pub fn truncated(&self, horizon: usize) -> SeRecord {
        let cut = |v: &[Vec<f64>]| v[..=horizon].to_vec();
        let sides = self
            .sides
            .iter()
            .map(|s| {
                let map = TransformMap {
                    kind: s.map.kind,
                    outs: s.map.outs[..horizon].to_vec(),
                    drift: s.map.drift[..horizon.min(s.map.drift.len())].to_vec(),
                    coefs: s.map.coefs.truncated(horizon),
                };
                let sub = |m: &Array2<f64>| m.slice(ndarray::s![..=horizon, ..=horizon]).to_owned();
                SideRecord {
                    name: s.name.clone(),
                    map: Arc::new(map),
                    law: GaussianLawTable {
                        covs: s.law.covs.iter().map(sub).collect(),
                        chols: s.law.chols.iter().map(sub).collect(),
                        ..s.law.clone()
                    },
                    cov_se: cut(&s.cov_se),
                    coef_se: cut(&s.coef_se),
                    classes: s.classes.clone(),
                }
            })
            .collect();
        SeRecord { horizon, sides, ..self.clone() }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "kind": self.kind,
            "horizon": self.horizon,
            "mc_samples": self.mc_samples,
            "seed": self.seed,
            "sides": self.sides.iter().map(|s| s.to_json()).collect::<Vec<_>>(),
        })
    }
}

fn check_profile(profile: &VarianceProfile, shape: (usize, usize), symmetric: bool) -> Result<()> {
    profile.validate()?;
    if profile.shape() != shape {
        return Err(Error::Config(format!("profile is {:?}, expected {:?}", profile.shape(), shape)));
    }
    if symmetric && !profile.is_symmetric() {
        return Err(Error::validation("profile", "must be symmetric for a symmetric program"));
    }
    Ok(())
}

fn symmetric_run(kind: SeKind, map: TransformMap, z0: &Array1<f64>, profile: &VarianceProfile, opts: &SeOptions) -> Result<SeRecord> {
    let horizon = map.horizon();
    opts.validate(horizon)?;
    let n = z0.len();
    check_profile(profile, (n, n), true)?;
    let mut z = Side::new("z", z0.to_vec(), map, profile.clone(), opts, "se-z");
    let w = z.source_weights();
    for t in 1..=horizon {
        let mom = z.moments(t, &w, opts)?;
        z.receive(&mom)?;
    }
    Ok(SeRecord { kind, horizon, mc_samples: opts.mc_samples, seed: opts.seed, sides: vec![SideRecord::from_side(z)] })
}

#[allow(clippy::too_many_arguments)]
fn asymmetric_run(
    kind: SeKind,
    phi: TransformMap,
    xi: TransformMap,
    u0: &Array1<f64>,
    v0: &Array1<f64>,
    profile: &VarianceProfile,
    opts: &SeOptions,
) -> Result<SeRecord> {
    let horizon = phi.horizon();
    opts.validate(horizon)?;
    let (m, n) = (u0.len(), v0.len());
    check_profile(profile, (m, n), false)?;
    let mut u = Side::new("u", u0.to_vec(), phi, profile.clone(), opts, "se-u");
    let mut v = Side::new("v", v0.to_vec(), xi, profile.transposed(), opts, "se-v");
    let wv = u.source_weights();
    let wu = v.source_weights();
    for t in 1..=horizon {
        let mom = v.moments(t, &wv, opts)?;
        u.receive(&mom)?;
        let mom = u.moments(t, &wu, opts)?;
        v.receive(&mom)?;
    }
    Ok(SeRecord {
        kind,
        horizon,
        mc_samples: opts.mc_samples,
        seed: opts.seed,
        sides: vec![SideRecord::from_side(u), SideRecord::from_side(v)],
    })
}

/// State evolution of a symmetric program: the transform `Theta`, its coefficients
/// `b[t][s]` and the laws of `Z(1..=T)`, with `Z(0) = prog.z0`.
pub fn se_symmetric(prog: &SymmetricProgram, profile: &VarianceProfile, opts: &SeOptions) -> Result<SeRecord> {
    prog.validate()?;
    let map = TransformMap::new(MapKind::Theta, prog.f.clone(), prog.g.clone(), prog.dim());
    symmetric_run(SeKind::Symmetric, map, &prog.z0, profile, opts)
}

/// State evolution of an asymmetric program. The `u` side carries `Phi` with
/// coefficients `f[t][s]` (that is, `f_s^{(t-1)}`) and the laws of `U`; the `v` side
/// carries `Xi` with `g[t][s]` and the laws of `V`.
pub fn se_asymmetric(prog: &AsymmetricProgram, profile: &VarianceProfile, opts: &SeOptions) -> Result<SeRecord> {
    prog.validate()?;
    let (m, n) = prog.dims();
    let phi = TransformMap::new(MapKind::Phi, prog.g2.clone(), prog.g1.clone(), m);
    let xi = TransformMap::new(MapKind::Xi, prog.f1.clone(), prog.f2.clone(), n);
    asymmetric_run(SeKind::Asymmetric, phi, xi, &prog.u0, &prog.v0, profile, opts)
}

fn check_arities(fns: &[Row], extra: usize, what: &str) -> Result<()> {
    for (i, f) in fns.iter().enumerate() {
        if f.arity() != i + 1 + extra {
            return Err(Error::validation(what, format!("function {} must have arity {}", i + 1, i + 1 + extra)));
        }
    }
    Ok(())
}

/// State evolution of the symmetric AMP driven by `fns` (`fns[t-1]` has arity `t`).
/// The coefficient table of the returned side is the Onsager table.
pub fn amp_se_symmetric(fns: &[Row], z0: &Array1<f64>, profile: &VarianceProfile, opts: &SeOptions) -> Result<SeRecord> {
    check_arities(fns, 0, "amp_fns")?;
    let map = TransformMap::new(MapKind::Identity, fns.to_vec(), Vec::new(), z0.len());
    symmetric_run(SeKind::AmpSymmetric, map, z0, profile, opts)
}

/// State evolution of the asymmetric AMP with `F` (arity `t`) and `G` (arity `t + 1`).
/// The `u` side's table is the Onsager table for `u`, the `v` side's for `v`.
pub fn amp_se_asymmetric(
    f_fns: &[Row],
    g_fns: &[Row],
    u0: &Array1<f64>,
    v0: &Array1<f64>,
    profile: &VarianceProfile,
    opts: &SeOptions,
) -> Result<SeRecord> {
    check_arities(f_fns, 0, "f_fns")?;
    check_arities(g_fns, 1, "g_fns")?;
    if f_fns.len() != g_fns.len() {
        return Err(Error::Config("F and G sequences differ in length".into()));
    }
    let phi = TransformMap::new(MapKind::Identity, g_fns.to_vec(), Vec::new(), u0.len());
    let xi = TransformMap::new(MapKind::Identity, f_fns.to_vec(), Vec::new(), v0.len());
    asymmetric_run(SeKind::AmpAsymmetric, phi, xi, u0, v0, profile, opts)
}

/// AMP induced by a symmetric program: `fns[t-1] = F_t o Theta_{t-1}` with Onsager
/// table `b`.
#[derive(Clone)]
pub struct SymmetricReduction {
    pub fns: Vec<Row>,
    pub onsager: CoefTable,
    pub theta: Arc<TransformMap>,
}

impl SymmetricReduction {
    /// `Theta_t(z(0..t))_t` for every `t`, given AMP iterates `z(0..=T)`.
    pub fn transform(&self, amp: &[Array1<f64>]) -> Vec<Array1<f64>> {
        (0..amp.len()).map(|t| self.theta.apply_column(&amp[..=t], t)).collect()
    }
}

/// AMP induced by an asymmetric program: `f_fns[t-1] = F1_t o Xi_{t-1}` and
/// `g_fns[t-1] = G2_t o Phi_t`, with Onsager tables `f` (for `u`) and `g` (for `v`).
#[derive(Clone)]
pub struct AsymmetricReduction {
    pub f_fns: Vec<Row>,
    pub g_fns: Vec<Row>,
    pub b_f: CoefTable,
    pub b_g: CoefTable,
    pub phi: Arc<TransformMap>,
    pub xi: Arc<TransformMap>,
}

impl AsymmetricReduction {
    /// `(Phi_t(u(0..t))_t, Xi_t(v(0..t))_t)` for every `t`.
    pub fn transform(&self, u: &[Array1<f64>], v: &[Array1<f64>]) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
        let pu = (0..u.len()).map(|t| self.phi.apply_column(&u[..=t], t)).collect();
        let pv = (0..v.len()).map(|t| self.xi.apply_column(&v[..=t], t)).collect();
        (pu, pv)
    }
}

fn composed(map: &Arc<TransformMap>) -> Vec<Row> {
    (1..=map.horizon()).map(|t| Arc::new(ComposedRow { map: map.clone(), index: t }) as Row).collect()
}

pub fn gfom_to_amp_symmetric(se: &SeRecord) -> Result<SymmetricReduction> {
    if se.kind != SeKind::Symmetric {
        return Err(Error::Config(format!("expected a symmetric state evolution, got {:?}", se.kind)));
    }
    let theta = se.sides[0].map.clone();
    Ok(SymmetricReduction { fns: composed(&theta), onsager: theta.coefs.clone(), theta })
}

pub fn gfom_to_amp_asymmetric(se: &SeRecord) -> Result<AsymmetricReduction> {
    if se.kind != SeKind::Asymmetric {
        return Err(Error::Config(format!("expected an asymmetric state evolution, got {:?}", se.kind)));
    }
    let phi = se.sides[0].map.clone();
    let xi = se.sides[1].map.clone();
    Ok(AsymmetricReduction {
        f_fns: composed(&xi),
        g_fns: composed(&phi),
        b_f: phi.coefs.clone(),
        b_g: xi.coefs.clone(),
        phi,
        xi,
    })
}

/// Symmetric program equal to the AMP `z(t) = A fns_t(z) - sum_s b[t][s] fns_s(z)`:
/// `F_t = fns_t` and `G_t = -sum_{s<t} b[t][s] fns_s`.
pub fn amp_as_gfom(name: &str, fns: &[Row], onsager: &CoefTable, z0: Array1<f64>) -> Result<SymmetricProgram> {
    check_arities(fns, 0, "amp_fns")?;
    let mut g: Vec<Row> = Vec::new();
    for t in 1..=fns.len() {
        let prev: Vec<Row> = fns[..t - 1].to_vec();
        let coefs: Vec<Vec<f64>> = (1..t).map(|s| onsager.get(t, s).to_vec()).collect();
        let (p2, c2) = (prev.clone(), coefs.clone());
        g.push(Arc::new(FnRow {
            arity: t,
            name: format!("onsager_{t}"),
            f: Arc::new(move |row, h| -prev.iter().zip(&coefs).map(|(f, c)| c[row] * f.eval(row, &h[..f.arity()])).sum::<f64>()),
            df: Arc::new(move |row, h, j| {
                -p2.iter()
                    .zip(&c2)
                    .filter(|(f, _)| j < f.arity())
                    .map(|(f, c)| c[row] * f.partial(row, &h[..f.arity()], j))
                    .sum::<f64>()
            }),
        }));
    }
    Ok(SymmetricProgram { name: name.to_string(), f: fns.to_vec(), g, z0 })
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = if x.len() > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Estimate { mean, se: (var / n).sqrt() }
    }
}

fn check_level(side: &SideRecord, t: usize) -> Result<()> {
    if t > side.map.horizon() {
        return Err(Error::validation("t", format!("{t} exceeds the state-evolution horizon {}", side.map.horizon())));
    }
    Ok(())
}

/// Samples of `[transform_t(X(0..t))]_{k,t}` for one coordinate, from stream `k` of
/// `(seed, "predict")`.
pub fn predict_marginals(se: &SeRecord, track: Track, k: usize, t: usize, n_paths: usize, seed: u64) -> Result<Vec<f64>> {
    let side = se.side(track)?;
    check_level(side, t)?;
    if k >= side.law.dim() {
        return Err(Error::validation("coordinate", format!("{k} out of range")));
    }
    let mut rng = stream_rng(seed, "predict", k as u64);
    let mut ws = Workspace::new(t);
    let mut input = vec![0.0; t + 1];
    let mut eps = vec![0.0; t + 1];
    Ok((0..n_paths)
        .map(|_| {
            side.law.sample_input(k, t, &mut rng, &mut input, &mut eps);
            side.map.forward(k, &input, t, &mut ws, false);
            ws.x[t]
        })
        .collect())
}

/// `E psi(x_S)` with `x = [transform_t(X(0..t))]_{., t}` restricted to `coords`. Rows
/// are independent, so every coordinate draws from its own stream.
pub fn predict_entrywise(
    se: &SeRecord,
    track: Track,
    coords: &[usize],
    t: usize,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    let columns = coords
        .iter()
        .map(|&k| predict_marginals(se, track, k, t, n_paths, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut point = vec![0.0; coords.len()];
    let vals: Vec<f64> = (0..n_paths)
        .map(|i| {
            for (p, c) in point.iter_mut().zip(&columns) {
                *p = c[i];
            }
            psi(&point)
        })
        .collect();
    Ok(Estimate::from_samples(&vals))
}

/// `(1/dim) sum_k E psi(x_k)`, estimated once per expectation class.
pub fn predict_average(
    se: &SeRecord,
    track: Track,
    t: usize,
    psi: &(dyn Fn(f64) -> f64 + Sync),
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    let side = se.side(track)?;
    check_level(side, t)?;
    let dim = side.law.dim() as f64;
    let parts = side
        .classes
        .par_iter()
        .map(|(rep, members)| {
            let xs = predict_marginals(se, track, *rep, t, n_paths, seed)?;
            let e = Estimate::from_samples(&xs.iter().map(|x| psi(*x)).collect::<Vec<_>>());
            Ok((members.len() as f64 / dim, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = parts.iter().map(|(w, e)| w * e.mean).sum();
    let var: f64 = parts.iter().map(|(w, e)| (w * e.se).powi(2)).sum();
    Ok(Estimate { mean, se: var.sqrt() })
}
