//! State evolution for (stochastic) gradient descent with a ridge penalty.
//!
//! Gradient descent `mu(t) = mu(t-1) + eta sum_{i in S_{t-1}} A_i L'(Y_i - <A_i, mu(t-1)>)
//! - eta lambda mu(t-1)`, `Y = A mu0 + xi`, started from `mu(0) = 0`, has linear `Xi`
//! transforms, so the state evolution reduces to matrices `M_l` with
//! `[Xi_t(v)]_{l,t} = sum_r (M_l)_{r,t} v_l(r)`, Gaussian laws `Sigma^U_k`, `Sigma^V_l`, and
//! a scalar transform `Phi_t`. The entrywise prediction is
//! `mu_l(t) - mu0_l ~ N(b_l(t) mu0_l, sigma2_l(t))` with `b_l(t) = -(M_l)_{0,t}`.
//!
//! The derivative of `Phi_t` in `U(s)` is computed by the recursion
//! `D_s(t) = delta_{s,t} - eta sum_{r in [s, t-1]} f_r^{(t-1)} W(r) D_s(r)`;
//! [`g_coefficient_nested_sum`] expands it into the explicit sum over chains
//! `t > r_1 > ... > r_tau > s` as an independent check.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::dynamics::CoefTable;
use crate::ensembles::VarianceProfile;
use crate::erm::loss::Loss;
use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::state_evolution::{extend_cholesky, noise_columns, SeOptions, NEG_TOL};

/// Largest `t - s` accepted by [`g_coefficient_nested_sum`].
pub const NESTED_SUM_MAX_GAP: usize = 8;

#[derive(Clone, Debug)]
pub struct GdSeInput {
    pub loss: Loss,
    pub eta: f64,
    pub lambda: f64,
    pub mu0: Array1<f64>,
    pub xi: Array1<f64>,
    /// `masks[t-1]` is `S_{t-1}`; `None` uses every sample at every step.
    pub masks: Option<Vec<Vec<bool>>>,
    /// Second moments `E A_{kl}^2`, shape `m x n`.
    pub profile: VarianceProfile,
    pub horizon: usize,
}

impl GdSeInput {
    pub fn dims(&self) -> (usize, usize) {
        (self.xi.len(), self.mu0.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.dims();
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::validation("eta", "must be finite and nonnegative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation("lambda", "must be finite and nonnegative"));
        }
        self.profile.validate()?;
        if self.profile.shape() != (m, n) {
            return Err(Error::Config(format!("profile is {:?}, expected ({m}, {n})", self.profile.shape())));
        }
        if let Some(masks) = &self.masks {
            if masks.len() < self.horizon || masks.iter().any(|s| s.len() != m) {
                return Err(Error::validation("masks", format!("need {} masks of length {m}", self.horizon)));
            }
        }
        Ok(())
    }

    fn mask_weights(&self) -> Vec<Vec<f64>> {
        let (m, _) = self.dims();
        (0..self.horizon)
            .map(|t| match &self.masks {
                Some(s) => s[t].iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
                None => vec![1.0; m],
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct UClass {
    rep: usize,
    law: usize,
    members: Vec<usize>,
}

/// Output of [`gd_se`].
#[derive(Clone, Debug)]
pub struct GdSeState {
    pub horizon: usize,
    pub eta: f64,
    pub lambda: f64,
    pub mc_samples: usize,
    pub seed: u64,
    /// Per `l`, `(M_l)_{r,t}` for `r, t in [0, T]`; zero below the diagonal.
    pub mv: Vec<Array2<f64>>,
    /// Per `l`, `(Sigma^V_l)_{t,s}` for `t, s in [0, T]`.
    pub sigma_v: Vec<Array2<f64>>,
    /// Per law class of `U`, `(Sigma^U)_{t,s}` for `t, s in [1, T]` (row and column 0 unused).
    pub sigma_u: Vec<Array2<f64>>,
    pub u_law_of: Vec<usize>,
    /// `f.get(t, s)` is `f_s^{(t-1)}` in `R^m`.
    pub f: CoefTable,
    /// `g.get(t, s)` is `g_s^{(t)}` in `R^n`.
    pub g: CoefTable,
    /// Standard errors of the `l`-averaged `g_s^{(t)}` and `(Sigma^V)_{t,s}`.
    pub g_se: Vec<Vec<f64>>,
    pub sigma_v_se: Vec<Vec<f64>>,
    chol_u: Vec<Array2<f64>>,
    classes: Vec<UClass>,
    eps: Vec<Vec<f64>>,
    loss: Loss,
    xi: Vec<f64>,
    masks: Vec<Vec<f64>>,
    profile: VarianceProfile,
    batches: usize,
}

/// Per-sample quantities along one `U` path.
struct PathBuf {
    phi: Vec<f64>,
    w: Vec<f64>,
    l1: Vec<f64>,
    d: Vec<f64>,
}

impl PathBuf {
    fn new(t: usize) -> Self {
        PathBuf { phi: vec![0.0; t + 1], w: vec![0.0; t + 1], l1: vec![0.0; t + 1], d: vec![0.0; t + 1] }
    }
}

/// `D_s(t)` for one row by the recursion; `f(q, r)` is `f_r^{(q-1)}`.
fn d_recursion(f: &dyn Fn(usize, usize) -> f64, w: &[f64], s: usize, t: usize, eta: f64, d: &mut [f64]) -> f64 {
    d[s] = 1.0;
    for r in s + 1..=t {
        let mut acc = 0.0;
        for q in s..r {
            acc += f(r, q) * w[q] * d[q];
        }
        d[r] = -eta * acc;
    }
    d[t]
}

/// `D_s(t)` for one row as the explicit sum over chains `t > r_1 > ... > r_tau > s`.
fn nested_sum(f: &dyn Fn(usize, usize) -> f64, w: &[f64], s: usize, t: usize, eta: f64) -> f64 {
    if s == t {
        return 1.0;
    }
    let inner: Vec<usize> = (s + 1..t).rev().collect();
    let mut total = 0.0;
    for subset in 0u32..(1u32 << inner.len()) {
        let mut chain = vec![t];
        chain.extend(inner.iter().enumerate().filter(|(i, _)| subset & (1 << i) != 0).map(|(_, r)| *r));
        chain.push(s);
        let tau = chain.len() - 2;
        let mut prod = (-eta).powi(tau as i32 + 1);
        for pair in chain.windows(2) {
            prod *= f(pair[0], pair[1]) * w[pair[1]];
        }
        total += prod;
    }
    total
}

fn batch_se(b: &[f64]) -> f64 {
    let nb = b.len() as f64;
    let mean = b.iter().sum::<f64>() / nb;
    let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nb - 1.0);
    (var / nb).sqrt()
}

fn group_classes(input: &GdSeInput, masks: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>, Vec<UClass>) {
    let (m, _) = input.dims();
    let mut law_index: HashMap<u64, usize> = HashMap::new();
    let mut law_of = Vec::with_capacity(m);
    let mut law_reps = Vec::new();
    for k in 0..m {
        let next = law_reps.len();
        let l = *law_index.entry(input.profile.row_key(k)).or_insert(next);
        if l == next {
            law_reps.push(k);
        }
        law_of.push(l);
    }
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut classes: Vec<UClass> = Vec::new();
    for k in 0..m {
        let mut key = vec![law_of[k] as u64, input.xi[k].to_bits()];
        key.extend(masks.iter().map(|s| s[k].to_bits()));
        let next = classes.len();
        let c = *index.entry(key).or_insert(next);
        if c == next {
            classes.push(UClass { rep: k, law: law_of[k], members: Vec::new() });
        }
        classes[c].members.push(k);
    }
    (law_of, law_reps, classes)
}

impl GdSeState {
    pub fn dims(&self) -> (usize, usize) {
        (self.xi.len(), self.mv.len())
    }

    /// Fills `phi`, `w = L''`, `l1 = L'` (masked) at levels `1..=t` for sample `i`.
    fn path(&self, class: &UClass, i: usize, t: usize, buf: &mut PathBuf) -> Result<()> {
        let k = class.rep;
        let chol = &self.chol_u[class.law];
        let xi = self.xi[k];
        for tau in 1..=t {
            let mut phi = 0.0;
            for j in 1..=tau {
                phi += chol[[tau, j]] * self.eps[j - 1][i];
            }
            for s in 1..tau {
                phi += self.eta * self.f.get(tau, s)[k] * buf.l1[s];
            }
            if !phi.is_finite() {
                return Err(Error::Numerical(format!("Phi_{tau} is not finite at row {k}")));
            }
            let mask = self.masks[tau - 1][k];
            buf.phi[tau] = phi;
            buf.l1[tau] = mask * self.loss.d1(xi - phi);
            buf.w[tau] = mask * self.loss.d2(xi - phi);
        }
        Ok(())
    }

    fn sample_range(&self, b: usize) -> std::ops::Range<usize> {
        let n = self.mc_samples;
        (b * n / self.batches)..((b + 1) * n / self.batches)
    }

    /// Per class and batch: sums of `W(t) D_s(t)` for `s in 1..=t`, then `L'(t) L'(s)`.
    fn step_sums(&self, t: usize) -> Result<Vec<Vec<f64>>> {
        let tasks: Vec<(usize, usize)> =
            (0..self.classes.len()).flat_map(|c| (0..self.batches).map(move |b| (c, b))).collect();
        tasks
            .par_iter()
            .map(|&(c, b)| {
                let class = &self.classes[c];
                let k = class.rep;
                let f = |q: usize, r: usize| self.f.get(q, r)[k];
                let mut buf = PathBuf::new(t);
                let mut acc = vec![0.0; 2 * t];
                for i in self.sample_range(b) {
                    self.path(class, i, t, &mut buf)?;
                    for s in 1..=t {
                        acc[s - 1] += buf.w[t] * d_recursion(&f, &buf.w, s, t, self.eta, &mut buf.d);
                        acc[t + s - 1] += buf.l1[t] * buf.l1[s];
                    }
                }
                Ok(acc)
            })
            .collect()
    }

    /// Weights `w_k` with `sum_k w_k E_k` equal to the `l`-average of `sum_k P_kl E_k`.
    fn row_weights(&self) -> Vec<f64> {
        let (_, n) = self.dims();
        self.profile.apply(&vec![1.0 / n as f64; n])
    }

    /// Scatters per-class means to `R^n` through the profile: `sum_k P_kl E_k`.
    fn scatter(&self, class_means: &[f64]) -> Vec<f64> {
        let (m, _) = self.dims();
        let mut per_k = vec![0.0; m];
        for (c, class) in self.classes.iter().enumerate() {
            for &k in &class.members {
                per_k[k] = class_means[c];
            }
        }
        self.profile.apply_transpose(&per_k)
    }

    fn run_step(&mut self, t: usize) -> Result<()> {
        let (m, n) = self.dims();
        let (eta, lambda) = (self.eta, self.lambda);
        // (1) Sigma^U row t.
        for s in 1..=t {
            let q: Vec<f64> = (0..n)
                .map(|l| {
                    let mv = &self.mv[l];
                    let sv = &self.sigma_v[l];
                    let mut acc = 0.0;
                    for r in 0..t {
                        for p in 0..s {
                            acc += mv[[r, t - 1]] * sv[[r, p]] * mv[[p, s - 1]];
                        }
                    }
                    acc
                })
                .collect();
            let cov = self.profile.apply(&q);
            for (law, chol_rep) in self.law_reps().into_iter().enumerate() {
                self.sigma_u[law][[t, s]] = cov[chol_rep];
                self.sigma_u[law][[s, t]] = cov[chol_rep];
            }
        }
        for law in 0..self.sigma_u.len() {
            extend_cholesky(&self.sigma_u[law], &mut self.chol_u[law], t)
                .map_err(|e| Error::Numerical(format!("Sigma^U law {law}: {e}")))?;
        }
        // (2) f^{(t-1)}_s.
        for s in 1..t {
            let col: Vec<f64> = (0..n).map(|l| self.mv[l][[s, t - 1]]).collect();
            self.f.set(t, s, self.profile.apply(&col));
        }
        // (3)-(4) Monte Carlo over U paths.
        let sums = self.step_sums(t)?;
        let nb = self.batches;
        let nc = self.classes.len();
        let mut means = vec![vec![0.0; nc]; 2 * t];
        for c in 0..nc {
            for b in 0..nb {
                for (j, v) in sums[c * nb + b].iter().enumerate() {
                    means[j][c] += v;
                }
            }
        }
        means.iter_mut().flatten().for_each(|v| *v /= self.mc_samples as f64);
        let rw = self.row_weights();
        let class_w: Vec<f64> = self.classes.iter().map(|c| c.members.iter().map(|&k| rw[k]).sum()).collect();
        let mut batch = vec![vec![0.0; nb]; 2 * t];
        for c in 0..nc {
            for b in 0..nb {
                let size = self.sample_range(b).len() as f64;
                for (j, v) in sums[c * nb + b].iter().enumerate() {
                    batch[j][b] += class_w[c] * v / size;
                }
            }
        }
        let mut g_se = vec![0.0; t + 1];
        let mut sv_se = vec![0.0; t + 1];
        for s in 1..=t {
            let g: Vec<f64> = self.scatter(&means[s - 1]).into_iter().map(|x| -eta * x).collect();
            self.g.set(t, s, g);
            g_se[s] = eta * batch_se(&batch[s - 1]);
            let sv = self.scatter(&means[t + s - 1]);
            for (l, x) in sv.into_iter().enumerate() {
                self.sigma_v[l][[t, s]] = eta * eta * x;
                self.sigma_v[l][[s, t]] = eta * eta * x;
            }
            sv_se[s] = eta * eta * batch_se(&batch[t + s - 1]);
        }
        self.g_se[t] = g_se;
        self.sigma_v_se[t] = sv_se;
        // (3) column t of M.
        for l in 0..n {
            let mv = &mut self.mv[l];
            for r in 0..t {
                let mut v = (1.0 - eta * lambda) * mv[[r, t - 1]];
                for s in r + 1..=t {
                    v += self.g.get(t, s)[l] * mv[[r, s - 1]];
                }
                if r == 0 {
                    v += eta * lambda;
                }
                mv[[r, t]] = v;
            }
            mv[[t, t]] = 1.0;
        }
        let _ = m;
        Ok(())
    }

    fn law_reps(&self) -> Vec<usize> {
        let mut reps = vec![usize::MAX; self.sigma_u.len()];
        for (k, &l) in self.u_law_of.iter().enumerate() {
            if reps[l] == usize::MAX {
                reps[l] = k;
            }
        }
        reps
    }

    fn g_by(&self, s: usize, t: usize, nested: bool) -> Result<Vec<f64>> {
        if s == 0 || s > t || t > self.horizon {
            return Err(Error::validation("(s, t)", format!("need 1 <= s <= t <= {}, got ({s}, {t})", self.horizon)));
        }
        if nested && t - s > NESTED_SUM_MAX_GAP {
            return Err(Error::validation(
                "(s, t)",
                format!("nested sum has 2^(t-s-1) terms; t - s = {} exceeds {NESTED_SUM_MAX_GAP}", t - s),
            ));
        }
        let means = self
            .classes
            .par_iter()
            .map(|class| {
                let k = class.rep;
                let f = |q: usize, r: usize| self.f.get(q, r)[k];
                let mut buf = PathBuf::new(t);
                let mut acc = 0.0;
                for i in 0..self.mc_samples {
                    self.path(class, i, t, &mut buf)?;
                    let d = if nested {
                        nested_sum(&f, &buf.w, s, t, self.eta)
                    } else {
                        d_recursion(&f, &buf.w, s, t, self.eta, &mut buf.d)
                    };
                    acc += buf.w[t] * d;
                }
                Ok(acc / self.mc_samples as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(self.scatter(&means).into_iter().map(|x| -self.eta * x).collect())
    }

    pub fn to_json(&self) -> Value {
        let mat = |a: &Array2<f64>| a.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let table = |c: &CoefTable| {
            (1..=self.horizon).map(|t| (1..=t).map(|s| c.get(t, s).to_vec()).collect::<Vec<_>>()).collect::<Vec<_>>()
        };
        json!({
            "horizon": self.horizon,
            "eta": self.eta,
            "lambda": self.lambda,
            "mc_samples": self.mc_samples,
            "seed": self.seed,
            "m_v": self.mv.iter().map(mat).collect::<Vec<_>>(),
            "sigma_v": self.sigma_v.iter().map(mat).collect::<Vec<_>>(),
            "sigma_u": self.sigma_u.iter().map(mat).collect::<Vec<_>>(),
            "u_law_of": self.u_law_of,
            "f": table(&self.f),
            "g": table(&self.g),
            "g_se": self.g_se,
            "sigma_v_se": self.sigma_v_se,
        })
    }
}

/// Runs the gradient-descent state evolution to `input.horizon`.
pub fn gd_se(input: &GdSeInput, opts: &SeOptions) -> Result<GdSeState> {
    input.validate()?;
    let t_max = input.horizon;
    if opts.batches < 2 || opts.mc_samples < 2 * opts.batches || opts.mc_samples <= t_max {
        return Err(Error::validation("mc_samples", format!("need at least {} and more than the horizon", 2 * opts.batches)));
    }
    let (m, n) = input.dims();
    let masks = input.mask_weights();
    let (u_law_of, law_reps, classes) = group_classes(input, &masks);
    let size = t_max + 1;
    let mut mv = vec![Array2::zeros((size, size)); n];
    let mut sigma_v = vec![Array2::zeros((size, size)); n];
    for l in 0..n {
        mv[l][[0, 0]] = 1.0;
        sigma_v[l][[0, 0]] = input.mu0[l] * input.mu0[l];
    }
    let mut state = GdSeState {
        horizon: t_max,
        eta: input.eta,
        lambda: input.lambda,
        mc_samples: opts.mc_samples,
        seed: opts.seed,
        mv,
        sigma_v,
        sigma_u: vec![Array2::zeros((size, size)); law_reps.len()],
        u_law_of,
        f: CoefTable::zeros(t_max, m),
        g: CoefTable::zeros(t_max, n),
        g_se: vec![vec![]; size],
        sigma_v_se: vec![vec![]; size],
        chol_u: vec![Array2::zeros((size, size)); law_reps.len()],
        classes,
        eps: noise_columns(opts.seed, "gd-u", t_max, opts.mc_samples, opts.moment_matching),
        loss: input.loss.clone(),
        xi: input.xi.to_vec(),
        masks,
        profile: input.profile.clone(),
        batches: opts.batches,
    };
    for t in 1..=t_max {
        state.run_step(t)?;
    }
    Ok(state)
}

/// `g_s^{(t)}` recomputed with the `D` recursion on the state's own samples.
pub fn g_coefficient_d_recursion(state: &GdSeState, s: usize, t: usize) -> Result<Vec<f64>> {
    state.g_by(s, t, false)
}

/// `g_s^{(t)}` from the explicit nested sum on the state's own samples. Cost grows like
/// `2^(t-s-1)`; gaps above [`NESTED_SUM_MAX_GAP`] are rejected.
pub fn g_coefficient_nested_sum(state: &GdSeState, s: usize, t: usize) -> Result<Vec<f64>> {
    state.g_by(s, t, true)
}

/// Bias factors and variances of the entrywise prediction at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GdLaw {
    pub t: usize,
    /// `b_l(t) = -(M_l)_{0,t}`.
    pub b: Vec<f64>,
    /// `sigma2_l(t) = <(M_l)_{[1,t],t}, Sigma^V_l (M_l)_{[1,t],t}>`.
    pub sigma2: Vec<f64>,
}

/// Quadratic form of `m` over `sigma[1..=t, 1..=t]`, clipped at zero within `NEG_TOL`.
fn quad_form(mcol: &[f64], sigma: &Array2<f64>, t: usize) -> Result<f64> {
    let mut v = 0.0;
    for r in 1..=t {
        for s in 1..=t {
            v += mcol[r] * sigma[[r, s]] * mcol[s];
        }
    }
    if v < -NEG_TOL * sigma[[t, t]].abs().max(1.0) {
        return Err(Error::Numerical(format!("negative variance {v:e} at step {t}")));
    }
    Ok(v.max(0.0))
}

pub fn gd_key_params(state: &GdSeState, t: usize) -> Result<GdLaw> {
    if t > state.horizon {
        return Err(Error::validation("t", format!("{t} exceeds the horizon {}", state.horizon)));
    }
    let mut b = Vec::with_capacity(state.mv.len());
    let mut sigma2 = Vec::with_capacity(state.mv.len());
    for (mv, sv) in state.mv.iter().zip(&state.sigma_v) {
        let col: Vec<f64> = (0..=t).map(|r| mv[[r, t]]).collect();
        b.push(-col[0]);
        sigma2.push(quad_form(&col, sv, t)?);
    }
    Ok(GdLaw { t, b, sigma2 })
}

/// Predicted law of `mu_l(t) - mu0_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntrywiseLaw {
    pub mean: f64,
    pub variance: f64,
    /// `(M_l)_{s,t}` for `s in [0, t]`: weights of the decomposition
    /// `mu_l(t) - mu0_l = -(M_l)_{0,t} mu0_l + sum_{s>=1} (M_l)_{s,t} v_l(s)`.
    pub coefficients: Vec<f64>,
}

pub fn gd_entrywise_law(state: &GdSeState, l: usize, t: usize, mu0_l: f64) -> Result<EntrywiseLaw> {
    if l >= state.mv.len() || t > state.horizon {
        return Err(Error::validation("(l, t)", format!("({l}, {t}) out of range")));
    }
    let col: Vec<f64> = (0..=t).map(|r| state.mv[l][[r, t]]).collect();
    let variance = quad_form(&col, &state.sigma_v[l], t)?;
    Ok(EntrywiseLaw { mean: -col[0] * mu0_l, variance, coefficients: col })
}

/// Long CSV `(l, t, b, sigma2)` for `t in 0..=T`.
pub fn write_gd_law_csv(state: &GdSeState, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["l", "t", "b", "sigma2"])?;
    for t in 0..=state.horizon {
        let law = gd_key_params(state, t)?;
        for (l, (b, s2)) in law.b.iter().zip(&law.sigma2).enumerate() {
            w.write_record([l.to_string(), t.to_string(), crate::cli_io::fmt_f64(*b), crate::cli_io::fmt_f64(*s2)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Scalar state evolution for `E A^2 = 1/n` and full-sample gradient descent.
#[derive(Clone, Debug)]
pub struct GdSeHomogeneous {
    pub horizon: usize,
    pub eta: f64,
    pub lambda: f64,
    pub phi: f64,
    pub mv: Array2<f64>,
    /// `(0, 0)` entry is `||mu0||^2 / n`.
    pub sigma_v: Array2<f64>,
    pub sigma_u: Array2<f64>,
    pub g: Vec<Vec<f64>>,
    pub g_se: Vec<Vec<f64>>,
    pub sigma_v_se: Vec<Vec<f64>>,
}

impl GdSeHomogeneous {
    /// `(b(t), sigma2(t))`, the same for every coordinate.
    pub fn key_params(&self, t: usize) -> Result<(f64, f64)> {
        if t > self.horizon {
            return Err(Error::validation("t", format!("{t} exceeds the horizon {}", self.horizon)));
        }
        let col: Vec<f64> = (0..=t).map(|r| self.mv[[r, t]]).collect();
        Ok((-col[0], quad_form(&col, &self.sigma_v, t)?))
    }
}

/// The scalar recursion. Expectations average over a uniformly random row `pi` (with
/// noise `xi_pi`) and one Gaussian path per sample, so the estimator is independent of
/// the per-row one in [`gd_se`].
#[allow(clippy::too_many_arguments)]
pub fn gd_se_homogeneous(
    loss: &Loss,
    eta: f64,
    lambda: f64,
    mu0_norm2: f64,
    n: usize,
    xi: &Array1<f64>,
    horizon: usize,
    opts: &SeOptions,
) -> Result<GdSeHomogeneous> {
    if !(eta >= 0.0 && lambda >= 0.0 && mu0_norm2 >= 0.0) || n == 0 || xi.is_empty() {
        return Err(Error::validation("homogeneous inputs", "eta, lambda, ||mu0||^2 must be nonnegative; n, m positive"));
    }
    if opts.batches < 2 || opts.mc_samples < 2 * opts.batches || opts.mc_samples <= horizon {
        return Err(Error::validation("mc_samples", format!("need at least {} and more than the horizon", 2 * opts.batches)));
    }
    let m = xi.len();
    let phi = m as f64 / n as f64;
    let size = horizon + 1;
    let nsamp = opts.mc_samples;
    let nb = opts.batches;
    let eps = noise_columns(opts.seed, "gd-h-u", horizon, nsamp, opts.moment_matching);
    let mut krng = stream_rng(opts.seed, "gd-h-k", 0);
    let rows: Vec<usize> = (0..nsamp).map(|_| krng.gen_range(0..m)).collect();
    let mut mv = Array2::zeros((size, size));
    let mut sv = Array2::zeros((size, size));
    let mut su = Array2::zeros((size, size));
    let mut chol = Array2::zeros((size, size));
    mv[[0, 0]] = 1.0;
    sv[[0, 0]] = mu0_norm2 / n as f64;
    let mut g = vec![vec![]; size];
    let mut g_se = vec![vec![]; size];
    let mut sv_se = vec![vec![]; size];
    for t in 1..=horizon {
        // Sigma^U from M and Sigma^V.
        for s in 1..=t {
            let mut acc = 0.0;
            for r in 0..t {
                for p in 0..s {
                    acc += mv[[r, t - 1]] * sv[[r, p]] * mv[[p, s - 1]];
                }
            }
            su[[t, s]] = acc;
            su[[s, t]] = acc;
        }
        extend_cholesky(&su, &mut chol, t).map_err(Error::Numerical)?;
        // g, Sigma^V and M by batches.
        let f = |q: usize, r: usize| mv[[r, q - 1]];
        let sums = (0..nb)
            .into_par_iter()
            .map(|b| {
                let mut buf = PathBuf::new(t);
                let mut acc = vec![0.0; 2 * t];
                for i in (b * nsamp / nb)..((b + 1) * nsamp / nb) {
                    let x = xi[rows[i]];
                    for tau in 1..=t {
                        let mut p = 0.0;
                        for j in 1..=tau {
                            p += chol[[tau, j]] * eps[j - 1][i];
                        }
                        for s in 1..tau {
                            p += eta * f(tau, s) * buf.l1[s];
                        }
                        if !p.is_finite() {
                            return Err(Error::Numerical(format!("Phi_{tau} is not finite")));
                        }
                        buf.l1[tau] = loss.d1(x - p);
                        buf.w[tau] = loss.d2(x - p);
                    }
                    for s in 1..=t {
                        acc[s - 1] += buf.w[t] * d_recursion(&f, &buf.w, s, t, eta, &mut buf.d);
                        acc[t + s - 1] += buf.l1[t] * buf.l1[s];
                    }
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gt = vec![0.0; t + 1];
        let mut gse = vec![0.0; t + 1];
        let mut svse = vec![0.0; t + 1];
        for s in 1..=t {
            let means = |j: usize| -> (f64, Vec<f64>) {
                let bm: Vec<f64> =
                    (0..nb).map(|b| sums[b][j] / ((b + 1) * nsamp / nb - b * nsamp / nb) as f64).collect();
                (sums.iter().map(|v| v[j]).sum::<f64>() / nsamp as f64, bm)
            };
            let (wd, wd_b) = means(s - 1);
            gt[s] = -phi * eta * wd;
            gse[s] = phi * eta * batch_se(&wd_b);
            let (ll, ll_b) = means(t + s - 1);
            sv[[t, s]] = phi * eta * eta * ll;
            sv[[s, t]] = sv[[t, s]];
            svse[s] = phi * eta * eta * batch_se(&ll_b);
        }
        // M with the ridge terms of the general recursion.
        for r in 0..t {
            let mut v = (1.0 - eta * lambda) * mv[[r, t - 1]];
            for s in r + 1..=t {
                v += gt[s] * mv[[r, s - 1]];
            }
            if r == 0 {
                v += eta * lambda;
            }
            mv[[r, t]] = v;
        }
        mv[[t, t]] = 1.0;
        g[t] = gt;
        g_se[t] = gse;
        sv_se[t] = svse;
    }
    Ok(GdSeHomogeneous { horizon, eta, lambda, phi, mv, sigma_v: sv, sigma_u: su, g, g_se, sigma_v_se: sv_se })
}
