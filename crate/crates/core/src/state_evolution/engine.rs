//! Monte Carlo engine shared by every state evolution.
//!
//! A [`Side`] owns one Gaussian path family (`Z`, `U` or `V`), its transform and its
//! law. Coordinates whose profile rows agree share a law class; coordinates that in
//! addition share the initial value and every row key of the transform share an
//! expectation class and are estimated once. All classes reuse the same standard
//! normal columns, which are centered and whitened so sample second moments of the
//! Gaussian inputs are exact.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::map::{TransformMap, Workspace};
use super::{DerivativeMode, SeOptions};
use crate::ensembles::VarianceProfile;
use crate::error::{Error, Result};
use crate::seed::stream_rng;

/// Negative pivots above `-NEG_TOL * max(1, C_tt)` are clipped to zero.
pub const NEG_TOL: f64 = 1e-10;
const ZERO_PIVOT: f64 = 1e-13;

#[derive(Clone, Debug)]
pub struct ExpClass {
    pub rep: usize,
    pub law: usize,
    pub members: Vec<usize>,
}

pub struct Side {
    pub name: &'static str,
    pub init: Vec<f64>,
    pub map: TransformMap,
    /// `dim x other_dim`; the law of coordinate `k` is `sum_l profile[k, l] * moment_l`.
    pub profile: VarianceProfile,
    pub law_of: Vec<usize>,
    pub law_reps: Vec<usize>,
    /// Per law class, `(T+1) x (T+1)` with row and column 0 for the deterministic start.
    pub covs: Vec<Array2<f64>>,
    pub chols: Vec<Array2<f64>>,
    pub classes: Vec<ExpClass>,
    pub eps: Vec<Vec<f64>>,
    pub cov_se: Vec<Vec<f64>>,
    pub coef_se: Vec<Vec<f64>>,
}

/// Moments of `out_t` on a source side: `t` products `out_t * out_tau`, then `level`
/// derivatives `d out_t / d input(s)`, per source coordinate, plus batch means of the
/// weighted average over coordinates.
pub struct Moments {
    pub t: usize,
    pub level: usize,
    pub values: Vec<Vec<f64>>,
    pub batch: Vec<Vec<f64>>,
}

fn normal_column(seed: u64, label: &str, level: usize, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, label, level as u64);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Columns `1..=horizon` of standard normals; with `matched`, centered and
/// Gram-Schmidt whitened so `(1/N) sum_i e_j[i] e_l[i] = delta_jl`.
pub fn noise_columns(seed: u64, label: &str, horizon: usize, n: usize, matched: bool) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    for level in 1..=horizon {
        let mut c = normal_column(seed, label, level, n);
        if matched {
            let mean = c.iter().sum::<f64>() / n as f64;
            c.iter_mut().for_each(|x| *x -= mean);
            for prev in &cols {
                let proj = c.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                c.iter_mut().zip(prev).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = (c.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
            c.iter_mut().for_each(|x| *x /= norm);
        }
        cols.push(c);
    }
    cols
}

fn group<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = K>) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut index: HashMap<K, usize> = HashMap::new();
    let mut of = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (k, key) in keys.enumerate() {
        let next = members.len();
        let c = *index.entry(key).or_insert(next);
        if c == next {
            members.push(Vec::new());
        }
        members[c].push(k);
        of.push(c);
    }
    (of, members)
}

impl Side {
    pub fn new(
        name: &'static str,
        init: Vec<f64>,
        map: TransformMap,
        profile: VarianceProfile,
        opts: &SeOptions,
        label: &str,
    ) -> Self {
        let dim = init.len();
        let horizon = map.horizon();
        let (law_of, law_members) = group((0..dim).map(|k| profile.row_key(k)));
        let law_reps = law_members.iter().map(|m| m[0]).collect::<Vec<_>>();
        let keys = (0..dim).map(|k| {
            let mut key = vec![law_of[k] as u64, init[k].to_bits()];
            key.extend(map.outs.iter().map(|f| f.row_key(k)));
            key.extend(map.drift.iter().map(|f| f.row_key(k)));
            key
        });
        let (_, members) = group(keys);
        let classes = members.into_iter().map(|m| ExpClass { rep: m[0], law: law_of[m[0]], members: m }).collect();
        let size = horizon + 1;
        let nlaw = law_reps.len();
        Side {
            name,
            init,
            map,
            profile,
            law_of,
            law_reps,
            covs: vec![Array2::zeros((size, size)); nlaw],
            chols: vec![Array2::zeros((size, size)); nlaw],
            classes,
            eps: noise_columns(opts.seed, label, horizon, opts.mc_samples, opts.moment_matching),
            cov_se: vec![vec![]; size],
            coef_se: vec![vec![]; size],
        }
    }

    pub fn dim(&self) -> usize {
        self.init.len()
    }

    /// Weights turning source moments into the average over this side's coordinates.
    pub fn source_weights(&self) -> Vec<f64> {
        self.profile.mean_row()
    }

    /// Gaussian input path `input(0..=level)` of sample `i` for law class `law`.
    fn fill_input(&self, law: usize, rep: usize, i: usize, level: usize, input: &mut [f64]) {
        input[0] = self.init[rep];
        let l = &self.chols[law];
        for w in 1..=level {
            let mut v = 0.0;
            for j in 1..=w {
                let c = l[[w, j]];
                if c != 0.0 {
                    v += c * self.eps[j - 1][i];
                }
            }
            input[w] = v;
        }
    }

    /// Moments of `out_t` over this side's Gaussian paths.
    pub fn moments(&self, t: usize, weights: &[f64], opts: &SeOptions) -> Result<Moments> {
        let level = self.map.out_level(t);
        let q = t + level;
        let n = opts.mc_samples;
        let nb = opts.batches;
        let bounds: Vec<usize> = (0..=nb).map(|b| b * n / nb).collect();
        let tasks: Vec<(usize, usize)> =
            (0..self.classes.len()).flat_map(|c| (0..nb).map(move |b| (c, b))).collect();
        let sums: Vec<Result<Vec<f64>>> = tasks
            .par_iter()
            .map(|&(c, b)| {
                let class = &self.classes[c];
                let mut ws = Workspace::new(level);
                let mut input = vec![0.0; level + 1];
                let mut acc = vec![0.0; q];
                let analytic = opts.derivative == DerivativeMode::Analytic;
                for i in bounds[b]..bounds[b + 1] {
                    self.fill_input(class.law, class.rep, i, level, &mut input);
                    self.map.forward(class.rep, &input, level, &mut ws, analytic);
                    self.map.ensure_outs(class.rep, &mut ws, t, analytic);
                    let ot = ws.out[t];
                    if !ot.is_finite() {
                        return Err(Error::Numerical(format!(
                            "{} side: output {t} is not finite at coordinate {}",
                            self.name, class.rep
                        )));
                    }
                    for tau in 1..=t {
                        acc[tau - 1] += ot * ws.out[tau];
                    }
                    if analytic {
                        for s in 1..=level {
                            acc[t + s - 1] += ws.out_partial(t, s);
                        }
                    } else {
                        for s in 1..=level {
                            acc[t + s - 1] += self.fd_partial(class.rep, &mut input, level, t, s, &mut ws);
                        }
                    }
                }
                Ok(acc)
            })
            .collect();
        let sums = sums.into_iter().collect::<Result<Vec<_>>>()?;
        let nc = self.classes.len();
        let mut class_means = vec![vec![0.0; q]; nc];
        let mut class_weight = vec![0.0; nc];
        for (c, class) in self.classes.iter().enumerate() {
            for b in 0..nb {
                for (m, s) in class_means[c].iter_mut().zip(&sums[c * nb + b]) {
                    *m += s;
                }
            }
            class_means[c].iter_mut().for_each(|m| *m /= n as f64);
            class_weight[c] = class.members.iter().map(|&k| weights[k]).sum();
        }
        let mut batch = vec![vec![0.0; nb]; q];
        for c in 0..nc {
            for b in 0..nb {
                let size = (bounds[b + 1] - bounds[b]) as f64;
                for (j, s) in sums[c * nb + b].iter().enumerate() {
                    batch[j][b] += class_weight[c] * s / size;
                }
            }
        }
        let dim = self.dim();
        let mut values = vec![vec![0.0; dim]; q];
        for (c, class) in self.classes.iter().enumerate() {
            for &k in &class.members {
                for j in 0..q {
                    values[j][k] = class_means[c][j];
                }
            }
        }
        Ok(Moments { t, level, values, batch })
    }

    fn fd_partial(&self, row: usize, input: &mut [f64], level: usize, t: usize, s: usize, ws: &mut Workspace) -> f64 {
        let x = input[s];
        let h = 1e-5 * x.abs().max(1.0);
        let mut eval = |v: f64, ws: &mut Workspace| {
            input[s] = v;
            self.map.forward(row, input, level, ws, false);
            self.map.ensure_outs(row, ws, t, false);
            ws.out[t]
        };
        let d = (eval(x + h, ws) - eval(x - h, ws)) / (2.0 * h);
        input[s] = x;
        d
    }

    /// Installs level `t` from the opposite side's moments: covariances
    /// `Cov(X(t), X(tau))`, coefficients `c[t][s]`, and the Cholesky row `t`.
    pub fn receive(&mut self, mom: &Moments) -> Result<()> {
        let t = mom.t;
        let se = |b: &[f64]| -> f64 {
            let nb = b.len() as f64;
            let mean = b.iter().sum::<f64>() / nb;
            let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nb - 1.0);
            (var / nb).sqrt()
        };
        let mut cov_se = vec![0.0; t + 1];
        for tau in 1..=t {
            let scattered = self.profile.apply(&mom.values[tau - 1]);
            for (law, &rep) in self.law_reps.iter().enumerate() {
                self.covs[law][[t, tau]] = scattered[rep];
                self.covs[law][[tau, t]] = scattered[rep];
            }
            cov_se[tau] = se(&mom.batch[tau - 1]);
        }
        let mut coef_se = vec![0.0; mom.level + 1];
        for s in 1..=mom.level {
            self.map.coefs.set(t, s, self.profile.apply(&mom.values[t + s - 1]));
            coef_se[s] = se(&mom.batch[t + s - 1]);
        }
        self.cov_se[t] = cov_se;
        self.coef_se[t] = coef_se;
        for law in 0..self.law_reps.len() {
            extend_cholesky(&self.covs[law], &mut self.chols[law], t)
                .map_err(|msg| Error::Numerical(format!("{} law at coordinate {}: {msg}", self.name, self.law_reps[law])))?;
        }
        Ok(())
    }
}

/// Fills row `t` of the lower Cholesky factor of `cov[1..=t, 1..=t]`.
/// Pivots below `-NEG_TOL * max(1, C_tt)` are an error; smaller negative or tiny
/// pivots make the new column a deterministic function of the earlier ones.
pub fn extend_cholesky(cov: &Array2<f64>, l: &mut Array2<f64>, t: usize) -> std::result::Result<(), String> {
    let ctt = cov[[t, t]];
    let mut rem = ctt;
    for j in 1..t {
        let mut v = cov[[t, j]];
        for i in 1..j {
            v -= l[[t, i]] * l[[j, i]];
        }
        let ljj = l[[j, j]];
        let ltj = if ljj > 0.0 { v / ljj } else { 0.0 };
        l[[t, j]] = ltj;
        rem -= ltj * ltj;
    }
    if rem < -NEG_TOL * ctt.abs().max(1.0) {
        return Err(format!("covariance not positive semidefinite at iteration {t} (pivot {rem:e})"));
    }
    l[[t, t]] = if rem <= ZERO_PIVOT * ctt.abs() { 0.0 } else { rem.sqrt() };
    Ok(())
}
