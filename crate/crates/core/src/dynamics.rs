//! Iteration engines for first-order programs and AMP on a fixed matrix.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::programs::{AsymmetricProgram, Row, RowFunction, SymmetricProgram};

/// Iterates with absolute value above this abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub enum Iterates {
    Symmetric(Vec<Array1<f64>>),
    Asymmetric { u: Vec<Array1<f64>>, v: Vec<Array1<f64>> },
}

/// Iterates `0..=T` with wall-clock time per step.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub iterates: Iterates,
    pub step_seconds: Vec<f64>,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        match &self.iterates {
            Iterates::Symmetric(z) => z.len() - 1,
            Iterates::Asymmetric { u, .. } => u.len() - 1,
        }
    }

    /// Symmetric iterate `z(t)`.
    pub fn z(&self, t: usize) -> &Array1<f64> {
        match &self.iterates {
            Iterates::Symmetric(z) => &z[t],
            _ => panic!("asymmetric trajectory has no z track"),
        }
    }

    pub fn u(&self, t: usize) -> &Array1<f64> {
        match &self.iterates {
            Iterates::Asymmetric { u, .. } => &u[t],
            _ => panic!("symmetric trajectory has no u track"),
        }
    }

    pub fn v(&self, t: usize) -> &Array1<f64> {
        match &self.iterates {
            Iterates::Asymmetric { v, .. } => &v[t],
            _ => panic!("symmetric trajectory has no v track"),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Long-format CSV `(t, coordinate, value)`; asymmetric runs add a `track` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        match &self.iterates {
            Iterates::Symmetric(z) => {
                w.write_record(["t", "coordinate", "value"])?;
                for (t, zt) in z.iter().enumerate() {
                    for (k, x) in zt.iter().enumerate() {
                        w.write_record([t.to_string(), k.to_string(), crate::cli_io::fmt_f64(*x)])?;
                    }
                }
            }
            Iterates::Asymmetric { u, v } => {
                w.write_record(["track", "t", "coordinate", "value"])?;
                for (name, track) in [("u", u), ("v", v)] {
                    for (t, xt) in track.iter().enumerate() {
                        for (k, x) in xt.iter().enumerate() {
                            w.write_record([name.to_string(), t.to_string(), k.to_string(), crate::cli_io::fmt_f64(*x)])?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Coefficient vectors `c[t][s]` in `R^dim`, indexed from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefTable {
    dim: usize,
    entries: Vec<Vec<Vec<f64>>>,
}

impl CoefTable {
    /// Zero table for `t in 1..=horizon`, `s in 1..=t`.
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        CoefTable { dim, entries: (0..=horizon).map(|t| vec![vec![0.0; dim]; t + 1]).collect() }
    }

    pub fn horizon(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, t: usize, s: usize) -> &[f64] {
        &self.entries[t][s]
    }

    pub fn set(&mut self, t: usize, s: usize, values: Vec<f64>) {
        assert_eq!(values.len(), self.dim);
        self.entries[t][s] = values;
    }

    pub fn get_mut(&mut self, t: usize, s: usize) -> &mut Vec<f64> {
        &mut self.entries[t][s]
    }

    /// Keeps steps `1..=horizon`.
    pub fn truncated(&self, horizon: usize) -> Self {
        CoefTable { dim: self.dim, entries: self.entries[..=horizon].to_vec() }
    }
}

fn check_finite(x: &Array1<f64>, t: usize) -> Result<()> {
    match x.iter().position(|v| !(v.abs() <= DIVERGENCE_THRESHOLD)) {
        Some(k) => Err(Error::Divergence { t, coord: k, value: x[k] }),
        None => Ok(()),
    }
}

/// Applies `f` row by row to the history columns `hist[idx]`.
pub fn apply_rows(f: &dyn RowFunction, hist: &[&Array1<f64>], dim: usize) -> Array1<f64> {
    if f.is_zero() {
        return Array1::zeros(dim);
    }
    let k = f.arity();
    assert!(hist.len() >= k, "history shorter than arity");
    let mut buf = vec![0.0; k];
    Array1::from_shape_fn(dim, |row| {
        for (b, h) in buf.iter_mut().zip(hist) {
            *b = h[row];
        }
        f.eval(row, &buf)
    })
}

fn refs(v: &[Array1<f64>]) -> Vec<&Array1<f64>> {
    v.iter().collect()
}

/// `z(t) = A F_t(z(0..t-1)) + G_t(z(0..t-1))` for `t = 1..=T`.
pub fn run_symmetric(a: &Array2<f64>, prog: &SymmetricProgram) -> Result<Trajectory> {
    prog.validate()?;
    let n = prog.dim();
    if a.dim() != (n, n) {
        return Err(Error::Config(format!("matrix is {:?}, program dimension is {n}", a.dim())));
    }
    let mut z = vec![prog.z0.clone()];
    let mut times = Vec::new();
    for t in 1..=prog.horizon() {
        let start = Instant::now();
        let h = refs(&z);
        let f = apply_rows(prog.f[t - 1].as_ref(), &h, n);
        let g = apply_rows(prog.g[t - 1].as_ref(), &h, n);
        let zt = a.dot(&f) + g;
        check_finite(&zt, t)?;
        z.push(zt);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(Trajectory { iterates: Iterates::Symmetric(z), step_seconds: times, seed: None })
}

/// Alternating updates: `u(t)` first, then `v(t)` using `u(0..t)`.
pub fn run_asymmetric(a: &Array2<f64>, prog: &AsymmetricProgram) -> Result<Trajectory> {
    prog.validate()?;
    let (m, n) = prog.dims();
    if a.dim() != (m, n) {
        return Err(Error::Config(format!("matrix is {:?}, program dimensions are ({m}, {n})", a.dim())));
    }
    let mut u = vec![prog.u0.clone()];
    let mut v = vec![prog.v0.clone()];
    let mut times = Vec::new();
    for t in 1..=prog.horizon() {
        let start = Instant::now();
        let i = t - 1;
        let f1 = apply_rows(prog.f1[i].as_ref(), &refs(&v), n);
        let g1 = apply_rows(prog.g1[i].as_ref(), &refs(&u), m);
        let ut = a.dot(&f1) + g1;
        check_finite(&ut, t)?;
        u.push(ut);
        let g2 = apply_rows(prog.g2[i].as_ref(), &refs(&u), m);
        let f2 = apply_rows(prog.f2[i].as_ref(), &refs(&v), n);
        let vt = a.t().dot(&g2) + f2;
        check_finite(&vt, t)?;
        v.push(vt);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(Trajectory { iterates: Iterates::Asymmetric { u, v }, step_seconds: times, seed: None })
}

/// `A` with rows and columns in `p` set to zero.
pub fn leave_out_matrix(a: &Array2<f64>, p: &[usize]) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut b = a.clone();
    for &k in p {
        if k >= n || k >= a.ncols() {
            return Err(Error::validation("leave_out", format!("index {k} out of range")));
        }
        b.row_mut(k).fill(0.0);
        b.column_mut(k).fill(0.0);
    }
    Ok(b)
}

/// [`run_symmetric`] with `A_{[-P]}`: rows and columns in `p` zeroed, same `z0`.
pub fn run_leave_k_out(a: &Array2<f64>, prog: &SymmetricProgram, p: &[usize]) -> Result<Trajectory> {
    run_symmetric(&leave_out_matrix(a, p)?, prog)
}

fn check_table(table: &CoefTable, horizon: usize, dim: usize, what: &str) -> Result<()> {
    if table.horizon() < horizon || table.dim() != dim {
        return Err(Error::Config(format!(
            "{what} table covers {} steps of dimension {}, need {horizon} steps of dimension {dim}",
            table.horizon(),
            table.dim()
        )));
    }
    Ok(())
}

/// `z(t) = A F_t(z(0..t-1)) - sum_{s<t} b[t][s] * F_s(z(0..s-1))`.
pub fn run_amp_symmetric(
    a: &Array2<f64>,
    amp_fns: &[Row],
    onsager: &CoefTable,
    z0: &Array1<f64>,
) -> Result<Trajectory> {
    let n = z0.len();
    if a.dim() != (n, n) {
        return Err(Error::Config(format!("matrix is {:?}, z0 has length {n}", a.dim())));
    }
    let horizon = amp_fns.len();
    check_table(onsager, horizon, n, "onsager")?;
    let mut z = vec![z0.clone()];
    let mut fvals: Vec<Array1<f64>> = Vec::new();
    let mut times = Vec::new();
    for t in 1..=horizon {
        let start = Instant::now();
        if amp_fns[t - 1].arity() != t {
            return Err(Error::validation("amp_fns", format!("function {t} must have arity {t}")));
        }
        let ft = apply_rows(amp_fns[t - 1].as_ref(), &refs(&z), n);
        let mut zt = a.dot(&ft);
        for (s, fs) in fvals.iter().enumerate() {
            let b = onsager.get(t, s + 1);
            for k in 0..n {
                zt[k] -= b[k] * fs[k];
            }
        }
        check_finite(&zt, t)?;
        fvals.push(ft);
        z.push(zt);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(Trajectory { iterates: Iterates::Symmetric(z), step_seconds: times, seed: None })
}

/// Asymmetric AMP:
/// `u(t) = A F_t(v(0..t-1)) - sum_{s<t} bf[t][s] * G_s(u(0..s))` and
/// `v(t) = A^T G_t(u(0..t)) - sum_{s<=t} bg[t][s] * F_s(v(0..s-1))`.
pub fn run_amp_asymmetric(
    a: &Array2<f64>,
    f_fns: &[Row],
    g_fns: &[Row],
    b_f: &CoefTable,
    b_g: &CoefTable,
    u0: &Array1<f64>,
    v0: &Array1<f64>,
) -> Result<Trajectory> {
    let (m, n) = (u0.len(), v0.len());
    if a.dim() != (m, n) {
        return Err(Error::Config(format!("matrix is {:?}, expected ({m}, {n})", a.dim())));
    }
    let horizon = f_fns.len();
    if g_fns.len() != horizon {
        return Err(Error::Config("F and G sequences differ in length".into()));
    }
    check_table(b_f, horizon, m, "F onsager")?;
    check_table(b_g, horizon, n, "G onsager")?;
    let mut u = vec![u0.clone()];
    let mut v = vec![v0.clone()];
    let mut fv: Vec<Array1<f64>> = Vec::new();
    let mut gv: Vec<Array1<f64>> = Vec::new();
    let mut times = Vec::new();
    for t in 1..=horizon {
        let start = Instant::now();
        let ft = apply_rows(f_fns[t - 1].as_ref(), &refs(&v), n);
        let mut ut = a.dot(&ft);
        for (s, gs) in gv.iter().enumerate() {
            let b = b_f.get(t, s + 1);
            for k in 0..m {
                ut[k] -= b[k] * gs[k];
            }
        }
        check_finite(&ut, t)?;
        fv.push(ft);
        u.push(ut);
        let gt = apply_rows(g_fns[t - 1].as_ref(), &refs(&u), m);
        let mut vt = a.t().dot(&gt);
        for (s, fs) in fv.iter().enumerate() {
            let b = b_g.get(t, s + 1);
            for l in 0..n {
                vt[l] -= b[l] * fs[l];
            }
        }
        check_finite(&vt, t)?;
        gv.push(gt);
        v.push(vt);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(Trajectory { iterates: Iterates::Asymmetric { u, v }, step_seconds: times, seed: None })
}

/// `[[0, A], [A^T, 0]]`.
pub fn embed_matrix(a: &Array2<f64>) -> Array2<f64> {
    let (m, n) = a.dim();
    let mut b = Array2::zeros((m + n, m + n));
    b.slice_mut(s![..m, m..]).assign(a);
    b.slice_mut(s![m.., ..m]).assign(&a.t());
    b
}

/// Splits the embedded trajectory back into `(u(0..T), v(0..T))`.
pub fn unembed(traj: &Trajectory, m: usize) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
    let horizon = traj.horizon() / 2;
    let z = |t: usize| traj.z(t);
    let mut u = vec![z(0).slice(s![..m]).to_owned()];
    let mut v = vec![z(0).slice(s![m..]).to_owned()];
    for t in 1..=horizon {
        u.push(z(2 * t - 1).slice(s![..m]).to_owned());
        v.push(z(2 * t).slice(s![m..]).to_owned());
    }
    (u, v)
}

/// Largest singular value squared of `A`, by power iteration on `A^T A`.
pub fn operator_norm_sq(a: &Array2<f64>, steps: usize) -> f64 {
    let n = a.ncols();
    let mut x = Array1::from_shape_fn(n, |i| 1.0 + (i % 7) as f64 * 0.1);
    let mut est = 0.0;
    for _ in 0..steps {
        let y = a.t().dot(&a.dot(&x));
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm / x.dot(&x).sqrt();
        x = y / norm;
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erm::loss::Loss;
    use crate::erm::prox::ProxSpec;
    use crate::programs::*;
    use ndarray::array;
    use std::sync::Arc;

    #[test]
    fn zero_matrix_gives_drift_only() {
        let prog = build_power_iteration(3, array![1.0, 2.0]);
        let tr = run_symmetric(&Array2::zeros((2, 2)), &prog).unwrap();
        for t in 1..=3 {
            assert!(tr.z(t).iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn permutation_matrix_power_iteration() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let tr = run_symmetric(&a, &build_power_iteration(2, array![1.0, 0.0])).unwrap();
        assert_eq!(tr.z(1), &array![0.0, 1.0]);
        assert_eq!(tr.z(2), &array![1.0, 0.0]);
    }

    #[test]
    fn scaled_swap_three_steps() {
        let r = 1.0 / 2f64.sqrt();
        let a = array![[0.0, r], [r, 0.0]];
        let tr = run_symmetric(&a, &build_power_iteration(3, array![1.0, 0.0])).unwrap();
        assert!(tr.z(3)[0].abs() < 1e-16);
        assert!((tr.z(3)[1] - 2f64.powf(-1.5)).abs() < 1e-15);
    }

    #[test]
    fn identity_matrix_single_step() {
        let a = Array2::eye(3);
        let tr = run_symmetric(&a, &build_power_iteration(1, array![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(tr.z(1), &array![1.0, 0.0, 0.0]);
    }

    #[test]
    fn tanh_program_matches_direct_loop() {
        let a = array![[0.3, -0.2, 0.5, 0.1], [-0.2, 0.7, 0.0, -0.4], [0.5, 0.0, -0.1, 0.2], [0.1, -0.4, 0.2, 0.6]];
        let z0 = array![0.5, -1.0, 2.0, 0.1];
        let tr = run_symmetric(&a, &build_tanh_gfom(4, z0.clone())).unwrap();
        let mut z = z0.to_vec();
        for t in 1..=4 {
            let f: Vec<f64> = z.iter().map(|x| x.tanh()).collect();
            z = (0..4).map(|i| (0..4).map(|j| a[[i, j]] * f[j]).sum()).collect();
            for k in 0..4 {
                assert!((tr.z(t)[k] - z[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn divergence_names_step() {
        let a = array![[1e7]];
        let err = run_symmetric(&a, &build_power_iteration(3, array![1.0])).unwrap_err();
        assert!(matches!(err, Error::Divergence { t: 2, .. }), "{err}");
    }

    #[test]
    fn asymmetric_scalar_step_by_hand() {
        // u1 = a * (2 v0 + 1) + 3 u0, v1 = a * (u1 - u0) + 0.5 v0.
        let a = array![[1.5]];
        let prog = AsymmetricProgram {
            name: "hand".into(),
            f1: vec![Affine::new(vec![2.0]).with_shift(None, 1.0).boxed()],
            g1: vec![Affine::new(vec![3.0]).boxed()],
            g2: vec![Affine::new(vec![-1.0, 1.0]).boxed()],
            f2: vec![Affine::new(vec![0.5]).boxed()],
            u0: array![1.0],
            v0: array![2.0],
        };
        let tr = run_asymmetric(&a, &prog).unwrap();
        let u1 = 1.5 * 5.0 + 3.0;
        assert_eq!(tr.u(1)[0], u1);
        assert_eq!(tr.v(1)[0], 1.5 * (u1 - 1.0) + 1.0);
    }

    #[test]
    fn asymmetric_zero_matrix_decouples() {
        let prog = random_asymmetric(3, 4, 3, 1);
        let tr = run_asymmetric(&Array2::zeros((3, 4)), &prog).unwrap();
        let mut u = vec![prog.u0.clone()];
        for t in 1..=3 {
            let next = apply_rows(prog.g1[t - 1].as_ref(), &u.iter().collect::<Vec<_>>(), 3);
            u.push(next);
            assert_eq!(tr.u(t), &u[t]);
        }
    }

    #[test]
    fn pgd_ridge_one_step_closed_form() {
        let a = array![[0.4, -0.3, 0.2], [0.1, 0.5, -0.6]];
        let mu0 = array![1.0, -2.0, 0.5];
        let xi = array![0.3, -0.1];
        let (eta, lambda) = (0.7, 0.4);
        let prog = build_pgd_linear(&Loss::Squared, &ProxSpec::Ridge { lambda }, eta, &mu0, &xi, 1).unwrap();
        let tr = run_asymmetric(&a, &prog).unwrap();
        let mu1 = pgd_iterate(&ProxSpec::Ridge { lambda }, eta, tr.v(1));
        let y = a.dot(&mu0) + &xi;
        let want = a.t().dot(&y) * eta / (1.0 + eta * lambda);
        for j in 0..3 {
            assert!((mu1[j] - want[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn leave_out_edge_cases() {
        let spec = crate::ensembles::EnsembleSpec::symmetric(crate::ensembles::EntryLaw::Gaussian);
        let a = crate::ensembles::sample_symmetric(&spec, 6, 3).unwrap();
        let prog = build_tanh_gfom(3, Array1::ones(6));
        let full = run_symmetric(&a, &prog).unwrap();
        let none = run_leave_k_out(&a, &prog, &[]).unwrap();
        assert_eq!(full.iterates, none.iterates);
        let all: Vec<usize> = (0..6).collect();
        let zero = run_leave_k_out(&a, &prog, &all).unwrap();
        assert!(zero.z(2).iter().all(|x| *x == 0.0));
        assert!(run_leave_k_out(&a, &prog, &[6]).is_err());
    }

    #[test]
    fn amp_hand_example_and_reduction() {
        let a = array![[0.2, 0.5, -0.1], [0.5, -0.3, 0.4], [-0.1, 0.4, 0.6]];
        let z0 = array![1.0, -0.5, 2.0];
        let fns: Vec<Row> = (1..=2).map(|t| Pointwise::new(t, t - 1, Arc::new(Identity)).boxed()).collect();
        let mut b = CoefTable::zeros(2, 3);
        b.set(2, 1, vec![0.3, -0.2, 0.1]);
        let tr = run_amp_symmetric(&a, &fns, &b, &z0).unwrap();
        let want = a.dot(&a.dot(&z0)) - &(array![0.3, -0.2, 0.1] * &z0);
        for k in 0..3 {
            assert!((tr.z(2)[k] - want[k]).abs() < 1e-15);
        }
        let zero_b = CoefTable::zeros(2, 3);
        let amp = run_amp_symmetric(&a, &fns, &zero_b, &z0).unwrap();
        let gfom = run_symmetric(&a, &build_power_iteration(2, z0.clone())).unwrap();
        assert_eq!(amp.iterates, gfom.iterates);
        assert!(run_amp_symmetric(&a, &fns, &CoefTable::zeros(1, 3), &z0).is_err());
    }

    #[test]
    fn asymmetric_amp_two_steps_by_hand() {
        let a = array![[1.0, 2.0], [-1.0, 0.5]];
        let (u0, v0) = (array![0.0, 0.0], array![1.0, -1.0]);
        let f: Vec<Row> = (1..=2).map(|t| Pointwise::new(t, t - 1, Arc::new(Identity)).boxed()).collect();
        let g: Vec<Row> = (1..=2).map(|t| Affine::new({
            let mut c = vec![0.0; t + 1];
            c[t] = 2.0;
            c
        }).boxed()).collect();
        let tr = run_amp_asymmetric(&a, &f, &g, &CoefTable::zeros(2, 2), &CoefTable::zeros(2, 2), &u0, &v0).unwrap();
        let u1 = a.dot(&v0);
        let v1 = a.t().dot(&(&u1 * 2.0));
        let u2 = a.dot(&v1);
        let v2 = a.t().dot(&(&u2 * 2.0));
        assert_eq!(tr.u(1), &u1);
        assert_eq!(tr.v(2), &v2);
        let z = run_amp_asymmetric(&Array2::zeros((2, 2)), &f, &g, &CoefTable::zeros(2, 2), &CoefTable::zeros(2, 2), &u0, &v0)
            .unwrap();
        assert!(z.u(1).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn embedding_single_step() {
        let a = array![[1.0, 2.0, 0.0], [0.5, -1.0, 3.0]];
        let prog = random_asymmetric(2, 3, 2, 9);
        let e = symmetrize(&prog, 2, 3).unwrap();
        let direct = run_asymmetric(&a, &prog).unwrap();
        let emb = run_symmetric(&embed_matrix(&a), &e).unwrap();
        let (u, v) = unembed(&emb, 2);
        for t in 0..=2 {
            for k in 0..2 {
                assert!((u[t][k] - direct.u(t)[k]).abs() < 1e-12);
            }
            for l in 0..3 {
                assert!((v[t][l] - direct.v(t)[l]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn operator_norm_of_diagonal() {
        let a = array![[3.0, 0.0], [0.0, -1.0], [0.0, 0.0]];
        assert!((operator_norm_sq(&a, 50) - 9.0).abs() < 1e-9);
    }
}
