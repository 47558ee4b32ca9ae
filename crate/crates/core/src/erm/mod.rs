//! Proximal gradient solvers for regularized empirical risk minimization.
//!
//! Linear model: minimize `sum_i L(Y_i - <A_i, mu>) + sum_j f(mu_j)` by
//! `mu(t) = prox_{eta f}(mu(t-1) + eta A^T L'(Y - A mu(t-1)))` from `mu(0) = 0`.
//! Logistic model: labels `Y_i = 2 * 1{<A_i, mu0> + xi_i >= 0} - 1` with logistic noise,
//! fitted through the latent form of the loss (see [`logistic`]).

pub mod logistic;
pub mod loss;
pub mod prox;

use ndarray::{Array1, Array2};

use crate::dynamics::{operator_norm_sq, DIVERGENCE_THRESHOLD};
use crate::error::{Error, Result};
use loss::Loss;
use prox::ProxSpec;

#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Explicit(Array1<f64>),
    /// `Y = A mu0 + xi`.
    Linear { mu0: Array1<f64>, xi: Array1<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ErmLoss {
    Linear(Loss),
    /// Smoothed logistic loss; `clamp` bounds `<A_i, mu>` inside the score (default `20 log n`).
    Logistic { sigma: f64, mu0: Array1<f64>, xi: Array1<f64>, clamp: Option<f64> },
}

#[derive(Clone, Debug)]
pub struct ErmProblem {
    pub a: Array2<f64>,
    pub response: Response,
    pub loss: ErmLoss,
    pub prox: ProxSpec,
    pub eta: f64,
}

/// Step size `0.5 / ||A||_op^2` from 50 power-iteration steps.
pub fn default_eta(a: &Array2<f64>) -> f64 {
    0.5 / operator_norm_sq(a, 50).max(f64::MIN_POSITIVE)
}

impl ErmProblem {
    pub fn linear(a: Array2<f64>, response: Response, loss: Loss, prox: ProxSpec, eta: f64) -> Self {
        ErmProblem { a, response, loss: ErmLoss::Linear(loss), prox, eta }
    }

    pub fn logistic(a: Array2<f64>, mu0: Array1<f64>, xi: Array1<f64>, sigma: f64, prox: ProxSpec, eta: f64) -> Self {
        let y = labels(&a, &mu0, &xi);
        ErmProblem { a, response: Response::Explicit(y), loss: ErmLoss::Logistic { sigma, mu0, xi, clamp: None }, prox, eta }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.a.dim();
        if !(self.eta > 0.0) {
            return Err(Error::validation("eta", "must be positive"));
        }
        self.prox.validate()?;
        match &self.response {
            Response::Explicit(y) if y.len() != m => return Err(Error::validation("Y", format!("length must be {m}"))),
            Response::Linear { mu0, xi } if mu0.len() != n || xi.len() != m => {
                return Err(Error::validation("response", format!("mu0 must have length {n} and xi length {m}")))
            }
            _ => {}
        }
        if let ErmLoss::Logistic { sigma, mu0, xi, .. } = &self.loss {
            if !(*sigma >= 0.0) {
                return Err(Error::validation("sigma", "must be nonnegative"));
            }
            if mu0.len() != n || xi.len() != m {
                return Err(Error::validation("logistic", format!("mu0 must have length {n} and xi length {m}")));
            }
        }
        Ok(())
    }

    fn response_vector(&self) -> Array1<f64> {
        match &self.response {
            Response::Explicit(y) => y.clone(),
            Response::Linear { mu0, xi } => self.a.dot(mu0) + xi,
        }
    }

    /// Gradient of the data term at `mu`.
    pub fn data_gradient(&self, mu: &Array1<f64>) -> Array1<f64> {
        match &self.loss {
            ErmLoss::Linear(l) => {
                let r = self.response_vector() - self.a.dot(mu);
                -self.a.t().dot(&r.mapv(|x| l.d1(x)))
            }
            ErmLoss::Logistic { sigma, mu0, xi, clamp } => {
                let c = clamp.unwrap_or_else(|| logistic::default_clamp(self.a.ncols()));
                let x = self.a.dot(mu);
                let y = self.a.dot(mu0);
                let score = Array1::from_shape_fn(x.len(), |i| logistic::d1(*sigma, x[i].clamp(-c, c), y[i], xi[i]));
                self.a.t().dot(&score)
            }
        }
    }

    /// `sum_i L(...) + sum_j f(mu_j)`.
    pub fn objective(&self, mu: &Array1<f64>) -> f64 {
        let data: f64 = match &self.loss {
            ErmLoss::Linear(l) => (self.response_vector() - self.a.dot(mu)).iter().map(|r| l.value(*r)).sum(),
            ErmLoss::Logistic { sigma, mu0, xi, .. } => {
                let x = self.a.dot(mu);
                let y = self.a.dot(mu0);
                (0..x.len()).map(|i| logistic::loss(*sigma, x[i], y[i], xi[i])).sum()
            }
        };
        data + mu.iter().map(|x| self.prox.penalty(*x)).sum::<f64>()
    }

    /// One proximal gradient step.
    pub fn step(&self, mu: &Array1<f64>) -> Result<Array1<f64>> {
        let pre = mu - &(self.data_gradient(mu) * self.eta);
        pre.iter().map(|x| self.prox.eval(self.eta, *x)).collect::<Result<Vec<_>>>().map(Array1::from)
    }
}

/// Labels `2 * 1{<A_i, mu0> + xi_i >= 0} - 1`.
pub fn labels(a: &Array2<f64>, mu0: &Array1<f64>, xi: &Array1<f64>) -> Array1<f64> {
    (a.dot(mu0) + xi).mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 })
}

fn check_iterate(mu: &Array1<f64>, t: usize) -> Result<()> {
    match mu.iter().position(|v| !(v.abs() <= DIVERGENCE_THRESHOLD)) {
        Some(k) => Err(Error::Divergence { t, coord: k, value: mu[k] }),
        None => Ok(()),
    }
}

fn run(problem: &ErmProblem, horizon: usize) -> Result<Vec<Array1<f64>>> {
    pgd_from(problem, &Array1::zeros(problem.a.ncols()), horizon)
}

/// Proximal gradient iterates `mu(0..=T)` started from `start` instead of 0.
pub fn pgd_from(problem: &ErmProblem, start: &Array1<f64>, horizon: usize) -> Result<Vec<Array1<f64>>> {
    problem.validate()?;
    if start.len() != problem.a.ncols() {
        return Err(Error::validation("start", format!("length must be {}", problem.a.ncols())));
    }
    let mut hist = vec![start.clone()];
    for t in 1..=horizon {
        let next = problem.step(&hist[t - 1])?;
        check_iterate(&next, t)?;
        hist.push(next);
    }
    Ok(hist)
}

/// Iterates `mu(0..=T)` of proximal gradient descent on the linear model.
pub fn pgd_linear(problem: &ErmProblem, horizon: usize) -> Result<Vec<Array1<f64>>> {
    if !matches!(problem.loss, ErmLoss::Linear(_)) {
        return Err(Error::Config("pgd_linear needs a linear-model loss".into()));
    }
    run(problem, horizon)
}

/// Iterates `mu(0..=T)` of proximal gradient descent on the smoothed logistic loss.
pub fn pgd_logistic(problem: &ErmProblem, horizon: usize) -> Result<Vec<Array1<f64>>> {
    if !matches!(problem.loss, ErmLoss::Logistic { .. }) {
        return Err(Error::Config("pgd_logistic needs a logistic loss".into()));
    }
    run(problem, horizon)
}

#[derive(Clone, Debug)]
pub struct FixedPoint {
    pub mu: Array1<f64>,
    pub iterations: usize,
    /// `||mu - prox(mu - eta grad)||_inf`.
    pub residual: f64,
}

/// Runs proximal gradient descent until the sup-norm step falls below `tol`.
pub fn solve_fixed_point(problem: &ErmProblem, tol: f64, max_t: usize) -> Result<FixedPoint> {
    problem.validate()?;
    let mut mu = Array1::zeros(problem.a.ncols());
    let mut last = f64::INFINITY;
    for t in 1..=max_t {
        let next = problem.step(&mu)?;
        check_iterate(&next, t)?;
        last = (&next - &mu).iter().fold(0.0, |acc, d| acc.max(d.abs()));
        mu = next;
        if last <= tol {
            let residual = (&mu - &problem.step(&mu)?).iter().fold(0.0, |acc: f64, d| acc.max(d.abs()));
            return Ok(FixedPoint { mu, iterations: t, residual });
        }
    }
    Err(Error::NotConverged { iterations: max_t, residual: last })
}

/// Gradients of the logistic objective in label form and in latent-noise form:
/// `sum_i rho(-Y_i <A_i, mu>) + sum_j f(mu_j)` and
/// `sum_i L(<A_i, mu>, <A_i, mu0>; xi_i) + sum_j f(mu_j)`.
pub fn logistic_objective_check(
    a: &Array2<f64>,
    mu0: &Array1<f64>,
    xi: &Array1<f64>,
    f: &ProxSpec,
    mu: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let y = labels(a, mu0, xi);
    let x = a.dot(mu);
    let penalty = mu.mapv(|w| f.penalty_derivative(w));
    let direct_score = Array1::from_shape_fn(x.len(), |i| -y[i] * logistic::rho1(-y[i] * x[i]));
    let direct = a.t().dot(&direct_score) + &penalty;
    let ya = a.dot(mu0);
    let mut equiv = penalty;
    for i in 0..x.len() {
        let s = logistic::d1(0.0, x[i], ya[i], xi[i]);
        equiv.scaled_add(s, &a.row(i));
    }
    (direct, equiv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Drop {
    Predictor(usize),
    Sample(usize),
}

/// Proximal gradient descent with column `l` zeroed (predictor) or row `k` removed (sample).
/// The response of a linear model `Y = A mu0 + xi` is rebuilt from the reduced matrix.
pub fn leave_one_out_run(problem: &ErmProblem, drop: Drop, horizon: usize) -> Result<Vec<Array1<f64>>> {
    let (m, n) = problem.a.dim();
    let mut reduced = problem.clone();
    match drop {
        Drop::Predictor(l) if l < n => reduced.a.column_mut(l).fill(0.0),
        Drop::Sample(k) if k < m => reduced.a.row_mut(k).fill(0.0),
        _ => return Err(Error::validation("drop", format!("index out of range for {m}x{n} design"))),
    }
    run(&reduced, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{sample_asymmetric, EnsembleSpec, EntryLaw, Normalization};
    use ndarray::array;

    fn design(m: usize, n: usize, seed: u64) -> Array2<f64> {
        sample_asymmetric(&EnsembleSpec::asymmetric(EntryLaw::Gaussian, Normalization::InvSqrtM), m, n, seed).unwrap()
    }

    #[test]
    fn zero_design_stays_at_zero() {
        let p = ErmProblem::linear(Array2::zeros((4, 3)), Response::Explicit(array![1.0, 2.0, 3.0, 4.0]), Loss::Squared, ProxSpec::Lasso { lambda: 1.0 }, 0.5);
        let h = pgd_linear(&p, 5).unwrap();
        assert!(h.iter().all(|mu| mu.iter().all(|x| *x == 0.0)));
        let p = ErmProblem::logistic(Array2::zeros((4, 3)), array![1.0, 0.0, 0.0], array![0.1, -0.2, 0.3, 0.0], 0.0, ProxSpec::Ridge { lambda: 1.0 }, 0.5);
        assert!(pgd_logistic(&p, 3).unwrap().iter().all(|mu| mu.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn one_step_closed_forms() {
        let a = design(6, 4, 1);
        let y = array![0.5, -1.0, 0.2, 0.0, 1.5, -0.3];
        let eta = 0.3;
        let p = ErmProblem::linear(a.clone(), Response::Explicit(y.clone()), Loss::Squared, ProxSpec::Zero, eta);
        let mu1 = &pgd_linear(&p, 1).unwrap()[1];
        let want = a.t().dot(&y) * eta;
        assert!((mu1 - &want).iter().all(|d| d.abs() < 1e-15));
        let p = ErmProblem::linear(a.clone(), Response::Explicit(y.clone()), Loss::Squared, ProxSpec::Ridge { lambda: 2.0 }, eta);
        let mu1 = &pgd_linear(&p, 1).unwrap()[1];
        assert!((mu1 - &(want / (1.0 + eta * 2.0))).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn zero_response_gives_zero_solution() {
        let p = ErmProblem::linear(design(20, 10, 2), Response::Explicit(Array1::zeros(20)), Loss::Squared, ProxSpec::Ridge { lambda: 1.0 }, 0.3);
        let fp = solve_fixed_point(&p, 1e-10, 1000).unwrap();
        assert!(fp.mu.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn huge_lasso_penalty_gives_zero() {
        let a = design(30, 10, 3);
        let y = Array1::from_shape_fn(30, |i| (i as f64).sin());
        let eta = 0.2;
        let bound = a.t().dot(&y).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let p = ErmProblem::linear(a, Response::Explicit(y), Loss::Squared, ProxSpec::Lasso { lambda: 2.0 * bound }, eta);
        let fp = solve_fixed_point(&p, 1e-12, 100).unwrap();
        assert!(fp.mu.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn non_convergence_is_reported() {
        let p = ErmProblem::linear(design(40, 20, 4), Response::Explicit(Array1::ones(40)), Loss::Squared, ProxSpec::Zero, 0.01);
        assert!(matches!(solve_fixed_point(&p, 1e-14, 3), Err(Error::NotConverged { iterations: 3, .. })));
    }

    #[test]
    fn logistic_gradient_at_zero() {
        let a = design(8, 3, 5);
        let mu0 = Array1::zeros(3);
        let xi = array![0.3, -0.2, 1.1, -0.7, 0.05, -0.01, 2.0, -3.0];
        let (direct, equiv) = logistic_objective_check(&a, &mu0, &xi, &ProxSpec::Zero, &Array1::zeros(3));
        let y = xi.mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        let want = -a.t().dot(&y) * 0.5;
        for j in 0..3 {
            assert!((direct[j] - want[j]).abs() < 1e-15);
            assert!((equiv[j] - want[j]).abs() < 1e-15);
        }
        let p = ErmProblem::logistic(a.clone(), mu0, xi, 0.0, ProxSpec::Zero, 1.0);
        let g = p.data_gradient(&Array1::zeros(3));
        assert!((g - want).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn logistic_single_sample_by_hand() {
        // One sample, n = 2: A = [1, 2], mu0 = [1, 0], xi = -2 gives label -1.
        let a = array![[1.0, 2.0]];
        let mu = array![0.5, -0.25];
        let (direct, equiv) = logistic_objective_check(&a, &array![1.0, 0.0], &array![-2.0], &ProxSpec::Ridge { lambda: 1.0 }, &mu);
        // <A, mu> = 0, Y = -1: d/dx rho(x) at 0 is 1/2, gradient = 1/2 * A + mu.
        let want = array![0.5 + 0.5, 1.0 - 0.25];
        for j in 0..2 {
            assert!((direct[j] - want[j]).abs() < 1e-15);
            assert!((equiv[j] - want[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn leave_one_out_cases() {
        let mut a = design(10, 5, 6);
        a.column_mut(2).fill(0.0);
        let p = ErmProblem::linear(a, Response::Linear { mu0: Array1::ones(5), xi: Array1::zeros(10) }, Loss::Squared, ProxSpec::Ridge { lambda: 0.5 }, 0.3);
        let full = pgd_linear(&p, 4).unwrap();
        let loo = leave_one_out_run(&p, Drop::Predictor(2), 4).unwrap();
        assert_eq!(full, loo);
        assert!(leave_one_out_run(&p, Drop::Sample(10), 4).is_err());
    }

    #[test]
    fn leave_one_out_two_by_two_by_hand() {
        // Dropping sample 1 leaves only row 0 in the first gradient step.
        let a = array![[1.0, 0.5], [-0.5, 2.0]];
        let y = array![1.0, -1.0];
        let p = ErmProblem::linear(a, Response::Explicit(y), Loss::Squared, ProxSpec::Zero, 0.1);
        let full = pgd_linear(&p, 1).unwrap();
        let loo = leave_one_out_run(&p, Drop::Sample(1), 1).unwrap();
        assert!((full[1][0] - 0.1 * (1.0 + 0.5)).abs() < 1e-15);
        assert!((full[1][1] - 0.1 * (0.5 - 2.0)).abs() < 1e-15);
        assert!((loo[1][0] - 0.1).abs() < 1e-15);
        assert!((loo[1][1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn default_eta_uses_operator_norm() {
        let a = array![[2.0, 0.0], [0.0, 1.0]];
        assert!((default_eta(&a) - 0.125).abs() < 1e-9);
    }
}
