//! Replicate experiments: universality gaps, state evolution against simulation,
//! entrywise Gaussianity of gradient descent, convergence and delocalization tables.
//!
//! Every experiment derives its randomness from the master seed: replicate `r` draws
//! its matrices from `derive(seed, "replicate", r)`, fixed problem data (`z0`, `mu0`,
//! `xi`, masks) from their own labels, and state evolutions from `derive(seed, "se", 0)`.
//! Replicates run in parallel and are reduced in index order.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::{run_amp_symmetric, run_asymmetric, run_leave_k_out, run_symmetric, CoefTable, Trajectory};
use crate::ensembles::{matched_pair, sample, EnsembleSpec, EntryLaw, VarianceProfile};
use crate::erm::logistic::{default_clamp, sample_logistic_noise, smoothstep};
use crate::erm::loss::Loss;
use crate::erm::prox::ProxSpec;
use crate::erm::{default_eta, pgd_from, solve_fixed_point, ErmProblem, Response};
use crate::error::{Error, Result};
use crate::gd_se::{gd_entrywise_law, gd_se, GdSeInput};
use crate::programs::{
    build_gd, build_logistic, build_pgd_linear, build_power_iteration, build_tanh_gfom, random_asymmetric,
    random_symmetric, AsymmetricProgram, GdParams, Identity, Pointwise, Row, SymmetricProgram, Tanh,
};
use crate::seed::{derive, stream_rng};
use crate::state_evolution::{
    amp_se_symmetric, predict_average, se_asymmetric, se_symmetric, Estimate, SeOptions, SeRecord, Track,
};

/// Experiment keys accepted in config files.
pub const EXPERIMENT_KEYS: &[(&str, &str)] = &[
    ("universality_averaged", "gap of n^-1 sum_k psi(z_k(t)) between two entry laws"),
    ("universality_entrywise", "gap of E psi(z_k(t)) for k in the chosen coordinates"),
    ("universality_sweep", "universality_averaged over a list of dimensions n"),
    ("se_vs_simulation", "simulated averages against state-evolution predictions"),
    ("gd_gaussianity", "replicates of mu_l(t) - mu0_l against the gradient-descent state evolution law"),
    ("convergence_decay", "distance of proximal gradient iterates to the fixed point"),
    ("delocalization", "sup-norm over root-mean-square of iterates, and leave-one-out gaps"),
];

/// Named test functions with their pseudo-Lipschitz order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psi {
    Identity,
    Square,
    Abs,
    /// `x tanh(x)`.
    TanhMoment,
    /// Cubic smoothstep of `x` on `[-1, 1]`.
    IndicatorSmoothed,
    Constant(f64),
}

impl Psi {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Psi::Identity => x,
            Psi::Square => x * x,
            Psi::Abs => x.abs(),
            Psi::TanhMoment => x * x.tanh(),
            Psi::IndicatorSmoothed => smoothstep(x),
            Psi::Constant(c) => c,
        }
    }

    pub fn order(&self) -> u32 {
        match self {
            Psi::Square | Psi::TanhMoment => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Psi::Identity => "identity".into(),
            Psi::Square => "square".into(),
            Psi::Abs => "abs".into(),
            Psi::TanhMoment => "tanh_moment".into(),
            Psi::IndicatorSmoothed => "indicator_smoothed".into(),
            Psi::Constant(c) => format!("constant({c})"),
        }
    }
}

/// Deterministic initial or signal vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Ones,
    Constant { value: f64 },
    /// Independent `N(0, scale^2)` entries, fixed by the master seed.
    Gaussian { scale: f64 },
}

impl InitSpec {
    pub fn materialize(&self, len: usize, seed: u64, label: &str) -> Array1<f64> {
        match self {
            InitSpec::Ones => Array1::ones(len),
            InitSpec::Constant { value } => Array1::from_elem(len, *value),
            InitSpec::Gaussian { scale } => {
                let mut rng = stream_rng(seed, label, 0);
                Array1::from_shape_fn(len, |_| scale * rng.sample::<f64, _>(StandardNormal))
            }
        }
    }
}

fn default_loss() -> Loss {
    Loss::Squared
}
fn default_prox() -> ProxSpec {
    ProxSpec::Zero
}
fn default_one() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    10_000
}

/// Program key and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramConfig {
    pub key: String,
    /// `z0` for symmetric programs, `mu0` for regression programs.
    #[serde(default)]
    pub init: InitSpec,
    /// Step size; regression programs default to `0.5 / ||A||^2` on a pilot draw.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_loss")]
    pub loss: Loss,
    #[serde(default = "default_prox")]
    pub prox: ProxSpec,
    #[serde(default)]
    pub sigma: f64,
    /// Standard deviation of the Gaussian noise `xi`.
    #[serde(default = "default_one")]
    pub noise_sd: f64,
    /// Per-step sample fraction for stochastic gradient descent; masks are fixed.
    #[serde(default)]
    pub sample_fraction: Option<f64>,
    #[serde(default)]
    pub resample_masks: bool,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl ProgramConfig {
    pub fn new(key: &str) -> Self {
        ProgramConfig {
            key: key.into(),
            init: InitSpec::Ones,
            eta: None,
            lambda: 0.0,
            beta: 0.0,
            loss: Loss::Squared,
            prox: ProxSpec::Zero,
            sigma: 0.0,
            noise_sd: 1.0,
            sample_fraction: None,
            resample_masks: false,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

fn default_ensemble() -> EnsembleSpec {
    EnsembleSpec::symmetric(EntryLaw::Gaussian)
}
fn default_replicates() -> i64 {
    50
}
fn default_psi() -> Vec<Psi> {
    vec![Psi::Square]
}
fn default_coords() -> Vec<usize> {
    vec![0]
}
fn default_mc() -> usize {
    20_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub program: ProgramConfig,
    #[serde(default = "default_ensemble")]
    pub ensemble: EnsembleSpec,
    /// Entry law of the comparison ensemble; the same law (new seeds) when absent.
    #[serde(default)]
    pub law_b: Option<EntryLaw>,
    pub n: i64,
    /// Rows of an asymmetric design.
    #[serde(default)]
    pub m: Option<i64>,
    pub horizon: i64,
    #[serde(default = "default_replicates")]
    pub replicates: i64,
    #[serde(default = "default_psi")]
    pub psi: Vec<Psi>,
    #[serde(default = "default_coords")]
    pub coordinates: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Absolute tolerance on each gap; `4 x` the combined standard error when absent.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Dimensions for `universality_sweep`.
    #[serde(default)]
    pub sweep_n: Vec<usize>,
}

impl ExperimentConfig {
    pub fn new(experiment: &str, program: ProgramConfig, n: usize, horizon: usize) -> Self {
        ExperimentConfig {
            experiment: experiment.into(),
            program,
            ensemble: default_ensemble(),
            law_b: None,
            n: n as i64,
            m: None,
            horizon: horizon as i64,
            replicates: 50,
            psi: default_psi(),
            coordinates: default_coords(),
            seed: 0,
            mc_samples: default_mc(),
            tolerance: None,
            sweep_n: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !EXPERIMENT_KEYS.iter().any(|(k, _)| *k == self.experiment) {
            return Err(Error::Config(format!("unknown experiment '{}'", self.experiment)));
        }
        if !crate::programs::PROGRAM_KEYS.iter().any(|(k, _)| *k == self.program.key) {
            return Err(Error::Config(format!("unknown program '{}'", self.program.key)));
        }
        if self.n <= 0 {
            return Err(Error::validation("n", format!("must be positive, got {}", self.n)));
        }
        if let Some(m) = self.m {
            if m <= 0 {
                return Err(Error::validation("m", format!("must be positive, got {m}")));
            }
        }
        if self.horizon <= 0 {
            return Err(Error::validation("horizon", format!("must be positive, got {}", self.horizon)));
        }
        if self.replicates < 2 {
            return Err(Error::validation("replicates", "standard errors need at least 2"));
        }
        if self.psi.is_empty() {
            return Err(Error::validation("psi", "need at least one test function"));
        }
        if self.mc_samples < 64 {
            return Err(Error::validation("mc_samples", "need at least 64"));
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0) {
                return Err(Error::validation("tolerance", "must be nonnegative"));
            }
        }
        if let Some(f) = self.program.sample_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::validation("program.sample_fraction", "must lie in (0, 1]"));
            }
        }
        if self.experiment == "universality_sweep" && self.sweep_n.contains(&0) {
            return Err(Error::validation("sweep_n", "dimensions must be positive"));
        }
        if self.experiment == "universality_sweep" && self.sweep_n.is_empty() {
            return Err(Error::validation("sweep_n", "need at least one dimension"));
        }
        self.ensemble.validate()?;
        if let Some(law) = &self.law_b {
            law.validate()?;
        }
        let (m, n) = self.dims();
        if self.experiment == "universality_entrywise" {
            let dim = if self.ensemble.symmetric { n } else { m + n };
            if self.coordinates.is_empty() || self.coordinates.len() > 10 || self.coordinates.iter().any(|k| *k >= dim) {
                return Err(Error::validation("coordinates", format!("need 1 to 10 coordinates below {dim}")));
            }
        }
        Ok(())
    }

    /// `(m, n)`; `m = n` for symmetric ensembles.
    pub fn dims(&self) -> (usize, usize) {
        let n = self.n.max(0) as usize;
        let m = if self.ensemble.symmetric { n } else { self.m.unwrap_or(self.n).max(0) as usize };
        (m, n)
    }

    pub fn horizon(&self) -> usize {
        self.horizon.max(0) as usize
    }

    pub fn replicates(&self) -> usize {
        self.replicates.max(0) as usize
    }

    fn se_options(&self) -> SeOptions {
        SeOptions::default().with_samples(self.mc_samples).with_seed(derive(self.seed, "se", 0))
    }
}

/// One compared quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    pub t: usize,
    pub coordinate: Option<usize>,
    pub psi: String,
    pub estimate_a: f64,
    pub se_a: f64,
    /// Second law, or the prediction.
    pub estimate_b: f64,
    pub se_b: f64,
    pub gap: f64,
    pub combined_se: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Statistic {
    pub fn new(name: &str, t: usize, coordinate: Option<usize>, psi: &str, a: Estimate, b: Estimate, tol: Option<f64>) -> Self {
        let gap = a.mean - b.mean;
        let combined_se = a.se.hypot(b.se);
        let tolerance = tol.unwrap_or(4.0 * combined_se);
        Statistic {
            name: name.into(),
            t,
            coordinate,
            psi: psi.into(),
            estimate_a: a.mean,
            se_a: a.se,
            estimate_b: b.mean,
            se_b: b.se,
            gap,
            combined_se,
            tolerance,
            pass: gap.abs() <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub experiment: String,
    pub replicates: usize,
    pub divergent_a: usize,
    pub divergent_b: usize,
    pub statistics: Vec<Statistic>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl ComparisonReport {
    pub fn passed(&self) -> bool {
        self.statistics.iter().all(|s| s.pass)
    }

    pub fn find(&self, name: &str, t: usize) -> Option<&Statistic> {
        self.statistics.iter().find(|s| s.name == name && s.t == t)
    }
}

/// Row of plot data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub y_err: f64,
}

/// Kolmogorov-Smirnov distance between the empirical law of `x` and `cdf`.
pub fn ks_statistic(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0, |d, (i, v)| {
        let f = cdf(*v);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// A program ready to run on sampled matrices.
#[derive(Clone)]
pub enum Runner {
    Gfom(SymmetricProgram),
    Amp { fns: Vec<Row>, onsager: CoefTable, z0: Array1<f64>, se: Arc<SeRecord> },
    Asymmetric(AsymmetricProgram),
}

impl Runner {
    pub fn run(&self, a: &Array2<f64>) -> Result<Trajectory> {
        match self {
            Runner::Gfom(p) => run_symmetric(a, p),
            Runner::Amp { fns, onsager, z0, .. } => run_amp_symmetric(a, fns, onsager, z0),
            Runner::Asymmetric(p) => run_asymmetric(a, p),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self, Runner::Asymmetric(_))
    }

    /// Iterate at step `t`: `z(t)`, or `(u(t), v(t))` stacked.
    pub fn iterate(&self, traj: &Trajectory, t: usize) -> Array1<f64> {
        if self.is_symmetric() {
            traj.z(t).clone()
        } else {
            ndarray::concatenate![ndarray::Axis(0), *traj.u(t), *traj.v(t)]
        }
    }

    pub fn state_evolution(&self, profile: &VarianceProfile, opts: &SeOptions) -> Result<SeRecord> {
        match self {
            Runner::Gfom(p) => se_symmetric(p, profile, opts),
            Runner::Amp { se, .. } => Ok((**se).clone()),
            Runner::Asymmetric(p) => se_asymmetric(p, profile, opts),
        }
    }
}

/// Fixed regression data `(mu0, xi)` and masks for a config.
pub struct RegressionData {
    pub mu0: Array1<f64>,
    pub xi: Array1<f64>,
    pub masks: Option<Vec<Vec<bool>>>,
    pub eta: f64,
}

pub fn regression_data(cfg: &ExperimentConfig) -> Result<RegressionData> {
    let (m, n) = cfg.dims();
    let p = &cfg.program;
    let mu0 = p.init.materialize(n, cfg.seed, "mu0");
    let xi = if p.key == "logistic" {
        Array1::from(sample_logistic_noise(m, derive(cfg.seed, "xi", 0)))
    } else {
        let mut rng = stream_rng(cfg.seed, "xi", 0);
        Array1::from_shape_fn(m, |_| p.noise_sd * rng.sample::<f64, _>(StandardNormal))
    };
    let masks = p.sample_fraction.map(|frac| {
        (0..cfg.horizon())
            .map(|t| {
                let mut rng = stream_rng(cfg.seed, "masks", t as u64);
                (0..m).map(|_| rng.gen::<f64>() < frac).collect()
            })
            .collect()
    });
    let eta = match p.eta {
        Some(e) => e,
        None => default_eta(&sample(&cfg.ensemble, m, n, derive(cfg.seed, "eta", 0))?),
    };
    Ok(RegressionData { mu0, xi, masks, eta })
}

/// Builds the program named in `cfg` for dimension `n` (and `m` for asymmetric ones).
pub fn build_runner(cfg: &ExperimentConfig) -> Result<Runner> {
    let (m, n) = cfg.dims();
    let t = cfg.horizon();
    let p = &cfg.program;
    let symmetric_only = ["power_iteration", "tanh_gfom", "tanh_amp"];
    if symmetric_only.contains(&p.key.as_str()) && !cfg.ensemble.symmetric {
        return Err(Error::Config(format!("program '{}' needs a symmetric ensemble", p.key)));
    }
    if !symmetric_only.contains(&p.key.as_str()) && p.key != "random" && cfg.ensemble.symmetric {
        return Err(Error::Config(format!("program '{}' needs an asymmetric ensemble", p.key)));
    }
    let z0 = || p.init.materialize(n, cfg.seed, "z0");
    Ok(match p.key.as_str() {
        "power_iteration" => Runner::Gfom(build_power_iteration(t, z0())),
        "tanh_gfom" => Runner::Gfom(build_tanh_gfom(t, z0())),
        "tanh_amp" => {
            let fns: Vec<Row> = (1..=t).map(|s| Pointwise::new(s, s - 1, Arc::new(Tanh)).boxed()).collect();
            let z0 = z0();
            let profile = cfg.ensemble.second_moments(n, n)?;
            let se = amp_se_symmetric(&fns, &z0, &profile, &cfg.se_options())?;
            let onsager = se.sides[0].coefs().clone();
            Runner::Amp { fns, onsager, z0, se: Arc::new(se) }
        }
        "random" if cfg.ensemble.symmetric => Runner::Gfom(random_symmetric(n, t, derive(cfg.seed, "program", 0))),
        "random" => Runner::Asymmetric(random_asymmetric(m, n, t, derive(cfg.seed, "program", 0))),
        "pgd_linear" => {
            let d = regression_data(cfg)?;
            Runner::Asymmetric(build_pgd_linear(&p.loss, &p.prox, d.eta, &d.mu0, &d.xi, t)?)
        }
        "gd_ridge" | "gd_momentum" => {
            let d = regression_data(cfg)?;
            let beta = if p.key == "gd_ridge" { 0.0 } else { p.beta };
            let params = GdParams { loss: p.loss.clone(), eta: d.eta, lambda: p.lambda, beta };
            Runner::Asymmetric(build_gd(&params, &d.mu0, &d.xi, d.masks.as_deref(), t)?)
        }
        "logistic" => {
            let d = regression_data(cfg)?;
            Runner::Asymmetric(build_logistic(&p.prox, d.eta, p.sigma, &d.mu0, &d.xi, default_clamp(n), t)?)
        }
        other => return Err(Error::Config(format!("unknown program '{other}'"))),
    })
}

/// Values per replicate (or `None` for a divergent replicate).
type ReplicateValues = Option<Vec<f64>>;

fn absorb_divergence(r: Result<Vec<f64>>) -> Result<ReplicateValues> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Divergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs `stats` on both laws of every replicate. Returns per-law vectors of replicate values.
fn paired_replicates(
    cfg: &ExperimentConfig,
    runner: &Runner,
    stats: &(dyn Fn(&Trajectory) -> Vec<f64> + Sync),
) -> Result<(Vec<ReplicateValues>, Vec<ReplicateValues>)> {
    let (m, n) = cfg.dims();
    let law_b = cfg.law_b.unwrap_or(cfg.ensemble.law);
    let out = (0..cfg.replicates())
        .into_par_iter()
        .map(|r| {
            let (a, b) = matched_pair(&cfg.ensemble, law_b, m, n, derive(cfg.seed, "replicate", r as u64))?;
            let va = absorb_divergence(runner.run(&a).map(|tr| stats(&tr)))?;
            let vb = absorb_divergence(runner.run(&b).map(|tr| stats(&tr)))?;
            Ok((va, vb))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

fn single_replicates(
    cfg: &ExperimentConfig,
    runner: &Runner,
    stats: &(dyn Fn(&Trajectory) -> Vec<f64> + Sync),
) -> Result<Vec<ReplicateValues>> {
    let (m, n) = cfg.dims();
    (0..cfg.replicates())
        .into_par_iter()
        .map(|r| {
            let a = sample(&cfg.ensemble, m, n, derive(cfg.seed, "replicate", r as u64))?;
            absorb_divergence(runner.run(&a).map(|tr| stats(&tr)))
        })
        .collect()
}

fn column(values: &[ReplicateValues], j: usize) -> Estimate {
    let xs: Vec<f64> = values.iter().flatten().map(|v| v[j]).collect();
    if xs.is_empty() {
        Estimate { mean: f64::NAN, se: f64::NAN }
    } else {
        Estimate::from_samples(&xs)
    }
}

fn divergent(values: &[ReplicateValues]) -> usize {
    values.iter().filter(|v| v.is_none()).count()
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = std::time::Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Gap of `(1/dim) sum_k psi(x_k(t))` between the two laws, for every `psi` and `t`.
/// For asymmetric programs `x = (u, v)` and `dim = m + n`.
pub fn universality_averaged(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let runner = build_runner(cfg)?;
    universality_averaged_with(cfg, &runner)
}

pub fn universality_averaged_with(cfg: &ExperimentConfig, runner: &Runner) -> Result<ComparisonReport> {
    let horizon = cfg.horizon();
    let psis = cfg.psi.clone();
    let r2 = runner.clone();
    let stats = move |tr: &Trajectory| -> Vec<f64> {
        let mut out = Vec::new();
        for t in 1..=horizon {
            let x = r2.iterate(tr, t);
            for psi in &psis {
                out.push(x.iter().map(|v| psi.eval(*v)).sum::<f64>() / x.len() as f64);
            }
        }
        out
    };
    let ((va, vb), secs) = timed(|| paired_replicates(cfg, runner, &stats))?;
    let mut statistics = Vec::new();
    let mut j = 0;
    for t in 1..=horizon {
        for psi in &cfg.psi {
            statistics.push(Statistic::new(
                &format!("average[{}]", psi.name()),
                t,
                None,
                &psi.name(),
                column(&va, j),
                column(&vb, j),
                cfg.tolerance,
            ));
            j += 1;
        }
    }
    Ok(ComparisonReport {
        experiment: "universality_averaged".into(),
        replicates: cfg.replicates(),
        divergent_a: divergent(&va),
        divergent_b: divergent(&vb),
        statistics,
        runtime_secs: secs,
    })
}

/// Gap of `E psi(x_k(t))` between the two laws, per coordinate `k` in `cfg.coordinates`.
pub fn universality_entrywise(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let runner = build_runner(cfg)?;
    universality_entrywise_with(cfg, &runner)
}

pub fn universality_entrywise_with(cfg: &ExperimentConfig, runner: &Runner) -> Result<ComparisonReport> {
    let horizon = cfg.horizon();
    let psis = cfg.psi.clone();
    let coords = cfg.coordinates.clone();
    let r2 = runner.clone();
    let stats = move |tr: &Trajectory| -> Vec<f64> {
        let mut out = Vec::new();
        for t in 1..=horizon {
            let x = r2.iterate(tr, t);
            for &k in &coords {
                for psi in &psis {
                    out.push(psi.eval(x[k]));
                }
            }
        }
        out
    };
    let ((va, vb), secs) = timed(|| paired_replicates(cfg, runner, &stats))?;
    let mut statistics = Vec::new();
    let mut j = 0;
    for t in 1..=horizon {
        for &k in &cfg.coordinates {
            for psi in &cfg.psi {
                statistics.push(Statistic::new(
                    &format!("entry[{}][{k}]", psi.name()),
                    t,
                    Some(k),
                    &psi.name(),
                    column(&va, j),
                    column(&vb, j),
                    cfg.tolerance,
                ));
                j += 1;
            }
        }
    }
    Ok(ComparisonReport {
        experiment: "universality_entrywise".into(),
        replicates: cfg.replicates(),
        divergent_a: divergent(&va),
        divergent_b: divergent(&vb),
        statistics,
        runtime_secs: secs,
    })
}

/// Simulated `(1/dim) sum_k psi(x_k(t))` (estimate A) against the state-evolution
/// prediction (estimate B). Asymmetric programs report the `u` and `v` tracks separately.
pub fn se_vs_simulation(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let runner = build_runner(cfg)?;
    let (m, n) = cfg.dims();
    let profile = cfg.ensemble.second_moments(m, n)?;
    let se = runner.state_evolution(&profile, &cfg.se_options())?;
    se_vs_simulation_with(cfg, &runner, &se)
}

pub fn se_vs_simulation_with(cfg: &ExperimentConfig, runner: &Runner, se: &SeRecord) -> Result<ComparisonReport> {
    let horizon = cfg.horizon();
    let tracks: Vec<Track> = if runner.is_symmetric() { vec![Track::Z] } else { vec![Track::U, Track::V] };
    let psis = cfg.psi.clone();
    let tr2 = tracks.clone();
    let stats = move |tr: &Trajectory| -> Vec<f64> {
        let mut out = Vec::new();
        for t in 1..=horizon {
            for track in &tr2 {
                let x = match track {
                    Track::Z => tr.z(t),
                    Track::U => tr.u(t),
                    Track::V => tr.v(t),
                };
                for psi in &psis {
                    out.push(x.iter().map(|v| psi.eval(*v)).sum::<f64>() / x.len() as f64);
                }
            }
        }
        out
    };
    let (va, secs) = timed(|| single_replicates(cfg, runner, &stats))?;
    let pred_seed = derive(cfg.seed, "predict", 0);
    let mut statistics = Vec::new();
    let mut j = 0;
    for t in 1..=horizon {
        for track in &tracks {
            for psi in &cfg.psi {
                let p = *psi;
                let pred = predict_average(se, *track, t, &move |x| p.eval(x), cfg.mc_samples, pred_seed)?;
                statistics.push(Statistic::new(
                    &format!("se[{:?}][{}]", track, psi.name()).to_lowercase(),
                    t,
                    None,
                    &psi.name(),
                    column(&va, j),
                    pred,
                    cfg.tolerance,
                ));
                j += 1;
            }
        }
    }
    Ok(ComparisonReport {
        experiment: "se_vs_simulation".into(),
        replicates: cfg.replicates(),
        divergent_a: divergent(&va),
        divergent_b: 0,
        statistics,
        runtime_secs: secs,
    })
}

/// Default KS tolerance for [`gd_gaussianity_test`].
pub const KS_TOLERANCE: f64 = 0.06;

/// Replicates of `mu_l(t) - mu0_l` (with `A` resampled, `mu0`, `xi`, masks fixed) against
/// `N(b_l mu0_l, sigma2_l)`. Per coordinate: mean, variance and KS statistics; the KS
/// tolerance is `cfg.tolerance` or [`KS_TOLERANCE`]. Zero predicted variance leaves
/// only the mean check.
pub fn gd_gaussianity_test(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let p = &cfg.program;
    if p.key != "gd_ridge" {
        return Err(Error::Config(format!("gd_gaussianity needs program gd_ridge, got '{}'", p.key)));
    }
    if p.resample_masks {
        return Err(Error::Config("gd_gaussianity keeps masks fixed; resample_masks must be false".into()));
    }
    let (m, n) = cfg.dims();
    if cfg.coordinates.iter().any(|l| *l >= n) {
        return Err(Error::validation("coordinates", format!("must be below n = {n}")));
    }
    let t = cfg.horizon();
    let d = regression_data(cfg)?;
    let runner = build_runner(cfg)?;
    let input = GdSeInput {
        loss: p.loss.clone(),
        eta: d.eta,
        lambda: p.lambda,
        mu0: d.mu0.clone(),
        xi: d.xi.clone(),
        masks: d.masks.clone(),
        profile: cfg.ensemble.second_moments(m, n)?,
        horizon: t,
    };
    let state = gd_se(&input, &cfg.se_options())?;
    let coords = cfg.coordinates.clone();
    let stats = move |tr: &Trajectory| -> Vec<f64> { coords.iter().map(|l| tr.v(t)[*l]).collect() };
    let (va, secs) = timed(|| single_replicates(cfg, &runner, &stats))?;
    let unit = Normal::new(0.0, 1.0).expect("standard normal");
    let mut statistics = Vec::new();
    for (j, &l) in cfg.coordinates.iter().enumerate() {
        let law = gd_entrywise_law(&state, l, t, d.mu0[l])?;
        let xs: Vec<f64> = va.iter().flatten().map(|v| v[j]).collect();
        let est = Estimate::from_samples(&xs);
        let exact = Estimate { mean: law.mean, se: 0.0 };
        if law.variance == 0.0 {
            let tol = cfg.tolerance.unwrap_or(1e-12 * law.mean.abs().max(1.0));
            statistics.push(Statistic::new(&format!("mean[{l}]"), t, Some(l), "identity", est, exact, Some(tol)));
            continue;
        }
        statistics.push(Statistic::new(&format!("mean[{l}]"), t, Some(l), "identity", est, exact, None));
        let r = xs.len() as f64;
        let var = xs.iter().map(|x| (x - est.mean).powi(2)).sum::<f64>() / (r - 1.0);
        let var_est = Estimate { mean: var, se: var * (2.0 / (r - 1.0)).sqrt() };
        statistics.push(Statistic::new(
            &format!("variance[{l}]"),
            t,
            Some(l),
            "square",
            var_est,
            Estimate { mean: law.variance, se: 0.0 },
            None,
        ));
        let sd = law.variance.sqrt();
        let z: Vec<f64> = xs.iter().map(|x| (x - law.mean) / sd).collect();
        let ks = ks_statistic(&z, |x| unit.cdf(x));
        statistics.push(Statistic::new(
            &format!("ks[{l}]"),
            t,
            Some(l),
            "ks",
            Estimate { mean: ks, se: 0.0 },
            Estimate { mean: 0.0, se: 0.0 },
            Some(cfg.tolerance.unwrap_or(KS_TOLERANCE)),
        ));
    }
    Ok(ComparisonReport {
        experiment: "gd_gaussianity".into(),
        replicates: cfg.replicates(),
        divergent_a: divergent(&va),
        divergent_b: 0,
        statistics,
        runtime_secs: secs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: usize,
    pub l2_over_sqrt_n: f64,
    pub linf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit of `ln y` against `x` over positive `y`; `None` with fewer than 2 points.
pub fn fit_log_linear(points: &[(f64, f64)]) -> Option<LogLinearFit> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, y)| *y > 0.0).map(|(x, y)| (*x, y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LogLinearFit { slope, intercept: my - slope * mx, r2 })
}

/// Distances of proximal gradient iterates to the fixed point `mu_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    /// Fit of `ln(||mu(t) - mu_hat|| / sqrt(n))` against `t >= 1`.
    pub fit: Option<LogLinearFit>,
    /// `false` when `mu_hat` was not found; rows then hold `||mu(t)||` itself.
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    /// Fraction of exact zeros in `mu_hat` (or in the last iterate).
    pub sparsity: f64,
    pub r2_min: f64,
}

impl DecayTable {
    pub fn passed(&self) -> bool {
        self.converged && self.fit.is_some_and(|f| f.slope < 0.0 && f.r2 >= self.r2_min)
    }
}

/// Default `R^2` threshold of the decay fit.
pub const DECAY_R2_MIN: f64 = 0.95;

pub fn convergence_decay_report(
    problem: &ErmProblem,
    horizon: usize,
    start: Option<&Array1<f64>>,
    tol: f64,
    max_t: usize,
) -> Result<DecayTable> {
    let n = problem.a.ncols();
    let zero = Array1::zeros(n);
    let hist = pgd_from(problem, start.unwrap_or(&zero), horizon)?;
    let sparsity = |x: &Array1<f64>| x.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
    let row = |t: usize, d: &Array1<f64>| DecayRow {
        t,
        l2_over_sqrt_n: d.dot(d).sqrt() / (n as f64).sqrt(),
        linf: d.iter().fold(0.0f64, |a, v| a.max(v.abs())),
    };
    match solve_fixed_point(problem, tol, max_t) {
        Ok(fp) => {
            let rows: Vec<DecayRow> = hist.iter().enumerate().map(|(t, mu)| row(t, &(mu - &fp.mu))).collect();
            let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.t >= 1).map(|r| (r.t as f64, r.l2_over_sqrt_n)).collect();
            Ok(DecayTable {
                fit: fit_log_linear(&pts),
                rows,
                converged: true,
                iterations: fp.iterations,
                residual: fp.residual,
                sparsity: sparsity(&fp.mu),
                r2_min: DECAY_R2_MIN,
            })
        }
        Err(Error::NotConverged { iterations, residual }) => Ok(DecayTable {
            rows: hist.iter().enumerate().map(|(t, mu)| row(t, mu)).collect(),
            fit: None,
            converged: false,
            iterations,
            residual,
            sparsity: sparsity(hist.last().expect("nonempty history")),
            r2_min: DECAY_R2_MIN,
        }),
        Err(e) => Err(e),
    }
}

/// Builds the regression problem of a `pgd_linear` config on a design drawn from the
/// ensemble with `derive(seed, "design", 0)`.
pub fn erm_problem(cfg: &ExperimentConfig) -> Result<ErmProblem> {
    if cfg.program.key != "pgd_linear" {
        return Err(Error::Config(format!("convergence_decay needs program pgd_linear, got '{}'", cfg.program.key)));
    }
    let (m, n) = cfg.dims();
    let a = sample(&cfg.ensemble, m, n, derive(cfg.seed, "design", 0))?;
    let d = regression_data(cfg)?;
    let eta = cfg.program.eta.unwrap_or_else(|| default_eta(&a));
    Ok(ErmProblem::linear(a, Response::Linear { mu0: d.mu0, xi: d.xi }, cfg.program.loss.clone(), cfg.program.prox.clone(), eta))
}

pub fn convergence_decay(cfg: &ExperimentConfig) -> Result<DecayTable> {
    cfg.validate()?;
    let problem = erm_problem(cfg)?;
    let mut table = convergence_decay_report(&problem, cfg.horizon(), None, cfg.program.tol, cfg.program.max_iter)?;
    if let Some(t) = cfg.tolerance {
        table.r2_min = t;
    }
    Ok(table)
}

/// `||x||_inf / (||x|| / sqrt(n))`; 1 for the zero vector.
pub fn delocalization_ratio(x: &Array1<f64>) -> f64 {
    let rms = (x.dot(x) / x.len() as f64).sqrt();
    if rms == 0.0 {
        return 1.0;
    }
    x.iter().fold(0.0f64, |a, v| a.max(v.abs())) / rms
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelocalizationRow {
    pub t: usize,
    /// Largest over replicates.
    pub linf: f64,
    /// Mean over replicates.
    pub rms: f64,
    pub ratio: f64,
    pub bound: f64,
    /// Mean of `||x(t) - x_[-P](t)|| / sqrt(n)` with `P = {0}`, when computed.
    pub loo_gap: Option<f64>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelocalizationTable {
    pub rows: Vec<DelocalizationRow>,
    pub replicates: usize,
}

impl DelocalizationTable {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| !r.flagged)
    }
}

/// Default poly-log bound `10 (log n)^(2t)` on the delocalization ratio.
pub fn delocalization_bound(n: usize, t: usize) -> f64 {
    10.0 * (n as f64).ln().powi(2 * t as i32)
}

/// Diagnostics over iterate histories (one per replicate, each `x(0..=T)`), with optional
/// leave-one-out histories aligned with them. A row is flagged when its ratio exceeds
/// `bound(t)`.
pub fn delocalization_report(
    histories: &[Vec<Array1<f64>>],
    loo: Option<&[Vec<Array1<f64>>]>,
    bound: &dyn Fn(usize, usize) -> f64,
) -> DelocalizationTable {
    let horizon = histories.iter().map(|h| h.len()).min().unwrap_or(1).saturating_sub(1);
    let rows = (1..=horizon)
        .map(|t| {
            let n = histories[0][t].len();
            let linf = histories.iter().map(|h| h[t].iter().fold(0.0, |a: f64, v| a.max(v.abs()))).fold(0.0, f64::max);
            let rms = histories.iter().map(|h| (h[t].dot(&h[t]) / n as f64).sqrt()).sum::<f64>() / histories.len() as f64;
            let ratio = histories.iter().map(|h| delocalization_ratio(&h[t])).fold(0.0, f64::max);
            let loo_gap = loo.map(|l| {
                histories.iter().zip(l).map(|(h, g)| {
                    let d = &h[t] - &g[t];
                    (d.dot(&d) / n as f64).sqrt()
                }).sum::<f64>()
                    / histories.len() as f64
            });
            let b = bound(n, t);
            DelocalizationRow { t, linf, rms, ratio, bound: b, loo_gap, flagged: ratio > b }
        })
        .collect();
    DelocalizationTable { rows, replicates: histories.len() }
}

/// Delocalization of a symmetric program over replicates; `cfg.tolerance` replaces the
/// poly-log bound when given.
pub fn delocalization(cfg: &ExperimentConfig) -> Result<DelocalizationTable> {
    cfg.validate()?;
    let runner = build_runner(cfg)?;
    let prog = match &runner {
        Runner::Gfom(p) => p.clone(),
        Runner::Amp { fns, onsager, z0, .. } => crate::state_evolution::amp_as_gfom("tanh_amp", fns, onsager, z0.clone())?,
        Runner::Asymmetric(_) => return Err(Error::Config("delocalization needs a symmetric program".into())),
    };
    let (_, n) = cfg.dims();
    let pairs = (0..cfg.replicates())
        .into_par_iter()
        .map(|r| {
            let a = sample(&cfg.ensemble, n, n, derive(cfg.seed, "replicate", r as u64))?;
            let full = run_symmetric(&a, &prog)?;
            let loo = run_leave_k_out(&a, &prog, &[0])?;
            let h = |tr: &Trajectory| (0..=tr.horizon()).map(|t| tr.z(t).clone()).collect::<Vec<_>>();
            Ok((h(&full), h(&loo)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hs, ls): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let tol = cfg.tolerance;
    Ok(delocalization_report(&hs, Some(&ls), &|n, t| tol.unwrap_or_else(|| delocalization_bound(n, t))))
}

/// [`universality_averaged`] at each `n` in `cfg.sweep_n`.
pub fn universality_sweep(cfg: &ExperimentConfig) -> Result<Vec<(usize, ComparisonReport)>> {
    cfg.validate()?;
    cfg.sweep_n
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.n = n as i64;
            if !c.ensemble.symmetric {
                let ratio = cfg.m.unwrap_or(cfg.n) as f64 / cfg.n as f64;
                c.m = Some(((n as f64) * ratio).round().max(1.0) as i64);
            }
            c.seed = derive(cfg.seed, "sweep", n as u64);
            let runner = build_runner(&c)?;
            Ok((n, universality_averaged_with(&c, &runner)?))
        })
        .collect()
}

/// Output of any experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum ExperimentOutput {
    Comparison(ComparisonReport),
    Sweep(Vec<(usize, ComparisonReport)>),
    Decay(DecayTable),
    Delocalization(DelocalizationTable),
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        match self {
            ExperimentOutput::Comparison(r) => r.passed(),
            ExperimentOutput::Sweep(v) => v.iter().all(|(_, r)| r.passed()),
            ExperimentOutput::Decay(d) => d.passed(),
            ExperimentOutput::Delocalization(d) => d.passed(),
        }
    }

    /// `(series, x, y, y_err)` rows: gaps against `t` (or `n` for sweeps at the last
    /// step), decay norms and delocalization ratios against `t`.
    pub fn plot_points(&self) -> Vec<PlotPoint> {
        let gap = |s: &Statistic, x: f64, series: String| PlotPoint { series, x, y: s.gap, y_err: s.combined_se };
        match self {
            ExperimentOutput::Comparison(r) => r
                .statistics
                .iter()
                .map(|s| {
                    let series = match s.coordinate {
                        Some(k) if !s.name.contains(&format!("[{k}]")) => format!("{}[{k}]", s.name),
                        _ => s.name.clone(),
                    };
                    gap(s, s.t as f64, series)
                })
                .collect(),
            ExperimentOutput::Sweep(v) => {
                let mut pts = Vec::new();
                if let Some((_, first)) = v.first() {
                    let last_t = first.statistics.iter().map(|s| s.t).max().unwrap_or(0);
                    for psi in first.statistics.iter().filter(|s| s.t == last_t).map(|s| s.psi.clone()) {
                        for (n, r) in v {
                            if let Some(s) = r.statistics.iter().find(|s| s.t == last_t && s.psi == psi) {
                                pts.push(gap(s, *n as f64, psi.clone()));
                            }
                        }
                    }
                }
                pts
            }
            ExperimentOutput::Decay(d) => d
                .rows
                .iter()
                .map(|r| PlotPoint { series: "l2_over_sqrt_n".into(), x: r.t as f64, y: r.l2_over_sqrt_n, y_err: 0.0 })
                .collect(),
            ExperimentOutput::Delocalization(d) => d
                .rows
                .iter()
                .map(|r| PlotPoint { series: "ratio".into(), x: r.t as f64, y: r.ratio, y_err: 0.0 })
                .collect(),
        }
    }
}

/// Runs the experiment named in `cfg`.
pub fn dispatch(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    Ok(match cfg.experiment.as_str() {
        "universality_averaged" => ExperimentOutput::Comparison(universality_averaged(cfg)?),
        "universality_entrywise" => ExperimentOutput::Comparison(universality_entrywise(cfg)?),
        "universality_sweep" => ExperimentOutput::Sweep(universality_sweep(cfg)?),
        "se_vs_simulation" => ExperimentOutput::Comparison(se_vs_simulation(cfg)?),
        "gd_gaussianity" => ExperimentOutput::Comparison(gd_gaussianity_test(cfg)?),
        "convergence_decay" => ExperimentOutput::Decay(convergence_decay(cfg)?),
        "delocalization" => ExperimentOutput::Delocalization(delocalization(cfg)?),
        other => return Err(Error::Config(format!("unknown experiment '{other}'"))),
    })
}

/// Identity-row power iteration with `G_t = 0`, for callers that need a custom `z0`.
pub fn identity_rows(horizon: usize) -> Vec<Row> {
    (1..=horizon).map(|t| Pointwise::new(t, t - 1, Arc::new(Identity)).boxed()).collect()
}
