//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gfom_lab::cli_io::run_experiment;
use gfom_lab::dynamics::{embed_matrix, run_amp_asymmetric, run_amp_symmetric, run_asymmetric, run_symmetric, unembed};
use gfom_lab::ensembles::{sample, EnsembleSpec, EntryLaw, Normalization, ProfileSpec, VarianceProfile};
use gfom_lab::erm::logistic::sample_logistic_noise;
use gfom_lab::erm::loss::Loss;
use gfom_lab::erm::prox::ProxSpec;
use gfom_lab::erm::{logistic_objective_check, solve_fixed_point, ErmProblem, Response};
use gfom_lab::gd_se::{g_coefficient_d_recursion, g_coefficient_nested_sum, gd_key_params, gd_se, GdSeInput};
use gfom_lab::harness::{
    convergence_decay_report, gd_gaussianity_test, se_vs_simulation, universality_averaged, ExperimentConfig,
    InitSpec, ProgramConfig, Psi,
};
use gfom_lab::programs::{random_asymmetric, random_symmetric, symmetrize};
use gfom_lab::state_evolution::{gfom_to_amp_asymmetric, gfom_to_amp_symmetric, se_asymmetric, se_symmetric, SeOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

fn sup(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn gaussian_vec(len: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_shape_fn(len, |_| rng.sample(StandardNormal))
}

fn c1_correspondence() -> Outcome {
    let mut worst = 0.0f64;
    let opts = SeOptions::default().with_samples(2048).with_seed(1);
    for seed in 0..5u64 {
        let n = 50;
        let prog = random_symmetric(n, 4, 100 + seed);
        let spec = EnsembleSpec::symmetric(EntryLaw::Gaussian);
        let a = sample(&spec, n, n, 200 + seed).unwrap();
        let se = se_symmetric(&prog, &spec.second_moments(n, n).unwrap(), &opts).unwrap();
        let red = gfom_to_amp_symmetric(&se).unwrap();
        let gfom = run_symmetric(&a, &prog).unwrap();
        let amp = run_amp_symmetric(&a, &red.fns, &red.onsager, &prog.z0).unwrap();
        let z: Vec<_> = (0..=4).map(|t| amp.z(t).clone()).collect();
        for (t, x) in red.transform(&z).iter().enumerate() {
            worst = worst.max(sup(x, gfom.z(t)));
        }
        let (m, n) = (40, 50);
        let prog = random_asymmetric(m, n, 4, 300 + seed);
        let spec = EnsembleSpec::asymmetric(EntryLaw::Gaussian, Normalization::InvSqrtM);
        let a = sample(&spec, m, n, 400 + seed).unwrap();
        let se = se_asymmetric(&prog, &spec.second_moments(m, n).unwrap(), &opts).unwrap();
        let red = gfom_to_amp_asymmetric(&se).unwrap();
        let gfom = run_asymmetric(&a, &prog).unwrap();
        let amp = run_amp_asymmetric(&a, &red.f_fns, &red.g_fns, &red.b_f, &red.b_g, &prog.u0, &prog.v0).unwrap();
        let u: Vec<_> = (0..=4).map(|t| amp.u(t).clone()).collect();
        let v: Vec<_> = (0..=4).map(|t| amp.v(t).clone()).collect();
        let (pu, pv) = red.transform(&u, &v);
        for t in 0..=4 {
            worst = worst.max(sup(&pu[t], gfom.u(t))).max(sup(&pv[t], gfom.v(t)));
        }
    }
    Outcome { pass: worst <= 1e-8, detail: format!("max sup-norm error {worst:.2e} <= 1e-8 over 5 symmetric + 5 asymmetric programs") }
}

fn c2_embedding() -> Outcome {
    let (m, n) = (40, 40);
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let prog = random_asymmetric(m, n, 4, 500 + seed);
        let spec = EnsembleSpec::asymmetric(EntryLaw::Rademacher, Normalization::InvSqrtMPlusN);
        let a = sample(&spec, m, n, 600 + seed).unwrap();
        let direct = run_asymmetric(&a, &prog).unwrap();
        let embedded = run_symmetric(&embed_matrix(&a), &symmetrize(&prog, m, n).unwrap()).unwrap();
        let (u, v) = unembed(&embedded, m);
        for t in 0..=4 {
            worst = worst.max(sup(&u[t], direct.u(t))).max(sup(&v[t], direct.v(t)));
        }
    }
    Outcome { pass: worst <= 1e-12, detail: format!("max sup-norm error {worst:.2e} <= 1e-12 over 5 programs") }
}

fn c3_gd_first_step() -> Outcome {
    let (m, n) = (300, 200);
    let (eta, phi) = (0.3, m as f64 / n as f64);
    let input = GdSeInput {
        loss: Loss::Squared,
        eta,
        lambda: 0.0,
        mu0: gaussian_vec(n, 1),
        xi: gaussian_vec(m, 2),
        masks: None,
        profile: VarianceProfile::constant(m, n, 1.0 / n as f64),
        horizon: 1,
    };
    let st = gd_se(&input, &SeOptions::default().with_samples(256)).unwrap();
    let law = gd_key_params(&st, 1).unwrap();
    let s2 = eta * eta * phi * (input.xi.dot(&input.xi) / m as f64 + input.mu0.dot(&input.mu0) / n as f64);
    let b_err = law.b.iter().map(|b| (b - (eta * phi - 1.0)).abs()).fold(0.0, f64::max);
    let s_err = law.sigma2.iter().map(|s| (s - s2).abs()).fold(0.0, f64::max);
    Outcome {
        pass: b_err <= 4.0 * f64::EPSILON && s_err <= 1e-10,
        detail: format!("|b - (eta phi - 1)| = {b_err:.1e} (rounding only), |sigma2 - closed form| = {s_err:.1e} <= 1e-10"),
    }
}

fn c4_duality() -> Outcome {
    let (m, n) = (60, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = GdSeInput {
        loss: Loss::SmoothCos { a: 0.1 },
        eta: 0.3,
        lambda: 0.05,
        mu0: gaussian_vec(n, 3),
        xi: gaussian_vec(m, 4),
        masks: Some((0..4).map(|_| (0..m).map(|_| rng.gen::<f64>() < 0.8).collect()).collect()),
        profile: ProfileSpec::RowLinear.materialize(m, n).unwrap().scaled(1.0 / n as f64),
        horizon: 4,
    };
    let st = gd_se(&input, &SeOptions::default().with_samples(512).with_seed(2)).unwrap();
    let mut worst = 0.0f64;
    for t in 1..=4 {
        for s in 1..=t {
            let a = g_coefficient_d_recursion(&st, s, t).unwrap();
            let b = g_coefficient_nested_sum(&st, s, t).unwrap();
            for l in 0..n {
                worst = worst.max((a[l] - b[l]).abs());
            }
        }
    }
    Outcome { pass: worst <= 1e-10, detail: format!("max |g(D recursion) - g(nested sum)| = {worst:.2e} <= 1e-10, t <= 4") }
}

fn gd_config() -> ExperimentConfig {
    let (m, n) = (800, 400);
    let mut p = ProgramConfig::new("gd_ridge");
    p.eta = Some(0.2);
    p.lambda = 0.1;
    p.init = InitSpec::Gaussian { scale: 1.0 };
    let mut c = ExperimentConfig::new("gd_gaussianity", p, n, 3);
    c.m = Some(m as i64);
    c.ensemble = EnsembleSpec::asymmetric(EntryLaw::Gaussian, Normalization::InvSqrtM)
        .with_profile(ProfileSpec::Constant { value: m as f64 / n as f64 });
    c.replicates = 1000;
    c.coordinates = vec![0, 1, 2, 3, 4];
    c.mc_samples = 256;
    c.seed = 11;
    c
}

fn c5_gd_gaussianity() -> Outcome {
    let r = gd_gaussianity_test(&gd_config()).unwrap();
    let ks: Vec<f64> = r.statistics.iter().filter(|s| s.name.starts_with("ks")).map(|s| s.estimate_a).collect();
    let ks_ok = ks.len() == 5 && ks.iter().all(|k| *k <= 0.06);
    let means_ok = r.statistics.iter().filter(|s| s.name.starts_with("mean")).all(|s| s.gap.abs() <= 4.0 * s.combined_se);
    let worst_mean = r
        .statistics
        .iter()
        .filter(|s| s.name.starts_with("mean"))
        .map(|s| s.gap.abs() / s.combined_se)
        .fold(0.0, f64::max);
    Outcome {
        pass: ks_ok && means_ok && r.divergent_a == 0,
        detail: format!(
            "KS = [{}] <= 0.06; worst mean gap {worst_mean:.2} SE <= 4",
            ks.iter().map(|k| format!("{k:.3}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn c6_universality() -> Outcome {
    let mut c = ExperimentConfig::new("universality_averaged", ProgramConfig::new("tanh_amp"), 1000, 3);
    c.law_b = Some(EntryLaw::Rademacher);
    c.replicates = 50;
    c.psi = vec![Psi::Square];
    c.tolerance = Some(0.05);
    c.seed = 21;
    let r = universality_averaged(&c).unwrap();
    let s = r.find("average[square]", 3).unwrap();
    let pass = s.pass && s.gap.abs() <= 4.0 * s.combined_se;
    Outcome { pass, detail: format!("gap {:.2e} (|gap| <= 0.05, combined SE {:.2e}, limit 4 SE)", s.gap, s.combined_se) }
}

fn c7_se_vs_simulation() -> Outcome {
    let mut p = ProgramConfig::new("power_iteration");
    p.init = InitSpec::Gaussian { scale: 1.0 };
    let mut c = ExperimentConfig::new("se_vs_simulation", p, 2000, 1);
    c.replicates = 20;
    c.seed = 31;
    let r1 = se_vs_simulation(&c).unwrap();
    let s1 = r1.find("se[z][square]", 1).unwrap().clone();
    // Independent oracle for the prediction: ||z0||^2 / n.
    let z0 = InitSpec::Gaussian { scale: 1.0 }.materialize(2000, c.seed, "z0");
    let oracle = z0.dot(&z0) / 2000.0;
    let oracle_ok = (s1.estimate_a - oracle).abs() <= 4.0 * s1.se_a;
    let mut c = ExperimentConfig::new("se_vs_simulation", ProgramConfig::new("tanh_amp"), 2000, 4);
    c.replicates = 10;
    c.tolerance = Some(0.03);
    c.seed = 32;
    let r2 = se_vs_simulation(&c).unwrap();
    let s2 = r2.find("se[z][square]", 4).unwrap();
    Outcome {
        pass: s1.pass && oracle_ok && s2.pass,
        detail: format!(
            "power iteration t=1: sim {:.4} vs ||z0||^2/n {oracle:.4} ({:.2} SE); tanh-AMP t=4 gap {:.2e} <= 0.03",
            s1.estimate_a,
            (s1.estimate_a - oracle).abs() / s1.se_a,
            s2.gap
        ),
    }
}

fn c8_erm() -> Outcome {
    // Ridge fixed point against a direct solve.
    let (m, n) = (80, 50);
    let spec = EnsembleSpec::asymmetric(EntryLaw::Gaussian, Normalization::InvSqrtM);
    let a = sample(&spec, m, n, 41).unwrap();
    let y = gaussian_vec(m, 42);
    let lambda = 0.5;
    let eta = gfom_lab::erm::default_eta(&a);
    let prob = ErmProblem::linear(a.clone(), Response::Explicit(y.clone()), Loss::Squared, ProxSpec::Ridge { lambda }, eta);
    let fp = solve_fixed_point(&prob, 1e-13, 100_000).unwrap();
    let an = nalgebra::DMatrix::from_fn(m, n, |i, j| a[[i, j]]);
    let yn = nalgebra::DVector::from_fn(m, |i, _| y[i]);
    let lhs = an.transpose() * &an + nalgebra::DMatrix::identity(n, n) * lambda;
    let direct = lhs.lu().solve(&(an.transpose() * yn)).unwrap();
    let ridge_err = (0..n).map(|j| (fp.mu[j] - direct[j]).abs()).fold(0.0, f64::max);
    // Logistic gradient in label form and latent form.
    let (m, n) = (100, 100);
    let a = sample(&spec, m, n, 43).unwrap();
    let mu0 = gaussian_vec(n, 44);
    let xi = Array1::from(sample_logistic_noise(m, 45));
    let mu = gaussian_vec(n, 46) * 0.3;
    let (g1, g2) = logistic_objective_check(&a, &mu0, &xi, &ProxSpec::Ridge { lambda: 0.2 }, &mu);
    let logit_err = sup(&g1, &g2);
    // Prox suite.
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let specs = [
        ProxSpec::Zero,
        ProxSpec::Ridge { lambda: 0.7 },
        ProxSpec::Lasso { lambda: 0.4 },
        ProxSpec::Quartic,
        ProxSpec::LogcoshRidge { a: 0.5 },
    ];
    let mut violations = 0;
    let mut probes = 0;
    for spec in &specs {
        for _ in 0..10_000 {
            let eta = rng.gen_range(0.01..3.0);
            let x: f64 = 4.0 * rng.sample::<f64, _>(StandardNormal);
            let y: f64 = 4.0 * rng.sample::<f64, _>(StandardNormal);
            let (px, py) = (spec.eval(eta, x).unwrap(), spec.eval(eta, y).unwrap());
            let bound = (x - y).abs() / (1.0 + eta * spec.strong_convexity());
            probes += 1;
            if (px - py).abs() > bound * (1.0 + 1e-9) + 1e-12 {
                violations += 1;
            }
        }
    }
    Outcome {
        pass: ridge_err <= 1e-8 && logit_err <= 1e-12 && violations == 0,
        detail: format!(
            "ridge vs direct {ridge_err:.1e} <= 1e-8; logistic gradients {logit_err:.1e} <= 1e-12; prox {violations}/{probes} violations"
        ),
    }
}

fn c9_decay() -> Outcome {
    let (m, n) = (1000, 500);
    let spec = EnsembleSpec::asymmetric(EntryLaw::Gaussian, Normalization::InvSqrtM);
    let a: Array2<f64> = sample(&spec, m, n, 51).unwrap();
    let mu0 = gaussian_vec(n, 52);
    let xi = gaussian_vec(m, 53);
    let eta = gfom_lab::erm::default_eta(&a);
    let prob = ErmProblem::linear(a, Response::Linear { mu0, xi }, Loss::Squared, ProxSpec::Ridge { lambda: 1.0 }, eta);
    let table = convergence_decay_report(&prob, 40, None, 1e-12, 100_000).unwrap();
    match table.fit {
        Some(f) => Outcome {
            pass: table.converged && f.slope < 0.0 && f.r2 >= 0.95,
            detail: format!("slope {:.4} < 0, R^2 {:.4} >= 0.95 over t in [1, 40]", f.slope, f.r2),
        },
        None => Outcome { pass: false, detail: "no fit".into() },
    }
}

fn c10_determinism() -> Outcome {
    let mut c = ExperimentConfig::new("se_vs_simulation", ProgramConfig::new("tanh_amp"), 400, 3);
    c.replicates = 8;
    c.seed = 61;
    let mut g = gd_config();
    g.replicates = 40;
    let mut identical = true;
    let mut compared = 0;
    for cfg in [c, g] {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (m1, _) = run_experiment(&cfg, d1.path(), false).unwrap();
        run_experiment(&cfg, d2.path(), false).unwrap();
        for f in m1.outputs.iter().filter(|f| f.ends_with(".csv")) {
            compared += 1;
            identical &= std::fs::read(d1.path().join(f)).unwrap() == std::fs::read(d2.path().join(f)).unwrap();
        }
    }
    Outcome { pass: identical && compared >= 4, detail: format!("{compared} CSV files byte-identical across reruns: {identical}") }
}

type Criterion = (&'static str, f64, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 GFOM-AMP correspondence", 30.0, c1_correspondence),
        ("2 asymmetric-to-symmetric embedding", 10.0, c2_embedding),
        ("3 GD state evolution, first step closed form", 5.0, c3_gd_first_step),
        ("4 g-coefficient duality", 60.0, c4_duality),
        ("5 entrywise Gaussianity of gradient descent", 300.0, c5_gd_gaussianity),
        ("6 averaged universality", 180.0, c6_universality),
        ("7 state evolution vs simulation", 240.0, c7_se_vs_simulation),
        ("8 ERM machinery", 30.0, c8_erm),
        ("9 convergence decay", 30.0, c9_decay),
        ("10 determinism", f64::INFINITY, c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, limit, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs <= limit;
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = if limit.is_finite() { format!(", limit {limit:.0} s") } else { String::new() };
        println!("[{}] criterion {name}: {} ({secs:.1} s{budget})", if pass { "PASS" } else { "FAIL" }, out.detail);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
