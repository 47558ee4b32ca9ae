use ndarray::Array1;

use gfom_lab::ensembles::{EnsembleSpec, EntryLaw, Normalization, ProfileSpec};
use gfom_lab::erm::loss::Loss;
use gfom_lab::erm::prox::ProxSpec;
use gfom_lab::gd_se::{gd_se, gd_se_homogeneous, GdSeInput};
use gfom_lab::harness::{
    build_runner, convergence_decay, convergence_decay_report, delocalization, erm_problem, gd_gaussianity_test,
    regression_data, se_vs_simulation, se_vs_simulation_with, universality_averaged, universality_averaged_with,
    universality_entrywise, universality_sweep, ExperimentConfig, InitSpec, ProgramConfig, Psi, Runner,
};
use gfom_lab::programs::{zero, SymmetricProgram};
use gfom_lab::state_evolution::SeOptions;
use gfom_lab::Error;

fn gd_cfg(n: usize, m: usize, horizon: usize, replicates: i64, seed: u64) -> ExperimentConfig {
    let mut p = ProgramConfig::new("gd_ridge");
    p.eta = Some(0.2);
    p.lambda = 0.1;
    p.init = InitSpec::Gaussian { scale: 1.0 };
    let mut c = ExperimentConfig::new("gd_gaussianity", p, n, horizon);
    c.m = Some(m as i64);
    c.ensemble = EnsembleSpec::asymmetric(EntryLaw::Gaussian, Normalization::InvSqrtM)
        .with_profile(ProfileSpec::Constant { value: m as f64 / n as f64 });
    c.replicates = replicates;
    c.coordinates = vec![0, 1, 2];
    c.mc_samples = 128;
    c.seed = seed;
    c
}

#[test]
fn power_iteration_first_step_matches_prediction() {
    let mut p = ProgramConfig::new("power_iteration");
    p.init = InitSpec::Gaussian { scale: 1.0 };
    let mut c = ExperimentConfig::new("se_vs_simulation", p, 1000, 1);
    c.replicates = 20;
    c.seed = 3;
    let r = se_vs_simulation(&c).unwrap();
    assert!(r.passed(), "{:?}", r.statistics);
}

#[test]
fn zero_program_has_no_gap() {
    let n = 60;
    let prog = SymmetricProgram {
        name: "zero".into(),
        f: (1..=3).map(zero).collect(),
        g: (1..=3).map(zero).collect(),
        z0: Array1::ones(n),
    };
    let mut c = ExperimentConfig::new("universality_averaged", ProgramConfig::new("power_iteration"), n, 3);
    c.law_b = Some(EntryLaw::Rademacher);
    c.replicates = 5;
    c.psi = vec![Psi::Square, Psi::Abs];
    let runner = Runner::Gfom(prog);
    let r = universality_averaged_with(&c, &runner).unwrap();
    assert_eq!(r.statistics.len(), 6);
    for s in &r.statistics {
        assert_eq!(s.gap, 0.0);
        assert_eq!(s.estimate_a, 0.0);
        assert!(s.pass);
    }
    let profile = c.ensemble.second_moments(n, n).unwrap();
    let se = runner.state_evolution(&profile, &SeOptions::default().with_samples(128)).unwrap();
    let r = se_vs_simulation_with(&c, &runner, &se).unwrap();
    assert!(r.statistics.iter().all(|s| s.gap == 0.0 && s.pass));
}

#[test]
fn gd_first_step_law() {
    let (n, m) = (400, 800);
    let c = gd_cfg(n, m, 1, 1000, 5);
    let r = gd_gaussianity_test(&c).unwrap();
    let d = regression_data(&c).unwrap();
    let (eta, phi) = (0.2, m as f64 / n as f64);
    let s2 = eta * eta * phi * (d.xi.dot(&d.xi) / m as f64 + d.mu0.dot(&d.mu0) / n as f64);
    for &l in &c.coordinates {
        let mean = r.find(&format!("mean[{l}]"), 1).unwrap();
        assert!((mean.estimate_b - (eta * phi - 1.0) * d.mu0[l]).abs() < 1e-12);
        assert!(mean.gap.abs() <= 4.0 * mean.combined_se, "{mean:?}");
        let var = r.find(&format!("variance[{l}]"), 1).unwrap();
        assert!((var.estimate_b - s2).abs() < 1e-10);
        assert!((var.estimate_a / s2 - 1.0).abs() <= 0.15, "{var:?}");
    }
}

#[test]
fn same_law_null_passes_at_nominal_rate() {
    let mut passes = 0;
    for trial in 0..40 {
        let mut c = ExperimentConfig::new("universality_averaged", ProgramConfig::new("tanh_gfom"), 150, 2);
        c.replicates = 20;
        c.seed = 1000 + trial;
        let r = universality_averaged(&c).unwrap();
        if r.passed() {
            passes += 1;
        }
    }
    assert!(passes >= 38, "{passes} of 40");
}

#[test]
fn standard_error_shrinks_like_root_r() {
    let mut p = ProgramConfig::new("power_iteration");
    p.init = InitSpec::Gaussian { scale: 1.0 };
    let mut c = ExperimentConfig::new("universality_averaged", p, 30, 1);
    c.law_b = Some(EntryLaw::Rademacher);
    c.seed = 8;
    c.replicates = 1500;
    let small = universality_averaged(&c).unwrap().statistics[0].combined_se;
    c.replicates = 3000;
    let large = universality_averaged(&c).unwrap().statistics[0].combined_se;
    let ratio = small / large;
    assert!((1.3..=1.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn entrywise_reports_each_coordinate() {
    let mut c = ExperimentConfig::new("universality_entrywise", ProgramConfig::new("tanh_gfom"), 100, 2);
    c.law_b = Some(EntryLaw::UniformPm);
    c.replicates = 200;
    c.coordinates = vec![0, 7, 42];
    c.psi = vec![Psi::Identity, Psi::Square];
    let r = universality_entrywise(&c).unwrap();
    assert_eq!(r.statistics.len(), 2 * 3 * 2);
    assert!(r.passed(), "{:?}", r.statistics.iter().filter(|s| !s.pass).collect::<Vec<_>>());
}

#[test]
fn sweep_reports_every_dimension() {
    let mut c = ExperimentConfig::new("universality_sweep", ProgramConfig::new("tanh_gfom"), 100, 1);
    c.law_b = Some(EntryLaw::Rademacher);
    c.replicates = 10;
    c.sweep_n = vec![50, 100, 200, 400];
    c.psi = vec![Psi::Square, Psi::TanhMoment];
    let rows = universality_sweep(&c).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![50, 100, 200, 400]);
    for psi in ["square", "tanh_moment"] {
        assert_eq!(rows.iter().filter(|(_, r)| r.find(&format!("average[{psi}]"), 1).is_some()).count(), 4);
    }
}

fn decay_cfg(prox: ProxSpec) -> ExperimentConfig {
    let mut p = ProgramConfig::new("pgd_linear");
    p.prox = prox;
    p.init = InitSpec::Gaussian { scale: 1.0 };
    let mut c = ExperimentConfig::new("convergence_decay", p, 200, 30);
    c.m = Some(400);
    c.ensemble = EnsembleSpec::asymmetric(EntryLaw::Gaussian, Normalization::InvSqrtM);
    c
}

#[test]
fn decay_from_the_fixed_point_stays_there() {
    let c = decay_cfg(ProxSpec::Ridge { lambda: 1.0 });
    let problem = erm_problem(&c).unwrap();
    let cold = convergence_decay(&c).unwrap();
    assert!(cold.passed());
    let fp = gfom_lab::erm::solve_fixed_point(&problem, 1e-12, 100_000).unwrap();
    let warm = convergence_decay_report(&problem, 10, Some(&fp.mu), 1e-12, 100_000).unwrap();
    assert!(warm.rows.iter().all(|r| r.l2_over_sqrt_n <= 1e-10), "{:?}", warm.rows);
}

#[test]
fn lasso_with_large_penalty_is_zero() {
    let c = decay_cfg(ProxSpec::Lasso { lambda: 1e6 });
    let t = convergence_decay(&c).unwrap();
    assert!(t.converged);
    assert_eq!(t.sparsity, 1.0);
}

#[test]
fn tanh_amp_is_delocalized() {
    let mut c = ExperimentConfig::new("delocalization", ProgramConfig::new("tanh_amp"), 400, 3);
    c.replicates = 4;
    let t = delocalization(&c).unwrap();
    assert_eq!(t.rows.len(), 3);
    for r in &t.rows {
        assert!(r.ratio <= 20.0, "{r:?}");
        assert!(r.loo_gap.unwrap() < 1.0);
    }
    assert!(t.passed());
}

#[test]
fn homogeneous_and_general_gd_se_agree() {
    let (n, m, horizon) = (200, 400, 3);
    for seed in [1u64, 2, 3] {
        let c = gd_cfg(n, m, horizon, 2, seed);
        let d = regression_data(&c).unwrap();
        let loss = Loss::SmoothCos { a: 0.1 };
        let opts = SeOptions::default().with_samples(4096).with_seed(seed);
        let general = gd_se(
            &GdSeInput {
                loss: loss.clone(),
                eta: 0.2,
                lambda: 0.1,
                mu0: d.mu0.clone(),
                xi: d.xi.clone(),
                masks: None,
                profile: c.ensemble.second_moments(m, n).unwrap(),
                horizon,
            },
            &SeOptions::default().with_samples(256).with_seed(seed),
        )
        .unwrap();
        let homog = gd_se_homogeneous(&loss, 0.2, 0.1, d.mu0.dot(&d.mu0), n, &d.xi, horizon, &opts).unwrap();
        for t in 1..=horizon {
            for s in 1..=t {
                let g = general.g.get(t, s);
                let avg = g.iter().sum::<f64>() / n as f64;
                let se = homog.g_se[t][s].hypot(general.g_se[t][s]);
                let gap = (avg - homog.g[t][s]).abs();
                assert!(gap <= 4.0 * se + 1e-12, "seed {seed} t {t} s {s}: gap {gap:.3e}, se {se:.3e}");
            }
        }
    }
}

#[test]
fn gd_gaussianity_rejects_resampled_masks() {
    let mut c = gd_cfg(50, 100, 2, 10, 1);
    c.program.resample_masks = true;
    c.program.sample_fraction = Some(0.5);
    assert!(matches!(gd_gaussianity_test(&c), Err(Error::Config(_))));
    let mut c = gd_cfg(50, 100, 2, 10, 1);
    c.program.key = "tanh_amp".into();
    assert!(matches!(gd_gaussianity_test(&c), Err(Error::Config(_))));
}

#[test]
fn runner_kinds_follow_the_program() {
    let c = ExperimentConfig::new("universality_averaged", ProgramConfig::new("tanh_amp"), 50, 2);
    assert!(matches!(build_runner(&c).unwrap(), Runner::Amp { .. }));
    let c = gd_cfg(20, 30, 2, 2, 0);
    assert!(matches!(build_runner(&c).unwrap(), Runner::Asymmetric(_)));
}
