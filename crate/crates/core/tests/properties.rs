use ndarray::Array1;
use proptest::prelude::*;

use gfom_lab::cli_io::{config_hash, fmt_f64, parse_config_str};
use gfom_lab::ensembles::{sample, EnsembleSpec, EntryLaw, Normalization};
use gfom_lab::erm::prox::ProxSpec;
use gfom_lab::harness::{delocalization_ratio, ks_statistic, ExperimentConfig, ProgramConfig, Statistic};
use gfom_lab::seed::derive;
use gfom_lab::state_evolution::Estimate;

fn prox_spec() -> impl Strategy<Value = ProxSpec> {
    prop_oneof![
        Just(ProxSpec::Zero),
        (0.0..5.0f64).prop_map(|lambda| ProxSpec::Ridge { lambda }),
        (0.0..5.0f64).prop_map(|lambda| ProxSpec::Lasso { lambda }),
        Just(ProxSpec::Quartic),
        (0.05..3.0f64).prop_map(|a| ProxSpec::LogcoshRidge { a }),
    ]
}

fn entry_law() -> impl Strategy<Value = EntryLaw> {
    prop_oneof![
        Just(EntryLaw::Gaussian),
        Just(EntryLaw::Rademacher),
        Just(EntryLaw::UniformPm),
        (0.05..0.95f64).prop_map(|p| EntryLaw::ShiftedBernoulli { p }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn prox_contracts(spec in prox_spec(), eta in 0.01..5.0f64, x in -50.0..50.0f64, y in -50.0..50.0f64) {
        let (px, py) = (spec.eval(eta, x).unwrap(), spec.eval(eta, y).unwrap());
        let bound = (x - y).abs() / (1.0 + eta * spec.strong_convexity());
        prop_assert!((px - py).abs() <= bound * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn prox_is_monotone(spec in prox_spec(), eta in 0.01..5.0f64, x in -50.0..50.0f64, d in 0.0..10.0f64) {
        prop_assert!(spec.eval(eta, x + d).unwrap() >= spec.eval(eta, x).unwrap() - 1e-12);
    }

    #[test]
    fn ks_lies_in_unit_interval(xs in prop::collection::vec(-10.0..10.0f64, 1..200)) {
        let d = ks_statistic(&xs, |x| 1.0 / (1.0 + (-x).exp()));
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn delocalization_ratio_is_bounded(xs in prop::collection::vec(-1e3..1e3f64, 1..300)) {
        let n = xs.len() as f64;
        let r = delocalization_ratio(&Array1::from(xs));
        prop_assert!(r >= 1.0 - 1e-12 && r <= n.sqrt() * (1.0 + 1e-12));
    }

    #[test]
    fn fmt_f64_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn statistic_gap_and_verdict(a in -10.0..10.0f64, sa in 0.0..1.0f64, b in -10.0..10.0f64, sb in 0.0..1.0f64,
                                 tol in prop::option::of(0.0..5.0f64)) {
        let s = Statistic::new("x", 1, None, "square", Estimate { mean: a, se: sa }, Estimate { mean: b, se: sb }, tol);
        prop_assert_eq!(s.gap, a - b);
        prop_assert!((s.combined_se - (sa * sa + sb * sb).sqrt()).abs() <= 1e-12);
        prop_assert_eq!(s.tolerance, tol.unwrap_or(4.0 * s.combined_se));
        prop_assert_eq!(s.pass, s.gap.abs() <= s.tolerance);
    }

    #[test]
    fn seeds_separate_labels(seed in any::<u64>(), i in 0..1000u64) {
        prop_assert_ne!(derive(seed, "replicate", i), derive(seed, "pair", i));
        prop_assert_ne!(derive(seed, "replicate", i), derive(seed, "replicate", i + 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn symmetric_samples_are_symmetric_and_reproducible(law in entry_law(), n in 1usize..40, seed in any::<u64>()) {
        let spec = EnsembleSpec::symmetric(law);
        let a = sample(&spec, n, n, seed).unwrap();
        prop_assert_eq!(&a, &a.t().to_owned());
        prop_assert_eq!(&a, &sample(&spec, n, n, seed).unwrap());
    }

    #[test]
    fn asymmetric_samples_are_reproducible(law in entry_law(), m in 1usize..30, n in 1usize..30, seed in any::<u64>()) {
        let spec = EnsembleSpec::asymmetric(law, Normalization::InvSqrtM);
        let a = sample(&spec, m, n, seed).unwrap();
        prop_assert_eq!(a.dim(), (m, n));
        prop_assert!(a.iter().all(|v| v.is_finite()));
        prop_assert_eq!(&a, &sample(&spec, m, n, seed).unwrap());
    }

    #[test]
    fn config_hash_is_stable(n in 1usize..10_000, horizon in 1usize..20, seed in any::<u64>(), reps in 2i64..500) {
        let mut c = ExperimentConfig::new("universality_averaged", ProgramConfig::new("tanh_amp"), n, horizon);
        c.seed = seed;
        c.replicates = reps;
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back = parse_config_str(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(config_hash(&back), config_hash(&c));
        c.seed = seed.wrapping_add(1);
        prop_assert_ne!(config_hash(&back), config_hash(&c));
    }
}
