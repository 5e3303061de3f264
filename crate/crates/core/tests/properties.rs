use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use linbpi::bpi::{beta_threshold, inverse_u, predicted_stop_time, u_of_design_discounted};
use linbpi::harness::gap_sweep;
use linbpi::mdp::{
    evaluate_policy, generate_instance, parse_instance, HorizonSpec, InstanceFile, InstanceSpec, LinearMdp, Policy,
};
use linbpi::oracles::{
    kl_bernoulli, kl_categorical, kl_pinsker_variant_check, log_bound_time, perturb_model, value_diff_checks, MdpPair,
};

fn instance(seed: u64, episodic: bool) -> LinearMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = InstanceSpec {
        dim: 3,
        n_states: 3,
        n_actions: 2,
        horizon: if episodic { HorizonSpec::Episodic(3) } else { HorizonSpec::Discounted(0.7) },
        min_gap: 0.0,
    };
    generate_instance(&spec, &mut rng).unwrap()
}

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimal_values_dominate_every_policy(seed in 0u64..10_000, episodic: bool, actions in prop::collection::vec(0usize..2, 9)) {
        let m = instance(seed, episodic);
        let sol = m.solve().unwrap();
        prop_assert!(sol.gap >= 0.0);
        let policy = match &m {
            LinearMdp::Discounted(_) => Policy::Stationary(actions[..3].to_vec()),
            LinearMdp::Episodic(_) => Policy::Episodic(actions.chunks(3).map(<[usize]>::to_vec).collect()),
        };
        let values = evaluate_policy(&m, &policy).unwrap();
        let cap = if episodic { 3.0 } else { 1.0 / 0.3 };
        for (h, (vs, opt)) in values.iter().zip(&sol.values).enumerate() {
            for (v, o) in vs.iter().zip(opt) {
                prop_assert!(*v <= o + 1e-8, "step {}: {} > {}", h, v, o);
                prop_assert!(*o >= -1e-12 && *o <= cap + 1e-9);
            }
        }
    }

    #[test]
    fn instance_files_round_trip(seed in 0u64..10_000, episodic: bool) {
        let m = instance(seed, episodic);
        let json = serde_json::to_string(&InstanceFile::from_mdp(&m)).unwrap();
        let back = parse_instance(&json).unwrap();
        prop_assert_eq!(InstanceFile::from_mdp(&back), InstanceFile::from_mdp(&m));
    }

    #[test]
    fn gap_sweep_scales_gap_exactly(seed in 0u64..10_000, episodic: bool, scale in 0.05f64..1.0) {
        let m = instance(seed, episodic);
        let g = m.solve().unwrap().gap;
        let p = &gap_sweep(&m, &[scale]).unwrap()[0];
        prop_assert!((p.gap - scale * g).abs() <= 1e-8);
    }

    #[test]
    fn value_difference_chains_hold(seed in 0u64..10_000, episodic: bool, eta in 0.01f64..1.0) {
        let m = instance(seed, episodic);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let alt = perturb_model(&m, eta, 100, &mut rng).unwrap();
        let pair = MdpPair::new(m.clone(), alt).unwrap();
        let policy = m.solve().unwrap().policy;
        let report = value_diff_checks(&pair, &policy).unwrap();
        prop_assert_eq!(report.violations(), 0);
    }
}

proptest! {
    #[test]
    fn beta_is_monotone(delta in 0.001f64..0.99, t in 1.0f64..1e7, d in 1usize..10) {
        let b = beta_threshold(delta, t, d);
        prop_assert!(beta_threshold(delta, t * 1.5, d) > b);
        prop_assert!(beta_threshold(delta / 2.0, t, d) > b);
        prop_assert!(beta_threshold(delta, t, d + 1) > b);
    }

    #[test]
    fn predicted_time_is_monotone(u in 1.0f64..1e4, delta in 0.001f64..0.5, d in 1usize..6, h in prop::option::of(1usize..5)) {
        let t = predicted_stop_time(u, delta, d, h);
        prop_assert!(predicted_stop_time(u * 2.0, delta, d, h) >= t);
        prop_assert!(predicted_stop_time(u, delta / 10.0, d, h) >= t);
    }

    #[test]
    fn inverse_u_inverts(sigma in 1.0f64..50.0, gamma in 0.0f64..0.95, gap in 0.0f64..2.0, eps in 0.01f64..1.0) {
        let u = u_of_design_discounted(sigma, gamma, gap, eps).unwrap();
        let inv = inverse_u(sigma, HorizonSpec::Discounted(gamma), gap, eps);
        prop_assert!((u * inv - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(a in 0.0f64..=1.0, b in 0.001f64..0.999, raw in prop::collection::vec(0.01f64..1.0, 2..10)) {
        prop_assert!(kl_bernoulli(a, b) >= 0.0);
        prop_assert_eq!(kl_bernoulli(b, b), 0.0);
        let p = simplex(raw);
        prop_assert!(kl_categorical(&p, &p).abs() < 1e-15);
    }

    #[test]
    fn kl_dominates_scaled_mean_gap(
        ra in prop::collection::vec(0.0f64..1.0, 6),
        rb in prop::collection::vec(0.01f64..1.0, 6),
        f in prop::collection::vec(0.0f64..5.0, 6),
    ) {
        prop_assume!(ra.iter().sum::<f64>() > 0.0);
        let (kl, bound) = kl_pinsker_variant_check(&simplex(ra), &simplex(rb), &f).unwrap();
        prop_assert!(kl >= bound - 1e-12, "{} < {}", kl, bound);
    }

    #[test]
    fn log_bound_time_suffices(a in 0.5f64..1e4, b in 0.0f64..1e4) {
        let t = log_bound_time(a, b);
        prop_assert!(t > a * t.ln() + b);
    }
}
