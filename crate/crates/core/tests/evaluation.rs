use proptest::prelude::*;
use ramp_core::data::{make_synthetic, SyntheticKind, SyntheticSpec};
use ramp_core::evaluation::{
    estimate_delta_terms, evaluate_robustness, monte_carlo_delta, predicted_delta_gp, DeltaEstimatorConfig,
    GaussianEnsemble, SampleFlags,
};
use ramp_core::{AttackKind, AttackNorm, AttackSpec, Bounds, GpVariant, Mlp, RobustReport};

fn eval_specs() -> Vec<AttackSpec> {
    vec![
        AttackSpec::new(AttackNorm::L1, 0.4, 5, AttackKind::ApgdLite),
        AttackSpec::new(AttackNorm::L2, 0.2, 5, AttackKind::ApgdLite),
        AttackSpec::new(AttackNorm::Linf, 0.08, 5, AttackKind::ApgdLite),
    ]
}

proptest! {
    #[test]
    fn report_invariants_hold_for_any_flags(raw in prop::collection::vec(any::<(bool, bool, bool, bool)>(), 1..64)) {
        let flags: Vec<SampleFlags> = raw
            .iter()
            .map(|&(clean, l1, l2, linf)| SampleFlags { clean, l1, l2, linf })
            .collect();
        let r = RobustReport::from_flags(flags).unwrap();
        prop_assert!(r.invariants_hold());
        prop_assert!(r.union_acc <= r.min_norm_acc() && r.min_norm_acc() <= r.clean_acc);
        let union = r.per_sample_flags.iter().filter(|f| f.union()).count() as f64 / r.n as f64;
        prop_assert_eq!(r.union_acc, union);
    }
}

#[test]
fn evaluation_on_trained_model_is_consistent() {
    let data = make_synthetic(&SyntheticSpec {
        kind: SyntheticKind::Moons,
        n: 80,
        dim: 2,
        noise: 0.1,
        classes: 2,
        seed: 0,
    })
    .unwrap();
    let m = Mlp::init(&[2, 8, 2], 0).unwrap();
    let a = evaluate_robustness(&m, &data, &eval_specs(), Bounds::UNIT, 32).unwrap();
    let b = evaluate_robustness(&m, &data, &eval_specs(), Bounds::UNIT, 32).unwrap();
    assert_eq!(a, b);
    assert!(a.invariants_hold());
    assert!(evaluate_robustness(&m, &data, &eval_specs()[..2], Bounds::UNIT, 32).is_err());
}

#[test]
fn full_minibatch_gives_zero_variance() {
    let data = make_synthetic(&SyntheticSpec {
        kind: SyntheticKind::Blobs,
        n: 40,
        dim: 3,
        noise: 1.0,
        classes: 2,
        seed: 1,
    })
    .unwrap();
    let snaps = vec![Mlp::init(&[3, 5, 2], 0).unwrap(), Mlp::init(&[3, 5, 2], 1).unwrap()];
    let cfg = DeltaEstimatorConfig {
        minibatch_size: 40,
        ..DeltaEstimatorConfig::default()
    };
    let r = estimate_delta_terms(&snaps, &data, &data, &eval_specs(), Bounds::UNIT, &cfg).unwrap();
    assert_eq!(r.variance, 0.0);
    assert!(r.bias > 0.0);
    assert!((0.0..=1.0).contains(&r.tau_bar_sq));
    assert!(estimate_delta_terms(&snaps[..1], &data, &data, &eval_specs(), Bounds::UNIT, &cfg).is_err());
}

#[test]
fn monte_carlo_at_matches_known_variance() {
    let mut ens = GaussianEnsemble::random(500, 1.0, 0.1, 0.05, 0.01, 3);
    let mc = monte_carlo_delta(&mut ens, 0.0, GpVariant::ProjPlus, 2000, 0).unwrap();
    assert!((mc.delta_sq / ens.known_variance() - 1.0).abs() < 0.02);
    assert_eq!(mc.delta_sq, mc.variance);
}

#[test]
fn lemma_tracks_monte_carlo_on_small_ensemble() {
    let m = 2000;
    let mut ens = GaussianEnsemble::random(m, 1.0, 0.05, 0.05, 0.005, 4);
    let mc = monte_carlo_delta(&mut ens, 0.5, GpVariant::ProjPlus, 2000, 1).unwrap();
    let lemma = predicted_delta_gp(mc.variance, mc.bias, mc.tau_bar_sq, 0.5, m);
    assert!(
        (lemma - mc.delta_sq).abs() / mc.delta_sq < 0.05,
        "lemma {lemma} vs {}",
        mc.delta_sq
    );
}
