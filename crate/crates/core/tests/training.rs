use ramp_core::data::{make_synthetic, SyntheticKind, SyntheticSpec};
use ramp_core::evaluation::clean_accuracy;
use ramp_core::gp::{gp_layer, GpVariant};
use ramp_core::optim::SgdConfig;
use ramp_core::training::{
    at_epoch, at_gp_epoch, baseline_epoch, nt_epoch, ramp_finetune_epoch, ramp_full_epoch, run_plan, BaselineKind,
    EpochContext, GpOptimizers, RampConfig, RandMode,
};
use ramp_core::{
    AttackKind, AttackNorm, AttackSpec, Bounds, Dataset, GpConfig, KeyPair, Method, Mlp, PairingLossConfig, Sgd,
    TrainPlan,
};

fn blobs(n: usize, seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec {
        kind: SyntheticKind::Blobs,
        n,
        dim: 4,
        noise: 1.5,
        classes: 3,
        seed,
    })
    .unwrap()
}

fn specs() -> Vec<AttackSpec> {
    vec![
        AttackSpec::new(AttackNorm::L1, 0.3, 3, AttackKind::ApgdLite).with_seed(1),
        AttackSpec::new(AttackNorm::L2, 0.15, 3, AttackKind::ApgdLite).with_seed(2),
        AttackSpec::new(AttackNorm::Linf, 0.05, 3, AttackKind::ApgdLite).with_seed(3),
    ]
}

fn ctx(epoch: usize) -> EpochContext {
    EpochContext::new(epoch, 42, 16, Bounds::UNIT)
}

fn model() -> Mlp {
    Mlp::init(&[4, 12, 3], 9).unwrap()
}

fn sgd() -> Sgd {
    Sgd::new(SgdConfig::default()).unwrap()
}

fn gp_opts() -> GpOptimizers<f64> {
    GpOptimizers::new(SgdConfig::default()).unwrap()
}

const BETA0: GpConfig = GpConfig {
    beta: 0.0,
    variant: GpVariant::Cosine,
};

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let data = blobs(40, 0);
    let mut m = model();
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: 0.0,
        ..SgdConfig::default()
    })
    .unwrap();
    nt_epoch(&mut m, &data, &mut opt, &ctx(0)).unwrap();
    assert_eq!(m, model());
}

#[test]
fn nt_separates_blobs_within_twenty_epochs() {
    let data = make_synthetic(&SyntheticSpec {
        kind: SyntheticKind::Blobs,
        n: 200,
        dim: 2,
        noise: 0.5,
        classes: 2,
        seed: 3,
    })
    .unwrap();
    let mut m = Mlp::init(&[2, 16, 2], 0).unwrap();
    let mut opt = sgd();
    for e in 0..20 {
        nt_epoch(&mut m, &data, &mut opt, &ctx(e)).unwrap();
    }
    assert_eq!(clean_accuracy(&m, &data).unwrap(), 1.0);
}

#[test]
fn identity_attack_reduces_at_to_nt() {
    let data = blobs(48, 1);
    let spec = AttackSpec::new(AttackNorm::Linf, 0.05, 0, AttackKind::Pgd);
    let (mut a, mut b) = (model(), model());
    at_epoch(&mut a, &data, &spec, &mut sgd(), &ctx(0)).unwrap();
    nt_epoch(&mut b, &data, &mut sgd(), &ctx(0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn at_gp_with_zero_beta_is_at() {
    let data = blobs(48, 2);
    let spec = specs()[2];
    let (mut a, mut b) = (model(), model());
    let (mut opt, mut opts) = (sgd(), gp_opts());
    for e in 0..3 {
        at_epoch(&mut a, &data, &spec, &mut opt, &ctx(e)).unwrap();
        at_gp_epoch(&mut b, &data, &spec, &BETA0, &mut opts, &ctx(e)).unwrap();
        assert_eq!(a, b, "epoch {e}");
    }
}

#[test]
fn disabled_mechanisms_collapse_ramp_to_max() {
    let data = blobs(48, 3);
    let s = specs();
    let (q, r) = (s[2], s[0]);
    let zero = PairingLossConfig {
        lambda: 0.0,
        ..PairingLossConfig::default()
    };
    let two = PairingLossConfig::default();
    let (mut max, mut ramp, mut full, mut full_pair, mut ramp_pair) = (model(), model(), model(), model(), model());
    let (mut o1, mut o2, mut o5) = (sgd(), sgd(), sgd());
    let (mut g3, mut g4) = (gp_opts(), gp_opts());
    for e in 0..2 {
        baseline_epoch(&mut max, &data, &[q, r], BaselineKind::Max, &mut o1, &ctx(e)).unwrap();
        ramp_finetune_epoch(&mut ramp, &data, &q, &r, &zero, &mut o2, &ctx(e)).unwrap();
        ramp_full_epoch(&mut full, &data, &q, &r, &zero, &BETA0, &mut g3, &ctx(e)).unwrap();
        ramp_full_epoch(&mut full_pair, &data, &q, &r, &two, &BETA0, &mut g4, &ctx(e)).unwrap();
        ramp_finetune_epoch(&mut ramp_pair, &data, &q, &r, &two, &mut o5, &ctx(e)).unwrap();
    }
    assert_eq!(max, ramp);
    assert_eq!(max, full);
    assert_eq!(full_pair, ramp_pair);
    assert_ne!(ramp_pair, ramp);
}

#[test]
fn single_spec_baselines_are_at() {
    let data = blobs(48, 4);
    let spec = specs()[2];
    let mut at = model();
    at_epoch(&mut at, &data, &spec, &mut sgd(), &ctx(0)).unwrap();
    for kind in [BaselineKind::Max, BaselineKind::Avg, BaselineKind::Rand(RandMode::Sat)] {
        let mut m = model();
        baseline_epoch(&mut m, &data, &[spec], kind, &mut sgd(), &ctx(0)).unwrap();
        assert_eq!(m, at, "{kind:?}");
    }
}

#[test]
fn eat_mode_rejects_l2_only_lists() {
    let data = blobs(16, 5);
    let mut m = model();
    let only_l2 = [specs()[1]];
    assert!(baseline_epoch(
        &mut m,
        &data,
        &only_l2,
        BaselineKind::Rand(RandMode::Eat),
        &mut sgd(),
        &ctx(0)
    )
    .is_err());
}

#[test]
fn negative_cosine_layers_contribute_nothing() {
    for variant in [GpVariant::Cosine, GpVariant::ProjPlus] {
        let p = gp_layer(&[1.0, 2.0, -1.0], &[-1.0, -2.0, 0.5], variant);
        assert!(p.iter().all(|&v| v == 0.0));
        let p = gp_layer(&[1.0, 0.0], &[0.0, 1.0], variant);
        assert!(p.iter().all(|&v| v == 0.0));
    }
}

fn plan(method: Method) -> TrainPlan {
    TrainPlan {
        method,
        epochs: 3,
        nt_warmup_epochs: 1,
        batch_size: 16,
        specs: specs(),
        at_norm: AttackNorm::Linf,
        ramp: RampConfig {
            pairing: PairingLossConfig::default(),
            key_pair: KeyPair::new(AttackNorm::Linf, AttackNorm::L1).unwrap(),
        },
        gp: GpConfig::default(),
        rand_mode: RandMode::Sat,
        sgd: SgdConfig::default(),
        lr_drop_at: Some(0.875),
        lr_drop_factor: 0.1,
        bounds: Bounds::UNIT,
        seed: 7,
    }
}

#[test]
fn run_plan_is_deterministic_and_records_invariants() {
    let data = blobs(60, 6);
    let (train, probe_set) = data.split(0.25, 0).unwrap();
    let eval = specs();
    let probe = ramp_core::training::Probe {
        data: &probe_set,
        specs: &eval,
        batch_size: 32,
    };
    for method in [
        Method::At,
        Method::AtGp,
        Method::RampFull,
        Method::Max,
        Method::Avg,
        Method::Rand,
    ] {
        let p = plan(method);
        let (m1, r1) = run_plan(&p, model(), &train, Some(&probe), |_, _| Ok(())).unwrap();
        let (m2, r2) = run_plan(&p, model(), &train, Some(&probe), |_, _| Ok(())).unwrap();
        assert_eq!(m1, m2, "{method}");
        assert_eq!(r1.len(), 4);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.probe, b.probe);
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert!(a.train_loss.is_finite());
            assert!(a.probe.as_ref().unwrap().invariants_hold());
        }
        assert_eq!(r1[3].learning_rate, p.learning_rate(2));
    }
}

#[test]
fn empty_plan_returns_input() {
    let mut p = plan(Method::At);
    p.epochs = 0;
    p.nt_warmup_epochs = 0;
    let (m, recs) = run_plan(&p, model(), &blobs(20, 0), None, |_, _| Ok(())).unwrap();
    assert_eq!(m, model());
    assert!(recs.is_empty());
}

#[test]
fn plan_validation_catches_missing_specs() {
    let mut p = plan(Method::RampFull);
    p.specs.retain(|s| s.norm != AttackNorm::L1);
    assert!(p.validate().is_err());
    let mut p = plan(Method::AtGp);
    p.gp.beta = 1.5;
    assert!(p.validate().is_err());
}

#[test]
fn f32_training_smoke() {
    let data: ramp_core::data::Dataset<f32> = blobs(24, 7).cast();
    let mut m = ramp_core::model::Mlp::<f32>::init(&[4, 6, 3], 0).unwrap();
    let mut opt = ramp_core::optim::Sgd::<f32>::new(SgdConfig::default()).unwrap();
    let loss = at_epoch(&mut m, &data, &specs()[1], &mut opt, &ctx(0)).unwrap();
    assert!(loss.is_finite());
}
