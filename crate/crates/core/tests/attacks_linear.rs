//! On a two-class linear model the worst-case cross-entropy inside an ℓp
//! ball has a closed form: the margin `z_o − z_y` moves by at most
//! `eps·‖w_o − w_y‖_*` in the dual norm, and CE is `softplus` of the margin.

use ramp_core::attacks::{attack, input_gradient, select_worst};
use ramp_core::model::{Activation, Dense};
use ramp_core::{AttackKind, AttackNorm, AttackSpec, Bounds, Mlp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_model(rng: &mut ChaCha8Rng, d: usize) -> Mlp {
    let w: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    Mlp::from_layers(vec![Dense {
        name: "fc1".into(),
        weight: Tensor::matrix(d, 2, w).unwrap(),
        bias: Tensor::vector(b),
        activation: Activation::Identity,
    }])
    .unwrap()
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn dual_norm(v: &[f64], norm: AttackNorm) -> f64 {
    match norm {
        AttackNorm::Linf => v.iter().map(|x| x.abs()).sum(),
        AttackNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        AttackNorm::L1 => v.iter().fold(0.0, |m, x| m.max(x.abs())),
    }
}

fn analytic_worst(m: &Mlp, x: &Tensor, y: &[usize], norm: AttackNorm, eps: f64) -> Vec<f64> {
    let w = &m.layers()[0].weight;
    let logits = m.forward(x).unwrap();
    (0..x.rows())
        .map(|i| {
            let (yi, o) = (y[i], 1 - y[i]);
            let dw: Vec<f64> = (0..w.rows()).map(|r| w.row(r)[o] - w.row(r)[yi]).collect();
            let margin = logits.row(i)[o] - logits.row(i)[yi];
            softplus(margin + eps * dual_norm(&dw, norm))
        })
        .collect()
}

fn check(kind: AttackKind, norm: AttackNorm, steps: usize, step: Option<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(norm as u64 * 7 + kind as u64);
    for trial in 0..10 {
        let d = rng.random_range(2..8);
        let m = linear_model(&mut rng, d);
        let x = Tensor::matrix(8, d, (0..8 * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..2)).collect();
        let eps = rng.random_range(0.05..0.5);
        let mut spec = AttackSpec::new(norm, eps, steps, kind).with_seed(trial);
        if let Some(s) = step {
            spec = spec.with_step_size(s * eps);
        }
        let adv = attack(&m, &x, &y, &spec, Bounds::UNBOUNDED).unwrap();
        for (got, want) in adv.per_sample_loss.iter().zip(analytic_worst(&m, &x, &y, norm, eps)) {
            assert!(
                (got - want).abs() <= 1e-6 * want,
                "{kind:?} {norm}: got {got}, analytic {want}"
            );
        }
    }
}

#[test]
fn pgd_reaches_linf_optimum() {
    check(AttackKind::Pgd, AttackNorm::Linf, 10, Some(2.0));
}

#[test]
fn pgd_reaches_l2_optimum() {
    check(AttackKind::Pgd, AttackNorm::L2, 100, Some(1.0));
}

#[test]
fn apgd_lite_reaches_linf_optimum() {
    check(AttackKind::ApgdLite, AttackNorm::Linf, 10, None);
}

#[test]
fn apgd_lite_reaches_l2_optimum() {
    check(AttackKind::ApgdLite, AttackNorm::L2, 100, None);
}

#[test]
fn l1_steepest_step_reaches_vertex() {
    check(AttackKind::Pgd, AttackNorm::L1, 10, Some(2.0));
}

#[test]
fn attack_never_lowers_loss_below_clean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Mlp::init(&[4, 8, 3], 1).unwrap();
    let x = Tensor::matrix(16, 4, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let y: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let (clean, _, _) = input_gradient(&m, &x, &y).unwrap();
    for norm in AttackNorm::ALL {
        let adv = attack(
            &m,
            &x,
            &y,
            &AttackSpec::new(norm, 0.1, 5, AttackKind::ApgdLite),
            Bounds::UNIT,
        )
        .unwrap();
        let total: f64 = adv.per_sample_loss.iter().sum();
        assert!(total >= clean.iter().sum::<f64>() - 1e-12);
    }
}

#[test]
fn select_worst_prefers_first_on_ties() {
    let m = Mlp::init(&[2, 2], 0).unwrap();
    let x = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let spec = AttackSpec::new(AttackNorm::Linf, 0.1, 0, AttackKind::Pgd);
    let a = attack(&m, &x, &[0, 1], &spec, Bounds::UNIT).unwrap();
    let (_, which) = select_worst(&[&a, &a.clone()]).unwrap();
    assert_eq!(which, vec![0, 0]);
}
