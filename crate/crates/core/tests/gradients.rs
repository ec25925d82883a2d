//! Reverse-mode gradients against central finite differences.

use ramp_core::autodiff::softmax_rows;
use ramp_core::losses::{
    correct_subset, cross_entropy, cross_entropy_graph, pairing_loss, pairing_loss_graph, CorrectIndexSet,
};
use ramp_core::{Graph, Mlp, PairingKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn param_count(m: &Mlp) -> usize {
    m.param_count()
}

/// Mutable access to flat parameter `k` in the same order as `ModelGrads::flatten`.
fn param_mut(m: &mut Mlp, mut k: usize) -> &mut f64 {
    for l in m.layers_mut() {
        let nw = l.weight.len();
        if k < nw {
            return &mut l.weight.data_mut()[k];
        }
        k -= nw;
        let nb = l.bias.len();
        if k < nb {
            return &mut l.bias.data_mut()[k];
        }
        k -= nb;
    }
    panic!("parameter index out of range")
}

fn central_difference(m: &Mlp, f: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    (0..param_count(m))
        .map(|k| {
            let mut plus = m.clone();
            *param_mut(&mut plus, k) += H;
            let mut minus = m.clone();
            *param_mut(&mut minus, k) -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

const TOL: f64 = 1e-5;

/// Relative to the larger of the FD peak and the smallest gradient a central
/// difference resolves to `TOL` at loss level `level`.
fn relative_error(auto: &[f64], fd: &[f64], level: f64) -> f64 {
    let floor = f64::EPSILON * level.abs().max(1.0) / H / TOL;
    let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max).max(floor);
    auto.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn ce_autodiff(m: &Mlp, x: &Tensor, y: &[usize]) -> Vec<f64> {
    let mut g = Graph::new();
    let p = m.register(&mut g, true);
    let xv = g.constant(x.clone());
    let logits = m.forward_graph(&mut g, &p, xv).unwrap();
    let (loss, _) = cross_entropy_graph(&mut g, logits, y).unwrap();
    g.backward(loss).unwrap();
    p.grads(&g, m).unwrap().flatten()
}

fn pairing_autodiff(
    m: &Mlp,
    xq: &Tensor,
    xr: &Tensor,
    gamma: &CorrectIndexSet,
    kind: PairingKind,
    detach: bool,
) -> Vec<f64> {
    let mut g = Graph::new();
    let p = m.register(&mut g, true);
    let vq = g.constant(xq.clone());
    let lq = m.forward_graph(&mut g, &p, vq).unwrap();
    let vr = g.constant(xr.clone());
    let lr = m.forward_graph(&mut g, &p, vr).unwrap();
    let loss = pairing_loss_graph(&mut g, lq, lr, gamma, kind, detach)
        .unwrap()
        .unwrap();
    g.backward(loss).unwrap();
    p.grads(&g, m).unwrap().flatten()
}

fn random_model(rng: &mut ChaCha8Rng) -> (Mlp, usize, usize) {
    let d = rng.random_range(2..5);
    let k = rng.random_range(2..4);
    let h = rng.random_range(3..6);
    (Mlp::init(&[d, h, k], rng.random()).unwrap(), d, k)
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, d, k) = random_model(&mut rng);
        let x = random_batch(&mut rng, 5, d);
        let y: Vec<usize> = (0..5).map(|_| rng.random_range(0..k)).collect();
        let ce = |mm: &Mlp| cross_entropy(&mm.forward(&x).unwrap(), &y).unwrap().0;
        let fd = central_difference(&m, ce);
        let err = relative_error(&ce_autodiff(&m, &x, &y), &fd, ce(&m));
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn pairing_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in [PairingKind::Kl, PairingKind::Mse, PairingKind::Cosine] {
        for detach in [true, false] {
            for _ in 0..20 {
                let (m, d, _) = random_model(&mut rng);
                let xq = random_batch(&mut rng, 6, d);
                let xr = random_batch(&mut rng, 6, d);
                let n = rng.random_range(1..=6);
                let gamma = CorrectIndexSet {
                    gamma: (0..n).collect(),
                    batch_size: 6,
                };
                let p_q_fixed = softmax_rows(&m.forward(&xq).unwrap());
                let fd = central_difference(&m, |mm| {
                    let p_r = softmax_rows(&mm.forward(&xr).unwrap());
                    let p_q = if detach {
                        p_q_fixed.clone()
                    } else {
                        softmax_rows(&mm.forward(&xq).unwrap())
                    };
                    pairing_loss(kind, &p_q, &p_r, &gamma).unwrap()
                });
                let level = pairing_loss(kind, &p_q_fixed, &softmax_rows(&m.forward(&xr).unwrap()), &gamma).unwrap();
                let err = relative_error(&pairing_autodiff(&m, &xq, &xr, &gamma, kind, detach), &fd, level);
                assert!(err < TOL, "{kind:?} detach={detach}: relative error {err}");
            }
        }
    }
}

#[test]
fn correct_subset_uses_q_predictions() {
    let p_q = Tensor::matrix(3, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4]).unwrap();
    let set = correct_subset(&p_q, &[0, 0, 0]).unwrap();
    assert_eq!(set.gamma, vec![0, 2]);
    assert_eq!(set.n_c(), 2);
}
