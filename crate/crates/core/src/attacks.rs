//! ℓp adversaries: PGD from a random start, APGD-lite (momentum plus a fixed
//! step-halving schedule with restarts from the best point), and per-sample
//! worst-case selection across several attacks.
//!
//! All attacks maximize the per-sample cross-entropy; the ascent direction
//! is the gradient of the summed loss, so every row sees its own gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{dim_err, Error, Result};
use crate::geometry::{lp_norm, AttackNorm, BallSpec, Bounds};
use crate::losses::cross_entropy_graph;
use crate::model::Mlp;
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    #[default]
    ApgdLite,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Pgd => "pgd",
            AttackKind::ApgdLite => "apgd_lite",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "pgd" => Ok(AttackKind::Pgd),
            "apgd_lite" | "apgd" => Ok(AttackKind::ApgdLite),
            other => Err(Error::InvalidArgument(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// Default fraction of coordinates moved by one ℓ1 step.
pub const DEFAULT_L1_SPARSITY: f64 = 0.05;

/// One ℓp adversary. `steps = 0` is the identity attack (returns the clean
/// batch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: AttackNorm,
    pub eps: f64,
    pub steps: usize,
    pub kind: AttackKind,
    /// PGD step size; `None` means `2·eps/steps`. APGD-lite ignores it.
    pub step_size: Option<f64>,
    pub l1_sparsity: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(norm: AttackNorm, eps: f64, steps: usize, kind: AttackKind) -> Self {
        Self {
            norm,
            eps,
            steps,
            kind,
            step_size: None,
            l1_sparsity: DEFAULT_L1_SPARSITY,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_step_size(mut self, step: f64) -> Self {
        self.step_size = Some(step);
        self
    }

    pub fn with_l1_sparsity(mut self, frac: f64) -> Self {
        self.l1_sparsity = frac;
        self
    }

    pub fn pgd_step_size(&self) -> f64 {
        self.step_size.unwrap_or(2.0 * self.eps / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attack eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.l1_sparsity > 0.0 && self.l1_sparsity <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "l1 sparsity must lie in (0, 1], got {}",
                self.l1_sparsity
            )));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("step size must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Adversarial examples with the logits and per-sample loss at each.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch<S> {
    pub x_adv: Tensor<S>,
    pub logits: Tensor<S>,
    pub per_sample_loss: Vec<S>,
}

/// Per-sample loss, logits, and input gradient of the summed cross-entropy.
pub fn input_gradient<S: Scalar>(
    model: &Mlp<S>,
    x: &Tensor<S>,
    labels: &[usize],
) -> Result<(Vec<S>, Tensor<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let params = model.register(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let logits = model.forward_graph(&mut g, &params, xv)?;
    let (_, per) = cross_entropy_graph(&mut g, logits, labels)?;
    let total = g.sum(per);
    let loss = g.value(per).data().to_vec();
    let logits_v = g.value(logits).clone();
    g.backward(total)?;
    let grad = g.grad(xv).expect("input requires grad").clone();
    Ok((loss, logits_v, grad))
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Ascent step of length `step` in the given norm.
///
/// L∞: `step·sign(g)`. L2: `step·g/‖g‖₂`. L1: the `⌈sparsity·d⌉` largest
/// |g| coordinates (lower index first on ties) move by `sign(g)`, rescaled
/// so the step has ℓ1 length `step`. A zero gradient gives a zero step.
pub fn steepest_step<S: Scalar>(grad: &[S], norm: AttackNorm, step: S, sparsity: f64) -> Vec<S> {
    match norm {
        AttackNorm::Linf => grad.iter().map(|&g| step * sign(g)).collect(),
        AttackNorm::L2 => {
            let n = lp_norm(grad, AttackNorm::L2);
            if n == S::zero() {
                return vec![S::zero(); grad.len()];
            }
            grad.iter().map(|&g| step * g / n).collect()
        }
        AttackNorm::L1 => {
            let d = grad.len();
            let k = ((sparsity * d as f64).ceil() as usize).clamp(1, d.max(1));
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| {
                grad[b]
                    .abs()
                    .partial_cmp(&grad[a].abs())
                    .expect("finite gradient")
                    .then(a.cmp(&b))
            });
            let chosen: Vec<usize> = idx[..k].iter().copied().filter(|&i| grad[i] != S::zero()).collect();
            let mut out = vec![S::zero(); d];
            if chosen.is_empty() {
                return out;
            }
            let each = step / S::of_usize(chosen.len());
            for i in chosen {
                out[i] = each * sign(grad[i]);
            }
            out
        }
    }
}

/// A point drawn uniformly from the ℓp ball of radius `eps` around the
/// origin in `d` dimensions.
pub fn sample_ball<S: Scalar>(norm: AttackNorm, d: usize, eps: f64, rng: &mut ChaCha8Rng) -> Vec<S> {
    match norm {
        AttackNorm::Linf => (0..d).map(|_| S::of(rng.random_range(-eps..=eps))).collect(),
        AttackNorm::L2 => {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let u: f64 = rng.random();
            let r = eps * u.powf(1.0 / d as f64);
            z.iter().map(|&v| S::of(r * v / n)).collect()
        }
        AttackNorm::L1 => {
            // Dirichlet(1,…,1) over d+1 parts; the dropped slack part makes
            // the signed result uniform in the solid ball.
            let e: Vec<f64> = (0..=d).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = e.iter().sum();
            e[..d]
                .iter()
                .map(|&w| {
                    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    S::of(s * eps * w / total)
                })
                .collect()
        }
    }
}

fn random_start<S: Scalar>(ball: &BallSpec<S>, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
    let c = &ball.center;
    let mut x = c.clone();
    for i in 0..c.rows() {
        let delta = sample_ball::<S>(ball.norm, c.cols(), ball.eps, rng);
        for (v, d) in x.row_mut(i).iter_mut().zip(delta) {
            *v += d;
        }
    }
    ball.project(&x)
}

struct Tracker<S> {
    x: Tensor<S>,
    logits: Tensor<S>,
    loss: Vec<S>,
    grad: Tensor<S>,
}

impl<S: Scalar> Tracker<S> {
    fn new(x: Tensor<S>, loss: Vec<S>, logits: Tensor<S>, grad: Tensor<S>) -> Self {
        Self { x, logits, loss, grad }
    }

    /// Rows where `loss` strictly improves are copied in.
    #[allow(clippy::needless_range_loop)]
    fn update(&mut self, x: &Tensor<S>, loss: &[S], logits: &Tensor<S>, grad: &Tensor<S>) {
        for i in 0..loss.len() {
            if loss[i] > self.loss[i] {
                self.loss[i] = loss[i];
                self.x.row_mut(i).copy_from_slice(x.row(i));
                self.logits.row_mut(i).copy_from_slice(logits.row(i));
                self.grad.row_mut(i).copy_from_slice(grad.row(i));
            }
        }
    }

    fn finish(self) -> AdvBatch<S> {
        AdvBatch {
            x_adv: self.x,
            logits: self.logits,
            per_sample_loss: self.loss,
        }
    }
}

fn check_batch<S: Scalar>(model: &Mlp<S>, batch: &Tensor<S>, labels: &[usize]) -> Result<()> {
    if batch.shape().len() != 2 || batch.cols() != model.input_dim() {
        return Err(dim_err(
            "attack",
            format!("N×{}", model.input_dim()),
            format!("{:?}", batch.shape()),
        ));
    }
    if batch.rows() != labels.len() {
        return Err(dim_err("attack", batch.rows(), labels.len()));
    }
    Ok(())
}

fn identity_attack<S: Scalar>(model: &Mlp<S>, batch: &Tensor<S>, labels: &[usize]) -> Result<AdvBatch<S>> {
    let (loss, logits, _) = input_gradient(model, batch, labels)?;
    Ok(AdvBatch {
        x_adv: batch.clone(),
        logits,
        per_sample_loss: loss,
    })
}

fn step_rows<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>, spec: &AttackSpec, step: S) -> Tensor<S> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let s = steepest_step(grad.row(i), spec.norm, step, spec.l1_sparsity);
        for (v, d) in out.row_mut(i).iter_mut().zip(s) {
            *v += d;
        }
    }
    out
}

/// Projected gradient ascent from a uniform random start in the ball;
/// returns the best iterate per sample.
pub fn pgd_attack<S: Scalar>(
    model: &Mlp<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    spec: &AttackSpec,
    bounds: Bounds,
) -> Result<AdvBatch<S>> {
    check_batch(model, batch, labels)?;
    spec.validate()?;
    if spec.steps == 0 {
        return identity_attack(model, batch, labels);
    }
    let ball = BallSpec::new(spec.norm, spec.eps, batch.clone(), bounds)?;
    let mut rng = rng_for(spec.seed, &[0x96d]);
    let mut x = random_start(&ball, &mut rng)?;
    let (loss, logits, mut grad) = input_gradient(model, &x, labels)?;
    let mut best = Tracker::new(x.clone(), loss, logits, grad.clone());
    let step = S::of(spec.pgd_step_size());
    for _ in 0..spec.steps {
        x = ball.project(&step_rows(&x, &grad, spec, step))?;
        let (loss, logits, g) = input_gradient(model, &x, labels)?;
        best.update(&x, &loss, &logits, &g);
        grad = g;
    }
    Ok(best.finish())
}

/// Fractions of the budget at which APGD-lite halves its step.
pub const APGD_CHECKPOINTS: [f64; 8] = [0.22, 0.41, 0.56, 0.67, 0.75, 0.82, 0.88, 0.94];
pub const APGD_MOMENTUM: f64 = 0.75;

/// Deduplicated iterations `⌈steps·c⌉` at which the step is halved.
pub fn apgd_checkpoints(steps: usize) -> Vec<usize> {
    let mut out: Vec<usize> = APGD_CHECKPOINTS
        .iter()
        .map(|&c| {
            // ⌈steps·c⌉ in integer arithmetic (c has two decimals)
            let hundredths = (c * 100.0).round() as usize;
            (steps * hundredths).div_ceil(100)
        })
        .filter(|&k| k >= 1)
        .collect();
    out.dedup();
    out
}

/// APGD-lite: initial step `2·eps`, update
/// `x_{k+1} = P(x_k + α·(P(x_k + s_k) − x_k) + (1−α)·(x_k − x_{k−1}))`
/// with α = 0.75 (plain projected step on the first iteration); at each
/// checkpoint the step halves and the iterate restarts from the best point.
pub fn apgd_lite_attack<S: Scalar>(
    model: &Mlp<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    spec: &AttackSpec,
    bounds: Bounds,
) -> Result<AdvBatch<S>> {
    apgd_lite_traced(model, batch, labels, spec, bounds).map(|(adv, _)| adv)
}

/// As [`apgd_lite_attack`], also returning the mean best loss after every
/// iteration (index 0 is the random start).
pub fn apgd_lite_traced<S: Scalar>(
    model: &Mlp<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    spec: &AttackSpec,
    bounds: Bounds,
) -> Result<(AdvBatch<S>, Vec<S>)> {
    check_batch(model, batch, labels)?;
    spec.validate()?;
    if spec.steps == 0 {
        let adv = identity_attack(model, batch, labels)?;
        let mean = adv.per_sample_loss.iter().copied().sum::<S>() / S::of_usize(labels.len());
        return Ok((adv, vec![mean]));
    }
    let ball = BallSpec::new(spec.norm, spec.eps, batch.clone(), bounds)?;
    let mut rng = rng_for(spec.seed, &[0xa96d]);
    let x0 = random_start(&ball, &mut rng)?;
    let (loss, logits, grad0) = input_gradient(model, &x0, labels)?;
    let mut best = Tracker::new(x0.clone(), loss, logits, grad0.clone());
    let mean = |v: &[S]| v.iter().copied().sum::<S>() / S::of_usize(v.len());
    let mut trace = vec![mean(&best.loss)];
    let checkpoints = apgd_checkpoints(spec.steps);
    let alpha = S::of(APGD_MOMENTUM);
    let mut step = S::of(2.0 * spec.eps);
    let (mut x, mut x_prev, mut grad) = (x0.clone(), x0, grad0);
    let mut fresh = true;
    for k in 1..=spec.steps {
        let z = ball.project(&step_rows(&x, &grad, spec, step))?;
        let next = if fresh {
            z
        } else {
            let mut y = x.clone();
            for ((yv, (&zv, &xv)), &pv) in y
                .data_mut()
                .iter_mut()
                .zip(z.data().iter().zip(x.data()))
                .zip(x_prev.data())
            {
                *yv = xv + alpha * (zv - xv) + (S::one() - alpha) * (xv - pv);
            }
            ball.project(&y)?
        };
        let (loss, logits, g) = input_gradient(model, &next, labels)?;
        best.update(&next, &loss, &logits, &g);
        trace.push(mean(&best.loss));
        x_prev = std::mem::replace(&mut x, next);
        grad = g;
        fresh = false;
        if checkpoints.contains(&k) {
            step *= S::of(0.5);
            x = best.x.clone();
            x_prev = best.x.clone();
            grad = best.grad.clone();
            fresh = true;
        }
    }
    Ok((best.finish(), trace))
}

/// Dispatches on `spec.kind`.
pub fn attack<S: Scalar>(
    model: &Mlp<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    spec: &AttackSpec,
    bounds: Bounds,
) -> Result<AdvBatch<S>> {
    match spec.kind {
        AttackKind::Pgd => pgd_attack(model, batch, labels, spec, bounds),
        AttackKind::ApgdLite => apgd_lite_attack(model, batch, labels, spec, bounds),
    }
}

/// Per sample, the batch with the highest loss (first index on ties), and
/// the index of the winning batch for every row.
#[allow(clippy::needless_range_loop)]
pub fn select_worst<S: Scalar>(advs: &[&AdvBatch<S>]) -> Result<(AdvBatch<S>, Vec<usize>)> {
    let first = advs
        .first()
        .ok_or_else(|| Error::InvalidArgument("worst-case selection needs at least one batch".into()))?;
    for a in &advs[1..] {
        first.x_adv.expect_same_shape(&a.x_adv, "select_worst")?;
    }
    let mut out = (*first).clone();
    let mut which = vec![0; first.per_sample_loss.len()];
    for (j, a) in advs.iter().enumerate().skip(1) {
        for i in 0..which.len() {
            if a.per_sample_loss[i] > out.per_sample_loss[i] {
                which[i] = j;
                out.per_sample_loss[i] = a.per_sample_loss[i];
                out.x_adv.row_mut(i).copy_from_slice(a.x_adv.row(i));
                out.logits.row_mut(i).copy_from_slice(a.logits.row(i));
            }
        }
    }
    Ok((out, which))
}

/// Runs every attack and keeps, per sample, the highest-loss example.
pub fn worst_case_batch<S: Scalar>(
    model: &Mlp<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    specs: &[AttackSpec],
    bounds: Bounds,
) -> Result<(AdvBatch<S>, Vec<usize>)> {
    let advs = specs
        .iter()
        .map(|s| attack(model, batch, labels, s, bounds))
        .collect::<Result<Vec<_>>>()?;
    select_worst(&advs.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steepest_examples() {
        assert_eq!(
            steepest_step(&[2.0, -3.0], AttackNorm::Linf, 0.1, 0.05),
            vec![0.1, -0.1]
        );
        let s = steepest_step(&[3.0f64, 4.0], AttackNorm::L2, 1.0, 0.05);
        assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.8).abs() < 1e-15);
        assert_eq!(
            steepest_step(&[5.0, 1.0, 0.0], AttackNorm::L1, 2.0, 0.3),
            vec![2.0, 0.0, 0.0]
        );
        assert_eq!(steepest_step(&[0.0, 0.0], AttackNorm::L2, 1.0, 0.05), vec![0.0, 0.0]);
        let two = steepest_step(&[-1.0, 4.0, 2.0, 0.5], AttackNorm::L1, 1.0, 0.5);
        assert_eq!(two, vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn checkpoint_schedule() {
        assert_eq!(apgd_checkpoints(10), vec![3, 5, 6, 7, 8, 9, 10]);
        assert_eq!(apgd_checkpoints(100), vec![22, 41, 56, 67, 75, 82, 88, 94]);
        assert_eq!(apgd_checkpoints(1), vec![1]);
    }

    #[test]
    fn samples_stay_in_ball() {
        let mut rng = rng_for(1, &[]);
        for norm in AttackNorm::ALL {
            for _ in 0..200 {
                let v: Vec<f64> = sample_ball(norm, 7, 0.3, &mut rng);
                assert!(lp_norm(&v, norm) <= 0.3 + 1e-12);
            }
        }
    }

    #[test]
    fn select_worst_ties_keep_first() {
        let mk = |l: f64| AdvBatch {
            x_adv: Tensor::<f64>::filled(&[1, 2], l),
            logits: Tensor::zeros(&[1, 2]),
            per_sample_loss: vec![l],
        };
        let (a, b) = (mk(0.3), mk(0.7));
        let (w, which) = select_worst(&[&a, &b]).unwrap();
        assert_eq!((w.per_sample_loss[0], which[0]), (0.7, 1));
        let (_, which) = select_worst(&[&a, &a.clone()]).unwrap();
        assert_eq!(which[0], 0);
    }

    #[test]
    fn spec_defaults() {
        let s = AttackSpec::new(AttackNorm::Linf, 0.1, 10, AttackKind::Pgd);
        assert!((s.pgd_step_size() - 0.02).abs() < 1e-15);
        assert!(AttackSpec::new(AttackNorm::L1, 0.0, 10, AttackKind::Pgd)
            .validate()
            .is_err());
        assert_eq!("apgd-lite".parse::<AttackKind>().unwrap(), AttackKind::ApgdLite);
    }
}
