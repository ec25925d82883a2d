//! Robustness metrics (clean, per-norm and union accuracy) and delta-error
//! estimation: the variance/bias/τ̄ terms along a training trajectory, the
//! closed-form error predictions, and a Monte-Carlo check of them.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{worst_case_batch, AttackSpec};
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{AttackNorm, Bounds};
use crate::gp::{gp_layer, GpVariant};
use crate::losses::cross_entropy_graph;
use crate::model::{argmax_rows, Mlp};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::{dot, sq_norm, Scalar};
use crate::tensor::Tensor;

/// Per-sample outcome: clean prediction correct, and robust under each norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFlags {
    pub clean: bool,
    pub l1: bool,
    pub l2: bool,
    pub linf: bool,
}

impl SampleFlags {
    pub fn get(&self, norm: AttackNorm) -> bool {
        match norm {
            AttackNorm::L1 => self.l1,
            AttackNorm::L2 => self.l2,
            AttackNorm::Linf => self.linf,
        }
    }

    pub fn union(&self) -> bool {
        self.clean && self.l1 && self.l2 && self.linf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub clean_acc: f64,
    pub per_norm_acc: BTreeMap<AttackNorm, f64>,
    pub union_acc: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_sample_flags: Vec<SampleFlags>,
}

impl RobustReport {
    /// Aggregates flags; a robust flag only counts when the clean flag does.
    pub fn from_flags(flags: Vec<SampleFlags>) -> Result<Self> {
        if flags.is_empty() {
            return Err(Error::InvalidArgument("robustness report over zero samples".into()));
        }
        let flags: Vec<SampleFlags> = flags
            .into_iter()
            .map(|f| SampleFlags {
                clean: f.clean,
                l1: f.clean && f.l1,
                l2: f.clean && f.l2,
                linf: f.clean && f.linf,
            })
            .collect();
        let n = flags.len();
        let frac = |pred: &dyn Fn(&SampleFlags) -> bool| flags.iter().filter(|f| pred(f)).count() as f64 / n as f64;
        let per_norm_acc = AttackNorm::ALL.iter().map(|&p| (p, frac(&|f| f.get(p)))).collect();
        Ok(Self {
            clean_acc: frac(&|f| f.clean),
            per_norm_acc,
            union_acc: frac(&|f| f.union()),
            n,
            per_sample_flags: flags,
        })
    }

    pub fn acc(&self, norm: AttackNorm) -> f64 {
        self.per_norm_acc[&norm]
    }

    pub fn min_norm_acc(&self) -> f64 {
        self.per_norm_acc.values().copied().fold(f64::INFINITY, f64::min)
    }

    /// `union ≤ min per-norm ≤ clean`, and the union matches the flags.
    pub fn invariants_hold(&self) -> bool {
        let recount = if self.per_sample_flags.is_empty() {
            self.union_acc
        } else {
            self.per_sample_flags.iter().filter(|f| f.union()).count() as f64 / self.n as f64
        };
        self.union_acc <= self.min_norm_acc()
            && self.per_norm_acc.values().all(|&a| a <= self.clean_acc)
            && self.union_acc == recount
    }

    /// The report without per-sample flags, as one JSON line.
    pub fn to_json_line(&self) -> String {
        let slim = Self {
            per_sample_flags: Vec::new(),
            ..self.clone()
        };
        serde_json::to_string(&slim).expect("report serializes")
    }
}

/// Attacks every sample with each of the three norms (distinct norms are
/// required) and records robust flags. Attack seeds depend only on the spec
/// seed and the batch index.
pub fn evaluate_robustness<S: Scalar>(
    model: &Mlp<S>,
    data: &Dataset<S>,
    specs: &[AttackSpec],
    bounds: Bounds,
    batch_size: usize,
) -> Result<RobustReport> {
    let mut norms: Vec<AttackNorm> = specs.iter().map(|s| s.norm).collect();
    norms.sort();
    if norms != AttackNorm::ALL {
        return Err(Error::InvalidArgument(
            "robustness evaluation needs exactly one attack per norm (l1, l2, linf)".into(),
        ));
    }
    let bs = batch_size.max(1);
    let mut flags = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in idx.chunks(bs).enumerate() {
        let (x, y) = data.batch(chunk);
        let clean = model.predict(&x)?;
        let mut robust: BTreeMap<AttackNorm, Vec<bool>> = BTreeMap::new();
        for spec in specs {
            let seeded = spec.with_seed(derive_seed(spec.seed, &[b as u64]));
            let (adv, _) = worst_case_batch(model, &x, &y, &[seeded], bounds)?;
            let pred = argmax_rows(&adv.logits);
            robust.insert(spec.norm, pred.iter().zip(&y).map(|(p, l)| p == l).collect());
        }
        for i in 0..y.len() {
            flags.push(SampleFlags {
                clean: clean[i] == y[i],
                l1: robust[&AttackNorm::L1][i],
                l2: robust[&AttackNorm::L2][i],
                linf: robust[&AttackNorm::Linf][i],
            });
        }
    }
    RobustReport::from_flags(flags)
}

/// Clean accuracy only.
pub fn clean_accuracy<S: Scalar>(model: &Mlp<S>, data: &Dataset<S>) -> Result<f64> {
    let pred = model.predict(data.features())?;
    Ok(pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
}

/// Estimated delta-error terms and the predicted `Δ²_AT − Δ²_GP`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaErrorReport {
    pub variance: f64,
    pub bias: f64,
    pub tau_bar_sq: f64,
    pub predicted_diff: f64,
    pub beta: f64,
    pub m: usize,
    pub snapshots: usize,
}

impl DeltaErrorReport {
    pub fn tau_bar(&self) -> f64 {
        self.tau_bar_sq.sqrt()
    }
}

/// `β(2−β)·variance − β²·τ̄²·bias`. With `finite_m` the variance term is
/// scaled by `1 − 1/m`, the exact difference between the AT error
/// (coefficient 1) and the GP lemma coefficient.
pub fn predicted_error_difference(report: &DeltaErrorReport, beta: f64, finite_m: bool) -> f64 {
    let scale = if finite_m {
        1.0 - 1.0 / report.m.max(1) as f64
    } else {
        1.0
    };
    beta * (2.0 - beta) * scale * report.variance - beta * beta * report.tau_bar_sq * report.bias
}

/// `((1−β)² + (2β−β²)/m)·variance + β²·τ̄²·bias`.
pub fn predicted_delta_gp(variance: f64, bias: f64, tau_bar_sq: f64, beta: f64, m: usize) -> f64 {
    let m = m.max(1) as f64;
    ((1.0 - beta).powi(2) + (2.0 * beta - beta * beta) / m) * variance + beta * beta * tau_bar_sq * bias
}

/// Squared sine of the angle between `a` and `b`; 0 if either is zero.
pub fn sin_sq(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (sq_norm(a), sq_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (1.0 - dot(a, b).powi(2) / (na * nb)).clamp(0.0, 1.0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Settings for [`estimate_delta_terms`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimatorConfig {
    /// Minibatch size for `ĝ_a`/`ĝ_n`; at least the source size means the
    /// whole source in order.
    pub minibatch_size: usize,
    /// Minibatches drawn per snapshot.
    pub draws: usize,
    pub beta: f64,
    pub finite_m: bool,
    pub seed: u64,
}

impl Default for DeltaEstimatorConfig {
    fn default() -> Self {
        Self {
            minibatch_size: 64,
            draws: 4,
            beta: 0.5,
            finite_m: false,
            seed: 0,
        }
    }
}

/// Flat parameter gradient of the mean cross-entropy on `x`.
pub fn loss_gradient<S: Scalar>(model: &Mlp<S>, x: &Tensor<S>, labels: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let params = model.register(&mut g, true);
    let xv = g.constant(x.clone());
    let logits = model.forward_graph(&mut g, &params, xv)?;
    let (loss, _) = cross_entropy_graph(&mut g, logits, labels)?;
    g.backward(loss)?;
    Ok(params.grads(&g, model)?.flatten().iter().map(|v| v.as_f64()).collect())
}

fn adversarial_gradient<S: Scalar>(
    model: &Mlp<S>,
    x: &Tensor<S>,
    labels: &[usize],
    specs: &[AttackSpec],
    bounds: Bounds,
    seed: u64,
) -> Result<Vec<f64>> {
    let seeded: Vec<AttackSpec> = specs
        .iter()
        .enumerate()
        .map(|(j, s)| s.with_seed(derive_seed(seed, &[j as u64, s.seed])))
        .collect();
    let (adv, _) = worst_case_batch(model, x, labels, &seeded, bounds)?;
    loss_gradient(model, &adv.x_adv, labels)
}

/// Estimates the delta-error terms over trajectory snapshots, which play the
/// role of the parameter distribution π.
///
/// At each snapshot `g_a` is the worst-case adversarial gradient over the
/// whole held-out set, `ĝ_a` the same on a minibatch of `minibatch_source`,
/// and `ĝ_n` the clean minibatch gradient. Variance, bias and `τ² =
/// sin²∠(ĝ_n, g_a − ĝ_n)` are averaged over snapshots and draws.
pub fn estimate_delta_terms<S: Scalar>(
    snapshots: &[Mlp<S>],
    heldout: &Dataset<S>,
    minibatch_source: &Dataset<S>,
    specs: &[AttackSpec],
    bounds: Bounds,
    cfg: &DeltaEstimatorConfig,
) -> Result<DeltaErrorReport> {
    if snapshots.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "delta estimation needs at least 2 snapshots, got {}",
            snapshots.len()
        )));
    }
    if specs.is_empty() {
        return Err(Error::InvalidArgument(
            "delta estimation needs at least one attack".into(),
        ));
    }
    let m = snapshots[0].param_count();
    let (mut var, mut bias, mut tau, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (s, model) in snapshots.iter().enumerate() {
        let attack_seed = derive_seed(cfg.seed, &[s as u64, 0xa7]);
        let g_a = adversarial_gradient(model, heldout.features(), heldout.labels(), specs, bounds, attack_seed)?;
        for draw in 0..cfg.draws.max(1) {
            let idx: Vec<usize> = if cfg.minibatch_size >= minibatch_source.len() {
                (0..minibatch_source.len()).collect()
            } else {
                let mut rng = rng_for(cfg.seed, &[s as u64, draw as u64, 0x3b]);
                let mut v = sample_indices(&mut rng, minibatch_source.len(), cfg.minibatch_size).into_vec();
                v.sort_unstable();
                v
            };
            let (xb, yb) = minibatch_source.batch(&idx);
            let ga_hat = adversarial_gradient(model, &xb, &yb, specs, bounds, attack_seed)?;
            let gn_hat = loss_gradient(model, &xb, &yb)?;
            var += sq_dist(&g_a, &ga_hat);
            bias += sq_dist(&g_a, &gn_hat);
            let resid: Vec<f64> = g_a.iter().zip(&gn_hat).map(|(a, n)| a - n).collect();
            tau += sin_sq(&gn_hat, &resid);
            count += 1;
        }
    }
    let c = count as f64;
    let mut report = DeltaErrorReport {
        variance: var / c,
        bias: bias / c,
        tau_bar_sq: tau / c,
        predicted_diff: 0.0,
        beta: cfg.beta,
        m,
        snapshots: snapshots.len(),
    };
    report.predicted_diff = predicted_error_difference(&report, cfg.beta, cfg.finite_m);
    Ok(report)
}

/// Source of `(ĝ_a, ĝ_n)` pairs around a fixed population update `g_a`.
pub trait DeltaSampler {
    fn g_a(&self) -> &[f64];
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>);
}

/// `ĝ_a = g_a + σ_a·ξ`, `ĝ_n = g_a + b + σ_n·ζ` with independent standard
/// normal ξ, ζ and a fixed offset `b`.
#[derive(Debug, Clone)]
pub struct GaussianEnsemble {
    pub g_a: Vec<f64>,
    pub offset: Vec<f64>,
    pub sigma_a: f64,
    pub sigma_n: f64,
}

impl GaussianEnsemble {
    /// Random `g_a` with entries of std `g_scale` and an offset whose entries
    /// have std `offset_scale`, both drawn from `seed`.
    pub fn random(m: usize, g_scale: f64, offset_scale: f64, sigma_a: f64, sigma_n: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x9e]);
        let mut draw = |s: f64| -> Vec<f64> {
            (0..m)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z
                })
                .collect()
        };
        let g_a = draw(g_scale);
        let offset = draw(offset_scale);
        Self {
            g_a,
            offset,
            sigma_a,
            sigma_n,
        }
    }

    pub fn dim(&self) -> usize {
        self.g_a.len()
    }

    /// `E‖g_a − ĝ_a‖² = m·σ_a²`.
    pub fn known_variance(&self) -> f64 {
        self.dim() as f64 * self.sigma_a * self.sigma_a
    }
}

impl DeltaSampler for GaussianEnsemble {
    fn g_a(&self) -> &[f64] {
        &self.g_a
    }

    fn sample(&mut self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let ga_hat = self
            .g_a
            .iter()
            .map(|&g| {
                let z: f64 = StandardNormal.sample(rng);
                g + self.sigma_a * z
            })
            .collect();
        let gn_hat = self
            .g_a
            .iter()
            .zip(&self.offset)
            .map(|(&g, &b)| {
                let z: f64 = StandardNormal.sample(rng);
                g + b + self.sigma_n * z
            })
            .collect();
        (ga_hat, gn_hat)
    }
}

/// Monte-Carlo delta error together with the sample averages of its terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloDelta {
    /// Mean of `‖g_a − ĝ_GP‖²`.
    pub delta_sq: f64,
    /// Standard error of that mean.
    pub std_err: f64,
    /// Mean of `‖g_a − ĝ_a‖²`.
    pub variance: f64,
    /// Mean of `‖g_a − ĝ_n‖²`.
    pub bias: f64,
    /// Mean of `sin²∠(ĝ_n, g_a − ĝ_n)`.
    pub tau_bar_sq: f64,
    pub trials: usize,
}

/// Averages `‖g_a − (β·gp(ĝ_n, ĝ_a) + (1−β)·ĝ_a)‖²` over `trials` draws.
pub fn monte_carlo_delta(
    sampler: &mut dyn DeltaSampler,
    beta: f64,
    variant: GpVariant,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloDelta> {
    if trials == 0 {
        return Err(Error::InvalidArgument("monte_carlo_delta needs trials >= 1".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    let mut rng = rng_for(seed, &[0x3c]);
    let g_a = sampler.g_a().to_vec();
    let (mut sum, mut sum_sq, mut var, mut bias, mut tau) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..trials {
        let (ga_hat, gn_hat) = sampler.sample(&mut rng);
        let gp = if beta == 0.0 {
            vec![0.0; g_a.len()]
        } else {
            gp_layer(&gn_hat, &ga_hat, variant)
        };
        let d: f64 = g_a
            .iter()
            .zip(gp.iter().zip(&ga_hat))
            .map(|(&t, (&p, &a))| {
                let e = t - (beta * p + (1.0 - beta) * a);
                e * e
            })
            .sum();
        sum += d;
        sum_sq += d * d;
        var += sq_dist(&g_a, &ga_hat);
        bias += sq_dist(&g_a, &gn_hat);
        let resid: Vec<f64> = g_a.iter().zip(&gn_hat).map(|(a, n)| a - n).collect();
        tau += sin_sq(&gn_hat, &resid);
    }
    let t = trials as f64;
    let mean = sum / t;
    let sample_var = if trials > 1 {
        ((sum_sq / t - mean * mean) * t / (t - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MonteCarloDelta {
        delta_sq: mean,
        std_err: (sample_var / t).sqrt(),
        variance: var / t,
        bias: bias / t,
        tau_bar_sq: tau / t,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(clean: bool, l1: bool, l2: bool, linf: bool) -> SampleFlags {
        SampleFlags { clean, l1, l2, linf }
    }

    #[test]
    fn union_from_flags() {
        let r = RobustReport::from_flags(vec![f(true, true, true, true), f(true, false, true, true)]).unwrap();
        assert_eq!(r.union_acc, 0.5);
        assert_eq!(r.acc(AttackNorm::L1), 0.5);
        assert!(r.invariants_hold());
    }

    #[test]
    fn robust_flags_need_clean_correct() {
        let r = RobustReport::from_flags(vec![f(false, true, true, true), f(true, true, true, true)]).unwrap();
        assert_eq!((r.clean_acc, r.union_acc, r.acc(AttackNorm::L2)), (0.5, 0.5, 0.5));
    }

    #[test]
    fn predictions_at_edges() {
        let rep = DeltaErrorReport {
            variance: 2.0,
            bias: 3.0,
            tau_bar_sq: 0.0,
            predicted_diff: 0.0,
            beta: 0.5,
            m: 10,
            snapshots: 2,
        };
        assert_eq!(predicted_error_difference(&rep, 0.0, false), 0.0);
        assert_eq!(predicted_error_difference(&rep, 1.0, false), 2.0);
        assert_eq!(predicted_delta_gp(2.0, 3.0, 0.0, 0.0, 10), 2.0);
        assert!((predicted_delta_gp(2.0, 3.0, 0.0, 1.0, 10) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn table_row_arithmetic() {
        let rep = DeltaErrorReport {
            variance: 4.6017e-8,
            bias: 7e-4,
            tau_bar_sq: 0.0071f64.powi(2),
            predicted_diff: 0.0,
            beta: 0.5,
            m: 1,
            snapshots: 2,
        };
        let d = predicted_error_difference(&rep, 0.5, false);
        let direct = 0.75 * 4.6017e-8 - 0.25 * 5.041e-5 * 7e-4;
        assert!((d - direct).abs() < 1e-20);
        assert!((d - 2.57e-8).abs() < 0.01e-8);
    }

    #[test]
    fn monte_carlo_exact_sampler() {
        struct Fixed(Vec<f64>);
        impl DeltaSampler for Fixed {
            fn g_a(&self) -> &[f64] {
                &self.0
            }
            fn sample(&mut self, _: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
                (self.0.clone(), vec![1.0, 0.0])
            }
        }
        let mut s = Fixed(vec![0.3, -0.2]);
        let mc = monte_carlo_delta(&mut s, 0.0, GpVariant::ProjPlus, 5, 0).unwrap();
        assert_eq!(mc.delta_sq, 0.0);
        assert_eq!(mc.variance, 0.0);
    }

    #[test]
    fn sin_sq_degenerate() {
        assert_eq!(sin_sq(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((sin_sq(&[1.0, 0.0], &[0.0, 2.0]) - 1.0).abs() < 1e-15);
        assert!(sin_sq(&[1.0, 1.0], &[2.0, 2.0]).abs() < 1e-15);
    }
}
