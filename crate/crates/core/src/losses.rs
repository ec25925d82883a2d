//! Cross-entropy, correct-subset logit pairing (KL, MSE, cosine), the MAX
//! objective over two adversarial batches, and the combined RAMP objective
//! `L_max + λ·L_pair`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AdvBatch, AttackSpec};
use crate::autodiff::{log_softmax_rows, softmax_rows, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::geometry::Bounds;
use crate::model::{argmax_rows, Mlp, ModelGrads, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor on the norm product in the cosine loss.
pub const COSINE_FLOOR: f64 = 1e-15;

fn check_labels<S: Scalar>(logits: &Tensor<S>, labels: &[usize], op: &'static str) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(dim_err(op, format!("{} labels", logits.rows()), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(dim_err(op, format!("label < {}", logits.cols()), bad));
    }
    Ok(())
}

/// Mean and per-sample cross-entropy `−log softmax(logits)[label]`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Vec<S>)> {
    check_labels(logits, labels, "cross_entropy")?;
    let lsm = log_softmax_rows(logits);
    let per: Vec<S> = labels.iter().enumerate().map(|(i, &y)| -lsm.row(i)[y]).collect();
    let mean = per.iter().copied().sum::<S>() / S::of_usize(per.len());
    Ok((mean, per))
}

/// Recorded cross-entropy: returns `(mean, per-sample vector)` nodes.
pub fn cross_entropy_graph<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[usize]) -> Result<(Var, Var)> {
    check_labels(g.value(logits), labels, "cross_entropy")?;
    let lsm = g.log_softmax(logits);
    let picked = g.pick_per_row(lsm, labels)?;
    let per = g.scale(picked, -S::one());
    Ok((g.mean(per), per))
}

/// Indices of the samples the q-adversary failed to flip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectIndexSet {
    pub gamma: Vec<usize>,
    pub batch_size: usize,
}

impl CorrectIndexSet {
    pub fn n_c(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Rows whose argmax (lowest index on ties) equals the label.
pub fn correct_subset<S: Scalar>(p_q: &Tensor<S>, labels: &[usize]) -> Result<CorrectIndexSet> {
    check_labels(p_q, labels, "correct_subset")?;
    Ok(CorrectIndexSet {
        gamma: argmax_rows(p_q)
            .into_iter()
            .zip(labels)
            .enumerate()
            .filter(|(_, (p, &y))| *p == y)
            .map(|(i, _)| i)
            .collect(),
        batch_size: labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingKind {
    #[default]
    Kl,
    Mse,
    Cosine,
}

impl fmt::Display for PairingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingKind::Kl => "kl",
            PairingKind::Mse => "mse",
            PairingKind::Cosine => "cosine",
        })
    }
}

impl FromStr for PairingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(PairingKind::Kl),
            "mse" => Ok(PairingKind::Mse),
            "cosine" | "cos" => Ok(PairingKind::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown pairing loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingLossConfig {
    pub lambda: f64,
    pub kind: PairingKind,
    /// Treat `p_q` as a constant target. Turning this off lets gradients
    /// flow into both branches.
    pub detach_target: bool,
}

impl Default for PairingLossConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            kind: PairingKind::Kl,
            detach_target: true,
        }
    }
}

impl PairingLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_pair<S: Scalar>(p_q: &Tensor<S>, p_r: &Tensor<S>, gamma: &CorrectIndexSet) -> Result<()> {
    p_q.expect_same_shape(p_r, "pairing_loss")?;
    if p_q.rows() != gamma.batch_size {
        return Err(dim_err("pairing_loss", gamma.batch_size, p_q.rows()));
    }
    if let Some(&bad) = gamma.gamma.iter().find(|&&i| i >= p_q.rows()) {
        return Err(dim_err("pairing_loss", format!("index < {}", p_q.rows()), bad));
    }
    Ok(())
}

fn mean_over<S: Scalar>(gamma: &CorrectIndexSet, f: impl Fn(usize) -> S) -> S {
    if gamma.is_empty() {
        return S::zero();
    }
    gamma.gamma.iter().map(|&i| f(i)).sum::<S>() / S::of_usize(gamma.n_c())
}

/// `(1/n_c)·Σ_{i∈γ} KL(p_q[i] ‖ p_r[i])`, 0 on an empty subset.
pub fn kl_pairing_loss<S: Scalar>(p_q: &Tensor<S>, p_r: &Tensor<S>, gamma: &CorrectIndexSet) -> Result<S> {
    check_pair(p_q, p_r, gamma)?;
    let floor = S::of(PROB_FLOOR);
    Ok(mean_over(gamma, |i| {
        p_q.row(i)
            .iter()
            .zip(p_r.row(i))
            .map(|(&a, &b)| a * (a.max(floor).ln() - b.max(floor).ln()))
            .sum()
    }))
}

/// `(1/n_c)·Σ_{i∈γ} ½‖p_q[i] − p_r[i]‖²`.
pub fn mse_pairing_loss<S: Scalar>(p_q: &Tensor<S>, p_r: &Tensor<S>, gamma: &CorrectIndexSet) -> Result<S> {
    check_pair(p_q, p_r, gamma)?;
    let half = S::of(0.5);
    Ok(mean_over(gamma, |i| {
        half * p_q
            .row(i)
            .iter()
            .zip(p_r.row(i))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
    }))
}

/// `(1/n_c)·Σ_{i∈γ} (1 − cos(p_q[i], p_r[i]))`; a zero row has cosine 0.
pub fn cosine_pairing_loss<S: Scalar>(p_q: &Tensor<S>, p_r: &Tensor<S>, gamma: &CorrectIndexSet) -> Result<S> {
    check_pair(p_q, p_r, gamma)?;
    let floor = S::of(COSINE_FLOOR);
    Ok(mean_over(gamma, |i| {
        let (a, b) = (p_q.row(i), p_r.row(i));
        let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
        let na: S = a.iter().map(|&x| x * x).sum();
        let nb: S = b.iter().map(|&x| x * x).sum();
        S::one() - dot / (na * nb).sqrt().max(floor)
    }))
}

pub fn pairing_loss<S: Scalar>(
    kind: PairingKind,
    p_q: &Tensor<S>,
    p_r: &Tensor<S>,
    gamma: &CorrectIndexSet,
) -> Result<S> {
    match kind {
        PairingKind::Kl => kl_pairing_loss(p_q, p_r, gamma),
        PairingKind::Mse => mse_pairing_loss(p_q, p_r, gamma),
        PairingKind::Cosine => cosine_pairing_loss(p_q, p_r, gamma),
    }
}

/// Recorded pairing loss between the softmax outputs of `logits_q` and
/// `logits_r` on the rows in `gamma`. Returns `None` for an empty subset.
pub fn pairing_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    logits_q: Var,
    logits_r: Var,
    gamma: &CorrectIndexSet,
    kind: PairingKind,
    detach_target: bool,
) -> Result<Option<Var>> {
    if gamma.is_empty() {
        return Ok(None);
    }
    let pq_full = g.softmax(logits_q);
    let pq_full = if detach_target { g.detach(pq_full) } else { pq_full };
    let pr_full = g.softmax(logits_r);
    let pq = g.select_rows(pq_full, &gamma.gamma)?;
    let pr = g.select_rows(pr_full, &gamma.gamma)?;
    let inv_n = S::one() / S::of_usize(gamma.n_c());
    let total = match kind {
        PairingKind::Kl => {
            let lq = g.clamp_min(pq, S::of(PROB_FLOOR));
            let lq = g.ln(lq);
            let lr = g.clamp_min(pr, S::of(PROB_FLOOR));
            let lr = g.ln(lr);
            let diff = g.sub(lq, lr)?;
            let terms = g.mul(pq, diff)?;
            g.sum(terms)
        }
        PairingKind::Mse => {
            let diff = g.sub(pq, pr)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            g.scale(s, S::of(0.5))
        }
        PairingKind::Cosine => {
            let prod = g.mul(pq, pr)?;
            let dot = g.row_sum(prod);
            let qq = g.mul(pq, pq)?;
            let nq = g.row_sum(qq);
            let rr = g.mul(pr, pr)?;
            let nr = g.row_sum(rr);
            let norms = g.mul(nq, nr)?;
            let norms = g.sqrt(norms);
            let norms = g.clamp_min(norms, S::of(COSINE_FLOOR));
            let cos = g.div(dot, norms)?;
            let s = g.sum(cos);
            // Σ(1 − cos) = n_c − Σ cos
            let neg = g.scale(s, -S::one());
            g.add_scalar(neg, S::of_usize(gamma.n_c()))
        }
    };
    Ok(Some(g.scale(total, inv_n)))
}

/// Per sample, `true` when the r-loss is strictly larger (ties keep q).
pub fn max_selection<S: Scalar>(loss_q: &[S], loss_r: &[S]) -> Vec<bool> {
    loss_q.iter().zip(loss_r).map(|(q, r)| r > q).collect()
}

/// Value of the MAX objective: mean over samples of the larger of the two
/// per-sample losses.
pub fn max_loss<S: Scalar>(loss_q: &[S], loss_r: &[S]) -> Result<S> {
    if loss_q.len() != loss_r.len() || loss_q.is_empty() {
        return Err(dim_err("max_loss", loss_q.len(), loss_r.len()));
    }
    Ok(loss_q.iter().zip(loss_r).map(|(&q, &r)| q.max(r)).sum::<S>() / S::of_usize(loss_q.len()))
}

/// Components of one evaluation of the RAMP objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampTerms<S> {
    pub total: S,
    pub l_max: S,
    pub l_pair: S,
    pub n_c: usize,
}

/// Builds `mean CE(f(x_sel)) + λ·L_pair(p_q, p_r)` on `g`, where `x_sel`
/// holds, per sample, whichever of the two adversarial examples has the
/// higher loss. With λ = 0 the pairing branch is not recorded at all.
pub fn ramp_objective_graph<S: Scalar>(
    g: &mut Graph<S>,
    model: &Mlp<S>,
    params: &ParamVars,
    labels: &[usize],
    adv_q: &AdvBatch<S>,
    adv_r: &AdvBatch<S>,
    cfg: &PairingLossConfig,
) -> Result<(Var, RampTerms<S>)> {
    cfg.validate()?;
    let (selected, _) = attacks::select_worst(&[adv_q, adv_r])?;
    let xs = g.constant(selected.x_adv);
    let logits = model.forward_graph(g, params, xs)?;
    let (l_max, _) = cross_entropy_graph(g, logits, labels)?;
    let l_max_val = g.value(l_max).item();
    if cfg.lambda == 0.0 {
        return Ok((
            l_max,
            RampTerms {
                total: l_max_val,
                l_max: l_max_val,
                l_pair: S::zero(),
                n_c: 0,
            },
        ));
    }
    let gamma = correct_subset(&softmax_rows(&adv_q.logits), labels)?;
    let xq = g.constant(adv_q.x_adv.clone());
    let lq = model.forward_graph(g, params, xq)?;
    let xr = g.constant(adv_r.x_adv.clone());
    let lr = model.forward_graph(g, params, xr)?;
    let n_c = gamma.n_c();
    match pairing_loss_graph(g, lq, lr, &gamma, cfg.kind, cfg.detach_target)? {
        None => Ok((
            l_max,
            RampTerms {
                total: l_max_val,
                l_max: l_max_val,
                l_pair: S::zero(),
                n_c,
            },
        )),
        Some(pair) => {
            let l_pair = g.value(pair).item();
            let scaled = g.scale(pair, S::of(cfg.lambda));
            let total = g.add(l_max, scaled)?;
            Ok((
                total,
                RampTerms {
                    total: g.value(total).item(),
                    l_max: l_max_val,
                    l_pair,
                    n_c,
                },
            ))
        }
    }
}

/// Parameter gradients of the RAMP objective on fixed adversarial batches.
pub fn ramp_grads<S: Scalar>(
    model: &Mlp<S>,
    labels: &[usize],
    adv_q: &AdvBatch<S>,
    adv_r: &AdvBatch<S>,
    cfg: &PairingLossConfig,
) -> Result<(ModelGrads<S>, RampTerms<S>)> {
    let mut g = Graph::new();
    let params = model.register(&mut g, true);
    let (loss, terms) = ramp_objective_graph(&mut g, model, &params, labels, adv_q, adv_r, cfg)?;
    g.backward(loss)?;
    Ok((params.grads(&g, model)?, terms))
}

/// Runs the q and r attacks on `batch` and evaluates the RAMP objective.
pub fn ramp_loss<S: Scalar>(
    model: &Mlp<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    spec_q: &AttackSpec,
    spec_r: &AttackSpec,
    bounds: Bounds,
    cfg: &PairingLossConfig,
) -> Result<RampTerms<S>> {
    let adv_q = attacks::attack(model, batch, labels, spec_q, bounds)?;
    let adv_r = attacks::attack(model, batch, labels, spec_r, bounds)?;
    ramp_terms(labels, &adv_q, &adv_r, cfg)
}

/// Graph-free RAMP objective on fixed attack outputs.
pub fn ramp_terms<S: Scalar>(
    labels: &[usize],
    adv_q: &AdvBatch<S>,
    adv_r: &AdvBatch<S>,
    cfg: &PairingLossConfig,
) -> Result<RampTerms<S>> {
    cfg.validate()?;
    let l_max = max_loss(&adv_q.per_sample_loss, &adv_r.per_sample_loss)?;
    if cfg.lambda == 0.0 {
        return Ok(RampTerms {
            total: l_max,
            l_max,
            l_pair: S::zero(),
            n_c: 0,
        });
    }
    let p_q = softmax_rows(&adv_q.logits);
    let p_r = softmax_rows(&adv_r.logits);
    let gamma = correct_subset(&p_q, labels)?;
    let l_pair = pairing_loss(cfg.kind, &p_q, &p_r, &gamma)?;
    Ok(RampTerms {
        total: l_max + S::of(cfg.lambda) * l_pair,
        l_max,
        l_pair,
        n_c: gamma.n_c(),
    })
}
