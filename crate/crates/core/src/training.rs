//! Epoch-level trainers and the `run_plan` driver.
//!
//! Every trainer takes an [`EpochContext`]. The batch order of an epoch and
//! the seed of every attack are pure functions of `(seed, epoch, batch
//! index, position of the attack in its spec list)`, so two trainers that
//! run the same attacks on the same batches see identical randomness. This
//! is what makes the β = 0 and λ = 0 collapses exact.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, select_worst, AttackSpec};
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::delta::model_delta;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_robustness, RobustReport};
use crate::geometry::{AttackNorm, Bounds, KeyPair};
use crate::gp::{blended_update, project_delta, GpConfig};
use crate::losses::{cross_entropy_graph, ramp_grads, PairingLossConfig};
use crate::model::{Mlp, ModelGrads};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nt,
    At,
    AtGp,
    RampFinetune,
    RampFull,
    Max,
    Avg,
    Rand,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Nt => "nt",
            Method::At => "at",
            Method::AtGp => "at_gp",
            Method::RampFinetune => "ramp_finetune",
            Method::RampFull => "ramp_full",
            Method::Max => "max",
            Method::Avg => "avg",
            Method::Rand => "rand",
        }
    }

    pub fn uses_gp(self) -> bool {
        matches!(self, Method::AtGp | Method::RampFull)
    }

    pub fn uses_pairing(self) -> bool {
        matches!(self, Method::RampFinetune | Method::RampFull)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        [
            Method::Nt,
            Method::At,
            Method::AtGp,
            Method::RampFinetune,
            Method::RampFull,
            Method::Max,
            Method::Avg,
            Method::Rand,
        ]
        .into_iter()
        .find(|m| m.as_str() == norm)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown training method {s:?}")))
    }
}

/// Which norms RAND samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandMode {
    /// All configured norms.
    #[default]
    Sat,
    /// Only L1 and L∞.
    Eat,
}

impl FromStr for RandMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sat" => Ok(RandMode::Sat),
            "eat" | "e_at" | "e-at" => Ok(RandMode::Eat),
            other => Err(Error::InvalidArgument(format!("unknown rand mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampConfig {
    pub pairing: PairingLossConfig,
    pub key_pair: KeyPair,
}

/// Batch order, attack seeds and box for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochContext {
    pub epoch: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub bounds: Bounds,
}

impl EpochContext {
    pub fn new(epoch: usize, seed: u64, batch_size: usize, bounds: Bounds) -> Self {
        Self {
            epoch,
            seed,
            batch_size,
            bounds,
        }
    }

    /// Shuffled minibatches covering the dataset once.
    pub fn batches(&self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(self.seed, &[self.epoch as u64, 0xba7c]));
        idx.chunks(self.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Seed of the attack at position `slot` of its list on batch `batch`.
    pub fn attack_seed(&self, batch: usize, slot: usize, spec: &AttackSpec) -> u64 {
        derive_seed(self.seed, &[self.epoch as u64, batch as u64, slot as u64, spec.seed])
    }

    fn seeded(&self, batch: usize, slot: usize, spec: &AttackSpec) -> AttackSpec {
        spec.with_seed(self.attack_seed(batch, slot, spec))
    }
}

fn ce_grads<S: Scalar>(model: &Mlp<S>, x: &Tensor<S>, labels: &[usize]) -> Result<(ModelGrads<S>, f64)> {
    let mut g = Graph::new();
    let params = model.register(&mut g, true);
    let xv = g.constant(x.clone());
    let logits = model.forward_graph(&mut g, &params, xv)?;
    let (loss, _) = cross_entropy_graph(&mut g, logits, labels)?;
    let value = g.value(loss).item().as_f64();
    g.backward(loss)?;
    Ok((params.grads(&g, model)?, value))
}

/// One pass over the data, stepping `sgd` with the gradient that
/// `objective(model, x, y, batch_index)` returns. Yields the mean objective.
fn run_epoch<S: Scalar>(
    model: &mut Mlp<S>,
    data: &Dataset<S>,
    sgd: &mut Sgd<S>,
    ctx: &EpochContext,
    mut objective: impl FnMut(&Mlp<S>, &Tensor<S>, &[usize], usize) -> Result<(ModelGrads<S>, f64)>,
) -> Result<f64> {
    let batches = ctx.batches(data.len());
    let mut total = 0.0;
    for (b, idx) in batches.iter().enumerate() {
        let (x, y) = data.batch(idx);
        let (grads, loss) = objective(model, &x, &y, b)?;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite training loss at epoch {} batch {b}",
                ctx.epoch
            )));
        }
        sgd.step(model, &grads)?;
        total += loss;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Minibatch SGD on clean cross-entropy.
pub fn nt_epoch<S: Scalar>(model: &mut Mlp<S>, data: &Dataset<S>, sgd: &mut Sgd<S>, ctx: &EpochContext) -> Result<f64> {
    run_epoch(model, data, sgd, ctx, |m, x, y, _| ce_grads(m, x, y))
}

/// Minibatch SGD on cross-entropy at adversarial examples from `spec`.
pub fn at_epoch<S: Scalar>(
    model: &mut Mlp<S>,
    data: &Dataset<S>,
    spec: &AttackSpec,
    sgd: &mut Sgd<S>,
    ctx: &EpochContext,
) -> Result<f64> {
    run_epoch(model, data, sgd, ctx, |m, x, y, b| {
        let adv = attack(m, x, y, &ctx.seeded(b, 0, spec), ctx.bounds)?;
        ce_grads(m, &adv.x_adv, y)
    })
}

/// MAX, AVG or RAND over `specs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Max,
    Avg,
    Rand(RandMode),
}

/// Indices of the specs RAND may pick from.
fn rand_pool(specs: &[AttackSpec], mode: RandMode) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..specs.len())
        .filter(|&j| mode == RandMode::Sat || matches!(specs[j].norm, AttackNorm::L1 | AttackNorm::Linf))
        .collect();
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no attack available for rand mode {mode:?}"
        )));
    }
    Ok(pool)
}

pub fn baseline_epoch<S: Scalar>(
    model: &mut Mlp<S>,
    data: &Dataset<S>,
    specs: &[AttackSpec],
    kind: BaselineKind,
    sgd: &mut Sgd<S>,
    ctx: &EpochContext,
) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument(
            "baseline training needs at least one attack".into(),
        ));
    }
    let pool = match kind {
        BaselineKind::Rand(mode) => rand_pool(specs, mode)?,
        _ => Vec::new(),
    };
    run_epoch(model, data, sgd, ctx, |m, x, y, b| match kind {
        BaselineKind::Max => {
            let advs = run_all(m, x, y, specs, ctx, b)?;
            let (sel, _) = select_worst(&advs.iter().collect::<Vec<_>>())?;
            ce_grads(m, &sel.x_adv, y)
        }
        BaselineKind::Avg => {
            let advs = run_all(m, x, y, specs, ctx, b)?;
            avg_grads(m, &advs.iter().map(|a| &a.x_adv).collect::<Vec<_>>(), y)
        }
        BaselineKind::Rand(_) => {
            let pick = pool[rng_for(ctx.seed, &[ctx.epoch as u64, b as u64, 0x4a4d]).random_range(0..pool.len())];
            let adv = attack(m, x, y, &ctx.seeded(b, pick, &specs[pick]), ctx.bounds)?;
            ce_grads(m, &adv.x_adv, y)
        }
    })
}

fn run_all<S: Scalar>(
    m: &Mlp<S>,
    x: &Tensor<S>,
    y: &[usize],
    specs: &[AttackSpec],
    ctx: &EpochContext,
    b: usize,
) -> Result<Vec<crate::attacks::AdvBatch<S>>> {
    specs
        .iter()
        .enumerate()
        .map(|(j, s)| attack(m, x, y, &ctx.seeded(b, j, s), ctx.bounds))
        .collect()
}

fn avg_grads<S: Scalar>(model: &Mlp<S>, xs: &[&Tensor<S>], labels: &[usize]) -> Result<(ModelGrads<S>, f64)> {
    let mut g = Graph::new();
    let params = model.register(&mut g, true);
    let mut total = None;
    for x in xs {
        let xv = g.constant((*x).clone());
        let logits = model.forward_graph(&mut g, &params, xv)?;
        let (loss, _) = cross_entropy_graph(&mut g, logits, labels)?;
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let mut loss = total.expect("at least one attack");
    if xs.len() > 1 {
        loss = g.scale(loss, S::one() / S::of_usize(xs.len()));
    }
    let value = g.value(loss).item().as_f64();
    g.backward(loss)?;
    Ok((params.grads(&g, model)?, value))
}

/// Looks up the spec for `norm`, with its position in `specs`.
pub fn spec_for(specs: &[AttackSpec], norm: AttackNorm) -> Result<&AttackSpec> {
    specs
        .iter()
        .find(|s| s.norm == norm)
        .ok_or_else(|| Error::InvalidArgument(format!("no attack configured for norm {norm}")))
}

/// Per batch: attack with q and r, then minimize `L_max + λ·L_pair`.
/// The q and r attacks occupy slots 0 and 1, matching MAX on `[q, r]`.
pub fn ramp_finetune_epoch<S: Scalar>(
    model: &mut Mlp<S>,
    data: &Dataset<S>,
    spec_q: &AttackSpec,
    spec_r: &AttackSpec,
    pairing: &PairingLossConfig,
    sgd: &mut Sgd<S>,
    ctx: &EpochContext,
) -> Result<f64> {
    pairing.validate()?;
    run_epoch(model, data, sgd, ctx, |m, x, y, b| {
        let adv_q = attack(m, x, y, &ctx.seeded(b, 0, spec_q), ctx.bounds)?;
        let adv_r = attack(m, x, y, &ctx.seeded(b, 1, spec_r), ctx.bounds)?;
        let (grads, terms) = ramp_grads(m, y, &adv_q, &adv_r, pairing)?;
        Ok((grads, terms.total.as_f64()))
    })
}

/// Optimizer states of the two branches of a GP epoch.
#[derive(Debug, Clone)]
pub struct GpOptimizers<S> {
    pub nt: Sgd<S>,
    pub adv: Sgd<S>,
}

impl<S: Scalar> GpOptimizers<S> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        Ok(Self {
            nt: Sgd::new(cfg)?,
            adv: Sgd::new(cfg)?,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.nt.set_learning_rate(lr);
        self.adv.set_learning_rate(lr);
    }
}

/// Diagnostics of one GP epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpEpochStats {
    pub nt_loss: f64,
    pub adv_loss: f64,
    /// Parameter tensors whose projected update is nonzero.
    pub kept_layers: usize,
    pub layers: usize,
}

fn gp_epoch<S: Scalar>(
    model: &mut Mlp<S>,
    data: &Dataset<S>,
    gp: &GpConfig,
    opts: &mut GpOptimizers<S>,
    ctx: &EpochContext,
    adv_branch: impl FnOnce(&mut Mlp<S>, &mut Sgd<S>) -> Result<f64>,
) -> Result<GpEpochStats> {
    gp.validate()?;
    let snapshot = model.clone();
    let mut f_a = snapshot.clone();
    let adv_loss = adv_branch(&mut f_a, &mut opts.adv)?;
    let mut f_n = snapshot.clone();
    let nt_loss = nt_epoch(&mut f_n, data, &mut opts.nt, ctx)?;
    let g_n = model_delta(&f_n, &snapshot)?;
    let g_a = model_delta(&f_a, &snapshot)?;
    let g_p = project_delta(&g_n, &g_a, gp.variant)?;
    let kept_layers = g_p.iter().filter(|(_, v)| v.iter().any(|&x| x != S::zero())).count();
    *model = blended_update(&snapshot, &g_p, &g_a, gp.beta)?;
    Ok(GpEpochStats {
        nt_loss,
        adv_loss,
        kept_layers,
        layers: g_p.len(),
    })
}

/// NT and AT branches from the same snapshot and batch order, merged with
/// gradient projection and the β-blend.
pub fn at_gp_epoch<S: Scalar>(
    model: &mut Mlp<S>,
    data: &Dataset<S>,
    spec: &AttackSpec,
    gp: &GpConfig,
    opts: &mut GpOptimizers<S>,
    ctx: &EpochContext,
) -> Result<GpEpochStats> {
    gp_epoch(model, data, gp, opts, ctx, |m, sgd| at_epoch(m, data, spec, sgd, ctx))
}

/// As [`at_gp_epoch`] with the adversarial branch replaced by a RAMP
/// fine-tuning epoch.
#[allow(clippy::too_many_arguments)]
pub fn ramp_full_epoch<S: Scalar>(
    model: &mut Mlp<S>,
    data: &Dataset<S>,
    spec_q: &AttackSpec,
    spec_r: &AttackSpec,
    pairing: &PairingLossConfig,
    gp: &GpConfig,
    opts: &mut GpOptimizers<S>,
    ctx: &EpochContext,
) -> Result<GpEpochStats> {
    gp_epoch(model, data, gp, opts, ctx, |m, sgd| {
        ramp_finetune_epoch(m, data, spec_q, spec_r, pairing, sgd, ctx)
    })
}

/// Full training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub method: Method,
    pub epochs: usize,
    pub nt_warmup_epochs: usize,
    pub batch_size: usize,
    /// Training attacks, at most one per norm.
    pub specs: Vec<AttackSpec>,
    /// Norm used by AT and AT-GP.
    pub at_norm: AttackNorm,
    pub ramp: RampConfig,
    pub gp: GpConfig,
    pub rand_mode: RandMode,
    pub sgd: SgdConfig,
    /// Fraction of the method epochs after which the learning rate drops.
    pub lr_drop_at: Option<f64>,
    pub lr_drop_factor: f64,
    pub bounds: Bounds,
    /// Seed of batch orders and attack starts.
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        for s in &self.specs {
            s.validate()?;
        }
        let mut norms: Vec<AttackNorm> = self.specs.iter().map(|s| s.norm).collect();
        norms.sort();
        norms.dedup();
        if norms.len() != self.specs.len() {
            return Err(Error::InvalidArgument("at most one training attack per norm".into()));
        }
        match self.method {
            Method::At | Method::AtGp => {
                spec_for(&self.specs, self.at_norm)?;
            }
            Method::RampFinetune | Method::RampFull => {
                spec_for(&self.specs, self.ramp.key_pair.q)?;
                spec_for(&self.specs, self.ramp.key_pair.r)?;
                self.ramp.pairing.validate()?;
            }
            Method::Max | Method::Avg | Method::Rand => {
                if self.specs.is_empty() {
                    return Err(Error::InvalidArgument(format!("method {} needs attacks", self.method)));
                }
            }
            Method::Nt => {}
        }
        if self.method.uses_gp() {
            self.gp.validate()?;
        }
        if let Some(f) = self.lr_drop_at {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "lr drop fraction must lie in [0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate of method epoch `r` (0-based).
    pub fn learning_rate(&self, r: usize) -> f64 {
        match self.lr_drop_at {
            Some(f) if r >= (f * self.epochs as f64).ceil() as usize => self.sgd.learning_rate * self.lr_drop_factor,
            _ => self.sgd.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Train,
}

/// Metrics after one epoch. `seconds` is wall-clock time and is the only
/// nondeterministic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub method: Method,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub probe: Option<RobustReport>,
    pub gp: Option<GpEpochStats>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn clean_acc(&self) -> Option<f64> {
        self.probe.as_ref().map(|p| p.clean_acc)
    }

    pub fn union_acc(&self) -> Option<f64> {
        self.probe.as_ref().map(|p| p.union_acc)
    }
}

/// Held-out probe evaluated after every epoch.
#[derive(Debug, Clone)]
pub struct Probe<'a, S> {
    pub data: &'a Dataset<S>,
    pub specs: &'a [AttackSpec],
    pub batch_size: usize,
}

/// NT warm-up epochs followed by `plan.epochs` epochs of `plan.method`.
/// `observer` sees every record with the model after that epoch.
pub fn run_plan<S: Scalar>(
    plan: &TrainPlan,
    init: Mlp<S>,
    train: &Dataset<S>,
    probe: Option<&Probe<'_, S>>,
    mut observer: impl FnMut(&EpochRecord, &Mlp<S>) -> Result<()>,
) -> Result<(Mlp<S>, Vec<EpochRecord>)> {
    plan.validate()?;
    let mut model = init;
    let mut records = Vec::with_capacity(plan.epochs + plan.nt_warmup_epochs);
    let ctx_for = |epoch: usize| EpochContext::new(epoch, plan.seed, plan.batch_size, plan.bounds);
    let eval = |model: &Mlp<S>| -> Result<Option<RobustReport>> {
        probe
            .map(|p| evaluate_robustness(model, p.data, p.specs, plan.bounds, p.batch_size))
            .transpose()
    };

    let mut warm = Sgd::new(plan.sgd)?;
    for e in 0..plan.nt_warmup_epochs {
        let t0 = Instant::now();
        let loss = nt_epoch(&mut model, train, &mut warm, &ctx_for(e))?;
        let rec = EpochRecord {
            epoch: e + 1,
            phase: Phase::Warmup,
            method: Method::Nt,
            learning_rate: warm.learning_rate(),
            train_loss: loss,
            probe: eval(&model)?,
            gp: None,
            seconds: t0.elapsed().as_secs_f64(),
        };
        observer(&rec, &model)?;
        records.push(rec);
    }

    let mut sgd = Sgd::new(plan.sgd)?;
    let mut gp_opts = GpOptimizers::new(plan.sgd)?;
    let specs = &plan.specs;
    for r in 0..plan.epochs {
        let t0 = Instant::now();
        let lr = plan.learning_rate(r);
        sgd.set_learning_rate(lr);
        gp_opts.set_learning_rate(lr);
        let ctx = ctx_for(plan.nt_warmup_epochs + r);
        let mut gp_stats = None;
        let loss = match plan.method {
            Method::Nt => nt_epoch(&mut model, train, &mut sgd, &ctx)?,
            Method::At => at_epoch(&mut model, train, spec_for(specs, plan.at_norm)?, &mut sgd, &ctx)?,
            Method::AtGp => {
                let s = at_gp_epoch(
                    &mut model,
                    train,
                    spec_for(specs, plan.at_norm)?,
                    &plan.gp,
                    &mut gp_opts,
                    &ctx,
                )?;
                gp_stats = Some(s);
                s.adv_loss
            }
            Method::RampFinetune => ramp_finetune_epoch(
                &mut model,
                train,
                spec_for(specs, plan.ramp.key_pair.q)?,
                spec_for(specs, plan.ramp.key_pair.r)?,
                &plan.ramp.pairing,
                &mut sgd,
                &ctx,
            )?,
            Method::RampFull => {
                let s = ramp_full_epoch(
                    &mut model,
                    train,
                    spec_for(specs, plan.ramp.key_pair.q)?,
                    spec_for(specs, plan.ramp.key_pair.r)?,
                    &plan.ramp.pairing,
                    &plan.gp,
                    &mut gp_opts,
                    &ctx,
                )?;
                gp_stats = Some(s);
                s.adv_loss
            }
            Method::Max => baseline_epoch(&mut model, train, specs, BaselineKind::Max, &mut sgd, &ctx)?,
            Method::Avg => baseline_epoch(&mut model, train, specs, BaselineKind::Avg, &mut sgd, &ctx)?,
            Method::Rand => baseline_epoch(
                &mut model,
                train,
                specs,
                BaselineKind::Rand(plan.rand_mode),
                &mut sgd,
                &ctx,
            )?,
        };
        let rec = EpochRecord {
            epoch: plan.nt_warmup_epochs + r + 1,
            phase: Phase::Train,
            method: plan.method,
            learning_rate: lr,
            train_loss: loss,
            probe: eval(&model)?,
            gp: gp_stats,
            seconds: t0.elapsed().as_secs_f64(),
        };
        observer(&rec, &model)?;
        records.push(rec);
    }
    Ok((model, records))
}
