//! ℓp norms, Euclidean projections onto ℓ1/ℓ2/ℓ∞ balls intersected with a
//! pixel box, ball log-volumes, and the key tradeoff pair heuristic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The three threat models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackNorm {
    L1,
    L2,
    Linf,
}

impl AttackNorm {
    pub const ALL: [AttackNorm; 3] = [AttackNorm::L1, AttackNorm::L2, AttackNorm::Linf];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackNorm::L1 => "l1",
            AttackNorm::L2 => "l2",
            AttackNorm::Linf => "linf",
        }
    }

    /// Rank used to break log-volume ties: L∞ > L2 > L1.
    fn tie_rank(self) -> u8 {
        match self {
            AttackNorm::Linf => 2,
            AttackNorm::L2 => 1,
            AttackNorm::L1 => 0,
        }
    }
}

impl fmt::Display for AttackNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" | "1" => Ok(AttackNorm::L1),
            "l2" | "2" => Ok(AttackNorm::L2),
            "linf" | "l_inf" | "inf" => Ok(AttackNorm::Linf),
            other => Err(Error::InvalidArgument(format!(
                "unknown norm {other:?} (expected l1, l2 or linf)"
            ))),
        }
    }
}

/// Per-coordinate feasibility box, `[0, 1]` for image-like inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds { lo: 0.0, hi: 1.0 };
    pub const UNBOUNDED: Bounds = Bounds {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds::UNIT
    }
}

/// The feasible region `{x' : ‖x' − center‖_p ≤ eps, lo ≤ x' ≤ hi}` around
/// each row of `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct BallSpec<S> {
    pub norm: AttackNorm,
    pub eps: f64,
    pub center: Tensor<S>,
    pub bounds: Bounds,
}

impl<S: Scalar> BallSpec<S> {
    pub fn new(norm: AttackNorm, eps: f64, center: Tensor<S>, bounds: Bounds) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ball radius must be positive, got {eps}"
            )));
        }
        if bounds.lo > bounds.hi {
            return Err(Error::InvalidArgument(format!(
                "empty box [{}, {}]",
                bounds.lo, bounds.hi
            )));
        }
        let (lo, hi) = (S::of(bounds.lo), S::of(bounds.hi));
        if center.data().iter().any(|&c| c < lo || c > hi) {
            return Err(Error::InvalidArgument("ball center lies outside the box".into()));
        }
        Ok(Self {
            norm,
            eps,
            center,
            bounds,
        })
    }

    /// Projects every row of `x_adv` into its ball and the box.
    pub fn project(&self, x_adv: &Tensor<S>) -> Result<Tensor<S>> {
        self.center.expect_same_shape(x_adv, "BallSpec::project")?;
        let mut out = x_adv.clone();
        for i in 0..out.rows() {
            let p = project_ball_box(x_adv.row(i), self.center.row(i), self.norm, self.eps, self.bounds);
            out.row_mut(i).copy_from_slice(&p);
        }
        Ok(out)
    }

    /// True when every row is feasible up to `tol`.
    pub fn contains(&self, x: &Tensor<S>, tol: f64) -> bool {
        let (lo, hi, t) = (S::of(self.bounds.lo), S::of(self.bounds.hi), S::of(tol));
        x.shape() == self.center.shape()
            && (0..x.rows()).all(|i| {
                let row = x.row(i);
                let delta: Vec<S> = row.iter().zip(self.center.row(i)).map(|(&a, &c)| a - c).collect();
                lp_norm(&delta, self.norm) <= S::of(self.eps) + t && row.iter().all(|&v| v >= lo - t && v <= hi + t)
            })
    }
}

pub fn lp_norm<S: Scalar>(v: &[S], norm: AttackNorm) -> S {
    match norm {
        AttackNorm::L1 => v.iter().map(|x| x.abs()).sum(),
        AttackNorm::L2 => v.iter().map(|&x| x * x).sum::<S>().sqrt(),
        AttackNorm::Linf => v.iter().fold(S::zero(), |m, x| m.max(x.abs())),
    }
}

/// Norms within summation rounding of `eps` count as inside, so that
/// projecting a projected point returns it unchanged.
fn within_radius<S: Scalar>(norm: S, eps: S, d: usize) -> bool {
    norm <= eps + eps * S::of_usize(d + 2) * S::epsilon()
}

/// Radial scaling onto the ℓ2 ball.
pub fn project_l2<S: Scalar>(v: &[S], eps: S) -> Vec<S> {
    let n = lp_norm(v, AttackNorm::L2);
    if within_radius(n, eps, v.len()) {
        return v.to_vec();
    }
    let s = eps / n;
    v.iter().map(|&x| x * s).collect()
}

/// Coordinate clamp onto the ℓ∞ ball.
pub fn project_linf<S: Scalar>(v: &[S], eps: S) -> Vec<S> {
    v.iter().map(|&x| x.max(-eps).min(eps)).collect()
}

/// Euclidean projection onto the ℓ1 ball by sorting magnitudes to find the
/// soft threshold θ, then shrinking `|v|` by θ and restoring signs.
pub fn project_l1<S: Scalar>(v: &[S], eps: S) -> Vec<S> {
    if within_radius(lp_norm(v, AttackNorm::L1), eps, v.len()) {
        return v.to_vec();
    }
    let mut u: Vec<S> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cumsum = S::zero();
    let mut theta = S::zero();
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - eps) / S::of_usize(j + 1);
        if uj > t {
            theta = t;
        } else {
            break;
        }
    }
    let mut out: Vec<S> = v
        .iter()
        .map(|&x| {
            let m = (x.abs() - theta).max(S::zero());
            if x < S::zero() {
                -m
            } else {
                m
            }
        })
        .collect();
    // Cancellation in |v| − θ can leave the result a few ulps of ‖v‖ outside.
    let n = lp_norm(&out, AttackNorm::L1);
    if !within_radius(n, eps, v.len()) {
        let s = eps / n;
        out.iter_mut().for_each(|x| *x *= s);
    }
    out
}

pub fn project<S: Scalar>(v: &[S], norm: AttackNorm, eps: S) -> Vec<S> {
    match norm {
        AttackNorm::L1 => project_l1(v, eps),
        AttackNorm::L2 => project_l2(v, eps),
        AttackNorm::Linf => project_linf(v, eps),
    }
}

/// Number of ball-then-box rounds used for ℓ1/ℓ2.
pub const BOX_ROUNDS: usize = 10;

/// Maps `x_adv` into `{‖x − center‖_p ≤ eps} ∩ [lo, hi]^d`.
///
/// For ℓ∞ the ball-then-clamp composition is the exact projection. For ℓ1/ℓ2
/// it alternates ball and box projections for [`BOX_ROUNDS`] rounds; since the
/// center is inside the box, clamping never moves a point away from the
/// center coordinate-wise, so the output is always feasible.
pub fn project_ball_box<S: Scalar>(x_adv: &[S], center: &[S], norm: AttackNorm, eps: f64, bounds: Bounds) -> Vec<S> {
    let (lo, hi, e) = (S::of(bounds.lo), S::of(bounds.hi), S::of(eps));
    let clamp = |y: &mut [S]| y.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
    let mut y = x_adv.to_vec();
    let rounds = if norm == AttackNorm::Linf { 1 } else { BOX_ROUNDS };
    for _ in 0..rounds {
        let delta: Vec<S> = y.iter().zip(center).map(|(&a, &c)| a - c).collect();
        let mut next: Vec<S> = project(&delta, norm, e)
            .iter()
            .zip(center)
            .map(|(&d, &c)| c + d)
            .collect();
        clamp(&mut next);
        if next == y {
            break;
        }
        y = next;
    }
    y
}

/// Natural log of the volume of the d-dimensional ℓp ball of radius `eps`:
/// `d·ln(2Γ(1+1/p)) − lnΓ(1+d/p) + d·ln(eps)`, with p = ∞ giving `d·ln(2·eps)`.
pub fn log_ball_volume(norm: AttackNorm, d: usize, eps: f64) -> f64 {
    let df = d as f64;
    match norm {
        AttackNorm::Linf => df * (2.0 * eps).ln(),
        AttackNorm::L1 | AttackNorm::L2 => {
            let p = if norm == AttackNorm::L1 { 1.0 } else { 2.0 };
            df * (std::f64::consts::LN_2 + libm::lgamma(1.0 + 1.0 / p)) - libm::lgamma(1.0 + df / p) + df * eps.ln()
        }
    }
}

/// Ordered key tradeoff pair: `q` is the norm whose correct subset anchors
/// the pairing loss, `r` the other one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPair {
    pub q: AttackNorm,
    pub r: AttackNorm,
}

impl KeyPair {
    pub fn new(q: AttackNorm, r: AttackNorm) -> Result<Self> {
        if q == r {
            return Err(Error::InvalidArgument(format!(
                "key pair needs two distinct norms, got {q}-{q}"
            )));
        }
        Ok(Self { q, r })
    }
}

impl fmt::Display for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.q, self.r)
    }
}

impl FromStr for KeyPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([',', '-', ' ']).filter(|p| !p.is_empty()).collect();
        match parts.as_slice() {
            [q, r] => KeyPair::new(q.parse()?, r.parse()?),
            _ => Err(Error::InvalidArgument(format!(
                "key pair must look like \"linf,l1\", got {s:?}"
            ))),
        }
    }
}

/// Picks the two norms with the largest ball log-volumes. `q` is the larger
/// of the two; exact ties prefer L∞, then L2, then L1. An explicit override is
/// returned unchanged.
pub fn select_key_pair(eps1: f64, eps2: f64, epsinf: f64, d: usize, override_pair: Option<KeyPair>) -> KeyPair {
    if let Some(p) = override_pair {
        return p;
    }
    let mut ranked: Vec<(f64, AttackNorm)> = [
        (log_ball_volume(AttackNorm::L1, d, eps1), AttackNorm::L1),
        (log_ball_volume(AttackNorm::L2, d, eps2), AttackNorm::L2),
        (log_ball_volume(AttackNorm::Linf, d, epsinf), AttackNorm::Linf),
    ]
    .to_vec();
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite volumes")
            .then(b.1.tie_rank().cmp(&a.1.tie_rank()))
    });
    KeyPair {
        q: ranked[0].1,
        r: ranked[1].1,
    }
}
