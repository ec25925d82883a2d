//! Layer-wise gradient projection between a natural-training update `ĝ_n`
//! and an adversarial update `ĝ_a`, and the β-blended model update
//! `f + β·g_p + (1−β)·ĝ_a`.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::delta::{apply_delta, ModelDelta};
use crate::error::{dim_err, Error, Result};
use crate::model::Mlp;
use crate::scalar::{dot, sq_norm, Scalar};

/// Norms below this count as zero.
pub const NORM_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpVariant {
    /// `cos(ĝ_n, ĝ_a)·ĝ_n` when the cosine is positive, else zero.
    #[default]
    Cosine,
    /// `max(⟨ĝ_a, ĝ_n⟩, 0)·ĝ_n/‖ĝ_n‖²`.
    ProjPlus,
}

impl fmt::Display for GpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GpVariant::Cosine => "cosine",
            GpVariant::ProjPlus => "proj_plus",
        })
    }
}

impl FromStr for GpVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cosine" | "cos" => Ok(GpVariant::Cosine),
            "proj_plus" | "proj" => Ok(GpVariant::ProjPlus),
            other => Err(Error::InvalidArgument(format!("unknown GP variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub beta: f64,
    pub variant: GpVariant,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            variant: GpVariant::Cosine,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// `a·b/(‖a‖‖b‖)`, or 0 when either norm is below [`NORM_FLOOR`].
pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "cosine_similarity needs equal lengths");
    let (na, nb) = (sq_norm(a).sqrt(), sq_norm(b).sqrt());
    let floor = S::of(NORM_FLOOR);
    if na < floor || nb < floor {
        return S::zero();
    }
    dot(a, b) / (na * nb)
}

/// The projected (useful) part of `g_n` for one layer.
pub fn gp_layer<S: Scalar>(g_n: &[S], g_a: &[S], variant: GpVariant) -> Vec<S> {
    assert_eq!(g_n.len(), g_a.len(), "gp_layer needs equal lengths");
    let coef = match variant {
        GpVariant::Cosine => cosine_similarity(g_n, g_a),
        GpVariant::ProjPlus => {
            let nn = sq_norm(g_n);
            if nn.sqrt() < S::of(NORM_FLOOR) {
                S::zero()
            } else {
                dot(g_a, g_n) / nn
            }
        }
    };
    if coef > S::zero() {
        g_n.iter().map(|&v| coef * v).collect()
    } else {
        vec![S::zero(); g_n.len()]
    }
}

/// [`gp_layer`] applied to every named parameter tensor.
pub fn project_delta<S: Scalar>(g_n: &ModelDelta<S>, g_a: &ModelDelta<S>, variant: GpVariant) -> Result<ModelDelta<S>> {
    if !g_n.same_layout(g_a) {
        return Err(Error::Architecture("project_delta needs matching layer sets".into()));
    }
    Ok(ModelDelta::from_layers(
        g_n.iter()
            .zip(g_a.iter())
            .map(|((name, n), (_, a))| (name.to_string(), gp_layer(n, a, variant)))
            .collect(),
    ))
}

/// Per-layer cosine between the two updates (reported in run logs).
pub fn layer_cosines<S: Scalar>(g_n: &ModelDelta<S>, g_a: &ModelDelta<S>) -> Result<IndexMap<String, S>> {
    if !g_n.same_layout(g_a) {
        return Err(Error::Architecture("layer_cosines needs matching layer sets".into()));
    }
    Ok(g_n
        .iter()
        .zip(g_a.iter())
        .map(|((name, n), (_, a))| (name.to_string(), cosine_similarity(n, a)))
        .collect())
}

/// `f_r + β·g_p + (1−β)·g_a`. At β = 0 this is exactly `apply_delta(f_r, g_a)`.
pub fn blended_update<S: Scalar>(f_r: &Mlp<S>, g_p: &ModelDelta<S>, g_a: &ModelDelta<S>, beta: f64) -> Result<Mlp<S>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    if beta == 0.0 {
        return apply_delta(f_r, g_a);
    }
    if !g_p.same_layout(g_a) {
        return Err(dim_err("blended_update", "matching g_p and g_a layers", "mismatch"));
    }
    let (b, a) = (S::of(beta), S::of(1.0 - beta));
    let mixed = ModelDelta::from_layers(
        g_p.iter()
            .zip(g_a.iter())
            .map(|((name, p), (_, q))| {
                (
                    name.to_string(),
                    p.iter().zip(q).map(|(&x, &y)| b * x + a * y).collect(),
                )
            })
            .collect(),
    );
    apply_delta(f_r, &mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]) - 1.0f64).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]) - FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn gp_layer_examples() {
        let v = gp_layer(&[1.0, 0.0], &[1.0, 1.0], GpVariant::Cosine);
        assert!((v[0] - FRAC_1_SQRT_2).abs() < 1e-15 && v[1] == 0.0);
        for variant in [GpVariant::Cosine, GpVariant::ProjPlus] {
            assert_eq!(gp_layer(&[1.0, 0.0], &[-1.0, 0.0], variant), vec![0.0, 0.0]);
        }
        assert_eq!(gp_layer(&[1.0, 0.0], &[1.0, 1.0], GpVariant::ProjPlus), vec![1.0, 0.0]);
        assert_eq!(gp_layer(&[0.0, 0.0], &[1.0, 1.0], GpVariant::ProjPlus), vec![0.0, 0.0]);
    }

    fn delta(layers: &[(&str, &[f64])]) -> ModelDelta<f64> {
        ModelDelta::from_layers(layers.iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect())
    }

    #[test]
    fn project_delta_keeps_positive_layers() {
        let g_n = delta(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let g_a = delta(&[("a", &[2.0, 0.1]), ("b", &[0.0, -3.0])]);
        let p = project_delta(&g_n, &g_a, GpVariant::Cosine).unwrap();
        assert!(p.layer("a").unwrap()[0] > 0.0);
        assert_eq!(p.layer("b").unwrap(), &[0.0, 0.0]);
        let bad = delta(&[("a", &[1.0, 0.0])]);
        assert!(project_delta(&bad, &g_a, GpVariant::Cosine).is_err());
    }

    #[test]
    fn blend_is_linear() {
        let m = Mlp::<f64>::init(&[1, 2], 0).unwrap();
        let mut zero = m.clone();
        for l in zero.layers_mut() {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g_p = delta(&[("fc1.weight", &[1.0, 0.0]), ("fc1.bias", &[0.0, 0.0])]);
        let g_a = delta(&[("fc1.weight", &[0.0, 1.0]), ("fc1.bias", &[0.0, 0.0])]);
        let out = blended_update(&zero, &g_p, &g_a, 0.5).unwrap();
        assert_eq!(out.layers()[0].weight.data(), &[0.5, 0.5]);
        assert!(blended_update(&zero, &g_p, &g_a, 1.5).is_err());
    }
}
