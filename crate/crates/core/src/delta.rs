//! Parameter-space model updates.
//!
//! A [`ModelDelta`] maps every weight matrix and bias vector (named
//! `<layer>.weight` / `<layer>.bias`) to a flat vector. Differences taken with
//! [`model_delta`] also keep the exact rounding residual of each subtraction,
//! which lets [`apply_delta`] reproduce the `after` model bit for bit.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::scalar::{two_sum, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDelta<S> {
    values: IndexMap<String, Vec<S>>,
    // Exact residual `(after - before) - values`, present only on deltas
    // produced by `model_delta`.
    residual: Option<IndexMap<String, Vec<S>>>,
}

impl<S: Scalar> ModelDelta<S> {
    pub fn from_layers(values: IndexMap<String, Vec<S>>) -> Self {
        Self { values, residual: None }
    }

    pub fn zeros_like(model: &Mlp<S>) -> Self {
        Self::from_layers(
            param_names(model)
                .into_iter()
                .zip(param_lens(model))
                .map(|(n, len)| (n, vec![S::zero(); len]))
                .collect(),
        )
    }

    pub fn layer(&self, name: &str) -> Option<&[S]> {
        self.values.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[S])> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.values.values().map(Vec::len).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        self.values.values().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.values().flatten().all(|v| v.is_finite())
    }

    /// Same layer names in the same order with equal lengths.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|((ka, va), (kb, vb))| ka == kb && va.len() == vb.len())
    }

    pub(crate) fn residual(&self) -> Option<&IndexMap<String, Vec<S>>> {
        self.residual.as_ref()
    }

    pub(crate) fn with_residual(mut self, residual: Option<IndexMap<String, Vec<S>>>) -> Self {
        self.residual = residual;
        self
    }
}

fn param_names<S: Scalar>(model: &Mlp<S>) -> Vec<String> {
    model
        .layers()
        .iter()
        .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
        .collect()
}

fn param_lens<S: Scalar>(model: &Mlp<S>) -> Vec<usize> {
    model
        .layers()
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect()
}

fn params<S: Scalar>(model: &Mlp<S>) -> impl Iterator<Item = &[S]> {
    model.layers().iter().flat_map(|l| [l.weight.data(), l.bias.data()])
}

/// `after − before`, per named parameter tensor.
pub fn model_delta<S: Scalar>(after: &Mlp<S>, before: &Mlp<S>) -> Result<ModelDelta<S>> {
    if !after.same_architecture(before) {
        return Err(Error::Architecture(
            "model_delta needs two models with identical architectures".into(),
        ));
    }
    let mut values = IndexMap::new();
    let mut residual = IndexMap::new();
    for ((name, a), b) in param_names(after).into_iter().zip(params(after)).zip(params(before)) {
        let (hi, lo): (Vec<S>, Vec<S>) = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                // x - y = d + r exactly
                two_sum(x, -y)
            })
            .unzip();
        values.insert(name.clone(), hi);
        residual.insert(name, lo);
    }
    Ok(ModelDelta::from_layers(values).with_residual(Some(residual)))
}

/// `model + delta`. When the delta came from [`model_delta`], the stored
/// residual is folded back in with compensated addition so that
/// `apply_delta(before, model_delta(after, before)) == after` exactly.
pub fn apply_delta<S: Scalar>(model: &Mlp<S>, delta: &ModelDelta<S>) -> Result<Mlp<S>> {
    let names = param_names(model);
    let lens = param_lens(model);
    if delta.len() != names.len()
        || names
            .iter()
            .zip(&lens)
            .any(|(n, &len)| delta.layer(n).map(<[S]>::len) != Some(len))
    {
        return Err(Error::Architecture("delta layer set does not match the model".into()));
    }
    let mut out = model.clone();
    let mut name_iter = names.iter();
    for layer in out.layers_mut() {
        for tensor in [&mut layer.weight, &mut layer.bias] {
            let name = name_iter.next().expect("two names per layer");
            let d = delta.layer(name).expect("checked above");
            let r = delta.residual().and_then(|r| r.get(name));
            for (i, (theta, &hi)) in tensor.data_mut().iter_mut().zip(d).enumerate() {
                *theta = match r {
                    Some(r) => {
                        let (s, e) = two_sum(*theta, hi);
                        s + (e + r[i])
                    }
                    None => *theta + hi,
                };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_models_give_zero_delta() {
        let m = Mlp::<f64>::init(&[3, 4, 2], 1).unwrap();
        let d = model_delta(&m, &m).unwrap();
        assert!(d.flatten().iter().all(|&v| v == 0.0));
        assert_eq!(
            d.names().collect::<Vec<_>>(),
            ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
        );
    }

    #[test]
    fn single_entry_change() {
        let before = Mlp::<f64>::init(&[2, 3, 2], 2).unwrap();
        let mut after = before.clone();
        after.layers_mut()[1].weight.data_mut()[4] += 0.5;
        let d = model_delta(&after, &before).unwrap();
        for (name, v) in d.iter() {
            for (i, &x) in v.iter().enumerate() {
                if name == "fc2.weight" && i == 4 {
                    assert!((x - 0.5).abs() < 1e-15);
                } else {
                    assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn inverse_pair_is_bit_exact_on_hard_cases() {
        let before = Mlp::<f64>::init(&[1, 1], 0).unwrap();
        let mut after = before.clone();
        for (b, a) in [(1.0, 1e-20), (1e16, 1.0), (-3.0, 0.1), (0.1, 0.3)] {
            let mut before = before.clone();
            before.layers_mut()[0].weight.data_mut()[0] = b;
            after.layers_mut()[0].weight.data_mut()[0] = a;
            let d = model_delta(&after, &before).unwrap();
            assert_eq!(apply_delta(&before, &d).unwrap(), after);
        }
    }

    #[test]
    fn architecture_mismatch() {
        let a = Mlp::<f64>::init(&[2, 3, 2], 0).unwrap();
        let b = Mlp::<f64>::init(&[2, 4, 2], 0).unwrap();
        assert!(model_delta(&a, &b).is_err());
        let d = ModelDelta::zeros_like(&b);
        assert!(apply_delta(&a, &d).is_err());
    }
}
