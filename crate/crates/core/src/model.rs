//! Multilayer perceptrons over [`Tensor`]s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer computing `act(x · W + b)` with `W` stored
/// `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub name: String,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub activation: Activation,
}

impl<S: Scalar> Dense<S> {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Stack of dense layers ending in an identity (logit) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    layers: Vec<Dense<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// Validates and assembles a model from explicit layers.
    pub fn from_layers(layers: Vec<Dense<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.fan_out() {
                return Err(Error::Architecture(format!(
                    "layer {:?}: weight {:?} incompatible with bias {:?}",
                    l.name,
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(Error::Architecture(format!(
                    "layer {:?} expects {} inputs but previous layer emits {}",
                    l.name,
                    l.fan_in(),
                    layers[i - 1].fan_out()
                )));
            }
            if layers[..i].iter().any(|p| p.name == l.name) {
                return Err(Error::Architecture(format!("duplicate layer name {:?}", l.name)));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Architecture(
                "final layer must emit logits (identity activation)".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Seeded initialization for `sizes = [input, hidden.., classes]`:
    /// He-uniform weights on relu layers, Glorot-uniform on the logit layer,
    /// zero biases. Layers are named `fc1`, `fc2`, ...
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Architecture(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fin, fout) = (sizes[i], sizes[i + 1]);
                let last = i + 1 == n_layers;
                let limit = if last {
                    (6.0 / (fin + fout) as f64).sqrt()
                } else {
                    (6.0 / fin as f64).sqrt()
                };
                let w = (0..fin * fout)
                    .map(|_| S::of(rng.random_range(-limit..limit)))
                    .collect();
                Dense {
                    name: format!("fc{}", i + 1),
                    weight: Tensor::matrix(fin, fout, w).expect("sizes are positive"),
                    bias: Tensor::zeros(&[fout]),
                    activation: if last { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<S>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Layer sizes `[input, hidden.., classes]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::fan_out))
            .collect()
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.weight.shape() == b.weight.shape()
                    && a.bias.shape() == b.bias.shape()
                    && a.activation == b.activation
            })
    }

    fn check_input(&self, batch: &Tensor<S>) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(dim_err(
                "forward",
                format!("[N×{}]", self.input_dim()),
                format!("{:?}", batch.shape()),
            ));
        }
        Ok(())
    }

    /// Inference-only forward pass; records nothing.
    pub fn forward(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            let m = layer.fan_out();
            let b = layer.bias.data();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v += b[i % m];
                if layer.activation == Activation::Relu && *v < S::zero() {
                    *v = S::zero();
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Adds every weight and bias to `g` as leaves. With `trainable = false`
    /// the parameters are constants (used when only input gradients matter).
    pub fn register(&self, g: &mut Graph<S>, trainable: bool) -> ParamVars {
        ParamVars {
            vars: self
                .layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
                .collect(),
        }
    }

    /// Recorded forward pass using previously registered parameters.
    pub fn forward_graph(&self, g: &mut Graph<S>, params: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(g.value(x))?;
        if params.vars.len() != self.layers.len() {
            return Err(Error::Architecture("parameter handles do not match model".into()));
        }
        let mut h = x;
        for (layer, &(w, b)) in self.layers.iter().zip(&params.vars) {
            let z = g.matmul(h, w)?;
            let z = g.add_bias(z, b)?;
            h = match layer.activation {
                Activation::Relu => g.relu(z),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    /// Predicted class per row (ties to the lowest index).
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch)?))
    }

    /// Flattens all parameters in layer order (weight then bias).
    pub fn flat_params(&self) -> Vec<S> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }
}

/// Graph handles for a model's `(weight, bias)` pairs.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Collects parameter gradients after `g.backward`.
    pub fn grads<S: Scalar>(&self, g: &Graph<S>, model: &Mlp<S>) -> Result<ModelGrads<S>> {
        let layers = self
            .vars
            .iter()
            .zip(model.layers())
            .map(|(&(w, b), l)| {
                let gw = g
                    .grad(w)
                    .ok_or_else(|| Error::MissingGradient(format!("{}.weight", l.name)))?;
                let gb = g
                    .grad(b)
                    .ok_or_else(|| Error::MissingGradient(format!("{}.bias", l.name)))?;
                Ok((gw.clone(), gb.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(ModelGrads { layers })
    }
}

/// Per-layer `(dW, db)` gradients, aligned with [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<S> {
    pub layers: Vec<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> ModelGrads<S> {
    pub fn flatten(&self) -> Vec<S> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }
}

/// Index of the row maximum for each row; ties resolve to the lowest index.
pub fn argmax_rows<S: Scalar>(m: &Tensor<S>) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer_forward() {
        let m = Mlp::from_layers(vec![Dense {
            name: "out".into(),
            weight: Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap(),
            bias: Tensor::zeros(&[2]),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        // hidden = relu(w·x) with w = [1, -1]; output sums the hidden units
        let m = Mlp::from_layers(vec![
            Dense {
                name: "h".into(),
                weight: Tensor::<f64>::from_f64(&[1, 2], &[1., -1.]).unwrap(),
                bias: Tensor::zeros(&[2]),
                activation: Activation::Relu,
            },
            Dense {
                name: "out".into(),
                weight: Tensor::from_f64(&[2, 1], &[1., 0.]).unwrap(),
                bias: Tensor::zeros(&[1]),
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        let x = Tensor::from_f64(&[1, 1], &[-3.]).unwrap();
        // relu(-3) = 0 on the first unit which is the only one read out
        assert_eq!(m.forward(&x).unwrap().data(), &[0.]);
    }

    #[test]
    fn architecture_validation() {
        assert!(Mlp::<f64>::init(&[3], 0).is_err());
        let m = Mlp::<f64>::init(&[3, 4, 2], 0).unwrap();
        assert_eq!(m.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(m.sizes(), vec![3, 4, 2]);
        let mut layers = m.layers().to_vec();
        layers[1].name = "fc1".into();
        assert!(Mlp::from_layers(layers).is_err());
        let mut layers = m.layers().to_vec();
        layers[1].activation = Activation::Relu;
        assert!(Mlp::from_layers(layers).is_err());
        let bad = Tensor::zeros(&[2, 2]);
        assert!(matches!(m.forward(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn init_is_seeded() {
        let a = Mlp::<f64>::init(&[5, 8, 3], 11).unwrap();
        let b = Mlp::<f64>::init(&[5, 8, 3], 11).unwrap();
        let c = Mlp::<f64>::init(&[5, 8, 3], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let m = Tensor::<f64>::from_f64(&[2, 3], &[1., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(argmax_rows(&m), vec![0, 1]);
    }
}
