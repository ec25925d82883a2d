//! SGD with heavy-ball momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mlp, ModelGrads};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state: per-parameter velocity buffers, allocated on the first
/// step.
///
/// Update rule per parameter: `v ← momentum·v + g + weight_decay·θ`,
/// `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    cfg: SgdConfig,
    lr: f64,
    velocity: Option<Vec<Vec<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            lr: cfg.learning_rate,
            velocity: None,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Overrides the current learning rate (schedules call this per epoch).
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, model: &mut Mlp<S>, grads: &ModelGrads<S>) -> Result<()> {
        let layers = model.layers_mut();
        if grads.layers.len() != layers.len() {
            return Err(Error::MissingGradient(format!(
                "expected gradients for {} layers, got {}",
                layers.len(),
                grads.layers.len()
            )));
        }
        for (l, (gw, gb)) in layers.iter().zip(&grads.layers) {
            if gw.shape() != l.weight.shape() || gb.shape() != l.bias.shape() {
                return Err(Error::MissingGradient(format!(
                    "gradient shape mismatch on layer {:?}",
                    l.name
                )));
            }
        }
        let velocity = self.velocity.get_or_insert_with(|| {
            layers
                .iter()
                .flat_map(|l| [vec![S::zero(); l.weight.len()], vec![S::zero(); l.bias.len()]])
                .collect()
        });
        let (mu, beta, wd) = (S::of(self.lr), S::of(self.cfg.momentum), S::of(self.cfg.weight_decay));
        let mut buf = velocity.iter_mut();
        for (l, (gw, gb)) in layers.iter_mut().zip(&grads.layers) {
            for (param, grad) in [(&mut l.weight, gw), (&mut l.bias, gb)] {
                let v = buf.next().expect("velocity allocated per parameter");
                for ((theta, vi), &g) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                    *vi = beta * *vi + g + wd * *theta;
                    *theta -= mu * *vi;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Dense};
    use crate::tensor::Tensor;

    fn scalar_model(theta: f64) -> Mlp<f64> {
        Mlp::from_layers(vec![Dense {
            name: "w".into(),
            weight: Tensor::from_f64(&[1, 1], &[theta]).unwrap(),
            bias: Tensor::zeros(&[1]),
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn grads(g: f64) -> ModelGrads<f64> {
        ModelGrads {
            layers: vec![(Tensor::from_f64(&[1, 1], &[g]).unwrap(), Tensor::zeros(&[1]))],
        }
    }

    fn weight(m: &Mlp<f64>) -> f64 {
        m.layers()[0].weight.item()
    }

    #[test]
    fn plain_step() {
        let mut m = scalar_model(1.0);
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        })
        .unwrap();
        opt.step(&mut m, &grads(2.0)).unwrap();
        assert!((weight(&m) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut m = scalar_model(0.37);
        let mut opt = Sgd::new(SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        })
        .unwrap();
        for _ in 0..3 {
            opt.step(&mut m, &grads(0.0)).unwrap();
        }
        assert_eq!(weight(&m), 0.37);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        let (lr, beta, wd) = (0.05, 0.9, 0.01);
        let gs = [0.4, -1.3, 2.2];
        let mut m = scalar_model(0.5);
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: lr,
            momentum: beta,
            weight_decay: wd,
            seed: 0,
        })
        .unwrap();
        for g in gs {
            opt.step(&mut m, &grads(g)).unwrap();
        }
        // hand-unrolled
        let mut theta: f64 = 0.5;
        let v1 = gs[0] + wd * theta;
        theta -= lr * v1;
        let v2 = beta * v1 + gs[1] + wd * theta;
        theta -= lr * v2;
        let v3 = beta * v2 + gs[2] + wd * theta;
        theta -= lr * v3;
        assert!((weight(&m) - theta).abs() < 1e-15);
    }

    #[test]
    fn rejects_missing_gradients_and_bad_config() {
        let mut m = scalar_model(1.0);
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        let empty = ModelGrads { layers: vec![] };
        assert!(matches!(opt.step(&mut m, &empty), Err(Error::MissingGradient(_))));
        assert!(Sgd::<f64>::new(SgdConfig {
            momentum: 1.0,
            ..SgdConfig::default()
        })
        .is_err());
    }
}
