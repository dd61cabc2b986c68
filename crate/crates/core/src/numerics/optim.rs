use serde::{Deserialize, Serialize};

use super::{NumericsError, Real, Tensor};

/// Update rule and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    /// Adam with the default moments and the given learning rate.
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr.is_finite() && lr > 0.0,
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr.is_finite()
                    && lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(NumericsError::InvalidArgument(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Optimizer state (Adam moments and step counter) for a fixed parameter list.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real> {
    config: OptimizerConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
    lr_scale: f64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
            lr_scale: 1.0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Multiplier applied to the configured learning rate from now on.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    /// Applies one update to `params` in place.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), NumericsError> {
        if params.len() != grads.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                let lr = T::from_f64(lr * self.lr_scale);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.steps as i32;
                let step_size = T::from_f64(lr * self.lr_scale / (1.0 - beta1.powi(t)));
                let v_correction = T::from_f64(1.0 / (1.0 - beta2.powi(t)));
                let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                let (c1, c2) = (T::one() - b1, T::one() - b2);
                let eps = T::from_f64(eps);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + c1 * d;
                        v[j] = b2 * v[j] + c2 * d * d;
                        *w -= step_size * m[j] / ((v[j] * v_correction).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
