//! First-order optimizers over named parameter sets.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::{archive_from_bytes, archive_to_bytes};
use crate::params::{is_buffer, NamedTensors};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with per-parameter state (Adam moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Scalar = f32> {
    pub config: OptimizerConfig,
    pub step: u64,
    first: NamedTensors<T>,
    second: NamedTensors<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            first: NamedTensors::new(),
            second: NamedTensors::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Buffers
    /// and parameters without gradients are left untouched.
    pub fn update(
        &mut self,
        params: &mut NamedTensors<T>,
        grads: &NamedTensors<T>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let lr = T::lit(lr);
        for (name, g) in grads.iter() {
            if is_buffer(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.dims() != g.dims() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has dims {:?}, parameter {:?}",
                    g.dims(),
                    p.dims()
                )));
            }
            match self.config {
                OptimizerConfig::Sgd => {
                    for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *v -= lr * d;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    if !self.first.contains(name) {
                        self.first.insert(name, Tensor::zeros(p.dims()));
                        self.second.insert(name, Tensor::zeros(p.dims()));
                    }
                    let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                    let c1 = T::one() - T::lit(beta1.powi(self.step as i32));
                    let c2 = T::one() - T::lit(beta2.powi(self.step as i32));
                    let m = self.first.get_mut(name)?.data_mut();
                    for (mv, &d) in m.iter_mut().zip(g.data()) {
                        *mv = b1 * *mv + (T::one() - b1) * d;
                    }
                    let v = self.second.get_mut(name)?.data_mut();
                    for (vv, &d) in v.iter_mut().zip(g.data()) {
                        *vv = b2 * *vv + (T::one() - b2) * d * d;
                    }
                    let (m, v) = (self.first.get(name)?, self.second.get(name)?);
                    for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                        *pv -= lr * (mv / c1) / ((vv / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut all = NamedTensors::new();
        for (name, t) in self.first.iter() {
            all.insert(format!("m/{name}"), t.clone());
        }
        for (name, t) in self.second.iter() {
            all.insert(format!("v/{name}"), t.clone());
        }
        archive_to_bytes(
            &all,
            serde_json::json!({"config": self.config, "step": self.step}),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (all, meta) = archive_from_bytes::<T>(bytes)?;
        let config = serde_json::from_value(meta.get("config").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Archive(format!("optimizer config: {e}")))?;
        let step = meta
            .get("step")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Archive("optimizer step missing".into()))?;
        let mut opt = Optimizer::new(config);
        opt.step = step;
        for (name, t) in all.iter() {
            if let Some(n) = name.strip_prefix("m/") {
                opt.first.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix("v/") {
                opt.second.insert(n, t.clone());
            } else {
                return Err(Error::Archive(format!(
                    "unexpected optimizer tensor `{name}`"
                )));
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = NamedTensors::<f64>::new();
        p.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap(),
        );
        let mut g = NamedTensors::new();
        g.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 2], vec![0.3, -5.0]).unwrap(),
        );
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.update(&mut p, &g, 0.01).unwrap();
        let w = p.get("w").unwrap().data().to_vec();
        assert!(
            (w[0] - 0.99).abs() < 1e-6 && (w[1] + 0.99).abs() < 1e-6,
            "{w:?}"
        );
    }

    #[test]
    fn sgd_step() {
        let mut p = NamedTensors::<f64>::new();
        p.insert("w", Tensor::scalar(1.0));
        let mut g = NamedTensors::new();
        g.insert("w", Tensor::scalar(2.0));
        Optimizer::new(OptimizerConfig::Sgd)
            .update(&mut p, &g, 0.1)
            .unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let mut p = NamedTensors::<f32>::new();
        p.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
        );
        let mut g = NamedTensors::new();
        g.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 3], vec![0.1, -0.2, 0.3]).unwrap(),
        );
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.update(&mut p, &g, 0.01).unwrap();
        let back = Optimizer::<f32>::from_bytes(&opt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, opt);
    }
}
