//! Rectified Adam.

use serde::{Deserialize, Serialize};

use crate::model::{ModelError, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RadamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RadamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment buffers are kept in f64 regardless of the parameter precision.
#[derive(Clone, Debug)]
pub struct Radam {
    pub config: RadamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Radam {
    pub fn new<R: Real>(params: &ParamSet<R>, config: RadamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Length of the approximated simple moving average at step `t`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2 = self.config.beta2;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// One update. `grads[i]` pairs with the i-th parameter; `None` leaves the
    /// parameter and its moments untouched.
    pub fn step<R: Real>(&mut self, params: &mut ParamSet<R>, grads: &[Option<Tensor<R>>]) -> Result<(), ModelError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(ModelError::Params(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let rho_t = self.rho(t);
        let rect = if rho_t > 5.0 {
            Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
        } else {
            None
        };
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &params.tensors()[i];
            if g.shape() != p.shape() {
                return Err(ModelError::Params(format!(
                    "{}: gradient {:?} vs parameter {:?}",
                    params.names()[i],
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut out = Vec::with_capacity(p.len());
            for (j, (&pj, &gj)) in p.data().iter().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let upd = match rect {
                    Some(r) => r * m_hat * bc2.sqrt() / (v[j].sqrt() + c.eps),
                    None => m_hat,
                };
                out.push(R::lit(pj.as_f64() - c.lr * upd));
            }
            params.set_index(i, Tensor::new(p.shape(), out)?);
        }
        Ok(())
    }
}
