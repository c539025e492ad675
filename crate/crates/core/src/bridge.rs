//! Gaussian Schrödinger bridge with a variance-exploding reference process.
//!
//! With `f = 0` and `g(t)^2 = 2 ln(smax/smin) smin^2 (smax/smin)^{2t}` the
//! marginal between paired endpoints `x0` (clean) and `x1` (degraded) is
//! Gaussian with
//!
//! ```text
//! mean = (sbar_t^2 / s_T^2) x0 + (s_t^2 / s_T^2) x1,   std = s_t sbar_t / s_T
//! ```
//!
//! where `s_t^2 = int_0^t g^2` and `sbar_t^2 = s_T^2 - s_t^2`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("time {t} outside [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_max: f64,
}

impl Default for BridgeSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.03,
            sigma_max: 1.0,
            t_max: 1.0,
        }
    }
}

/// Coefficients of the bridge marginal at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalCoefs {
    pub x0: f64,
    pub x1: f64,
    pub std: f64,
}

impl BridgeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self, BridgeError> {
        let s = Self {
            sigma_min,
            sigma_max,
            t_max: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(BridgeError::Schedule(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.t_max != 1.0 {
            return Err(BridgeError::Schedule(format!("T is fixed at 1.0, got {}", self.t_max)));
        }
        Ok(())
    }

    fn check(&self, t: f64) -> Result<(), BridgeError> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(BridgeError::Domain {
                t,
                lo: 0.0,
                hi: self.t_max,
            });
        }
        Ok(())
    }

    fn ratio(&self) -> f64 {
        self.sigma_max / self.sigma_min
    }

    /// Squared diffusion coefficient `g(t)^2`.
    pub fn g_squared(&self, t: f64) -> Result<f64, BridgeError> {
        self.check(t)?;
        let k = self.ratio();
        Ok(2.0 * k.ln() * self.sigma_min * self.sigma_min * k.powf(2.0 * t))
    }

    /// Accumulated variance `s_t^2 = smin^2 ((smax/smin)^{2t} - 1)`.
    pub fn sigma_sq(&self, t: f64) -> Result<f64, BridgeError> {
        self.check(t)?;
        Ok(self.sigma_sq_unchecked(t))
    }

    fn sigma_sq_unchecked(&self, t: f64) -> f64 {
        self.sigma_min * self.sigma_min * (self.ratio().powf(2.0 * t) - 1.0)
    }

    /// `s_T^2`, computed with the same expression as [`Self::sigma_sq`] so that
    /// `sbar_T^2` is exactly zero.
    pub fn sigma_sq_total(&self) -> f64 {
        self.sigma_sq_unchecked(self.t_max)
    }

    /// Remaining variance `sbar_t^2 = s_T^2 - s_t^2`, clamped at zero.
    pub fn sigma_bar_sq(&self, t: f64) -> Result<f64, BridgeError> {
        Ok((self.sigma_sq_total() - self.sigma_sq(t)?).max(0.0))
    }

    pub fn coefs(&self, t: f64) -> Result<MarginalCoefs, BridgeError> {
        let total = self.sigma_sq_total();
        let s2 = self.sigma_sq(t)?;
        let sb2 = self.sigma_bar_sq(t)?;
        Ok(MarginalCoefs {
            x0: sb2 / total,
            x1: s2 / total,
            std: (s2 * sb2).sqrt() / total.sqrt(),
        })
    }

    /// Mean of the marginal at `t` for endpoints `x0`, `x1`.
    pub fn mean<R: Real>(&self, x0: &Tensor<R>, x1: &Tensor<R>, t: f64) -> Result<Tensor<R>, BridgeError> {
        if t == 0.0 {
            return Ok(x0.clone());
        }
        if t == self.t_max {
            return Ok(x1.clone());
        }
        let c = self.coefs(t)?;
        let (a, b) = (R::lit(c.x0), R::lit(c.x1));
        Ok(x0.zip_map(x1, |p, q| a * p + b * q)?)
    }

    /// Bridge sample `x_t = mean + std * noise`. Endpoints are returned
    /// bit-for-bit.
    pub fn marginal<R: Real>(
        &self,
        x0: &Tensor<R>,
        x1: &Tensor<R>,
        t: f64,
        noise: &Tensor<R>,
    ) -> Result<Tensor<R>, BridgeError> {
        if x0.shape() != x1.shape() || x0.shape() != noise.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "marginal",
                lhs: x0.shape().to_vec(),
                rhs: if x0.shape() != x1.shape() { x1.shape() } else { noise.shape() }.to_vec(),
            }
            .into());
        }
        self.check(t)?;
        if t == 0.0 || t == self.t_max {
            return self.mean(x0, x1, t);
        }
        let c = self.coefs(t)?;
        let (a, b, s) = (R::lit(c.x0), R::lit(c.x1), R::lit(c.std));
        let data = x0
            .data()
            .iter()
            .zip(x1.data())
            .zip(noise.data())
            .map(|((&p, &q), &z)| a * p + b * q + s * z)
            .collect();
        Ok(Tensor::new(x0.shape(), data)?)
    }
}

/// Applies `f(row, t_row)` to each leading-axis row of a batch.
fn per_row<R: Real>(
    out_shape: &[usize],
    times: &[f64],
    mut f: impl FnMut(usize, f64, &mut [R]) -> Result<(), BridgeError>,
) -> Result<Tensor<R>, BridgeError> {
    let batch = out_shape.first().copied().unwrap_or(0);
    if times.len() != batch {
        return Err(BridgeError::Schedule(format!("{} times for batch of {batch}", times.len())));
    }
    let n: usize = out_shape.iter().product();
    let row = if batch == 0 { 0 } else { n / batch };
    let mut data = vec![R::zero(); n];
    for (b, &t) in times.iter().enumerate() {
        f(b, t, &mut data[b * row..(b + 1) * row])?;
    }
    Ok(Tensor::new(out_shape, data)?)
}

impl BridgeSchedule {
    /// [`Self::mean`] with one time per leading-axis row.
    pub fn mean_batch<R: Real>(&self, x0: &Tensor<R>, x1: &Tensor<R>, t: &[f64]) -> Result<Tensor<R>, BridgeError> {
        if x0.shape() != x1.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mean_batch",
                lhs: x0.shape().to_vec(),
                rhs: x1.shape().to_vec(),
            }
            .into());
        }
        let row = x0.len() / x0.shape()[0].max(1);
        per_row(x0.shape(), t, |b, tb, out| {
            self.check(tb)?;
            let (p, q) = (&x0.data()[b * row..(b + 1) * row], &x1.data()[b * row..(b + 1) * row]);
            if tb == 0.0 {
                out.copy_from_slice(p);
            } else if tb == self.t_max {
                out.copy_from_slice(q);
            } else {
                let c = self.coefs(tb)?;
                let (a, bb) = (R::lit(c.x0), R::lit(c.x1));
                for ((o, &pv), &qv) in out.iter_mut().zip(p).zip(q) {
                    *o = a * pv + bb * qv;
                }
            }
            Ok(())
        })
    }

    /// [`Self::marginal`] with one time per leading-axis row.
    pub fn marginal_batch<R: Real>(
        &self,
        x0: &Tensor<R>,
        x1: &Tensor<R>,
        t: &[f64],
        noise: &Tensor<R>,
    ) -> Result<Tensor<R>, BridgeError> {
        if noise.shape() != x0.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "marginal_batch",
                lhs: x0.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            }
            .into());
        }
        let mean = self.mean_batch(x0, x1, t)?;
        let row = x0.len() / x0.shape()[0].max(1);
        per_row(x0.shape(), t, |b, tb, out| {
            let m = &mean.data()[b * row..(b + 1) * row];
            out.copy_from_slice(m);
            if tb > 0.0 && tb < self.t_max {
                let s = R::lit(self.coefs(tb)?.std);
                for (o, &z) in out.iter_mut().zip(&noise.data()[b * row..(b + 1) * row]) {
                    *o += s * z;
                }
            }
            Ok(())
        })
    }

    /// Deterministic first-order step from `t` to `u` given a clean-endpoint
    /// estimate:
    /// `x_u = mean(x0_hat, y, u) + (std_u / std_t) (x_t - mean(x0_hat, y, t))`.
    ///
    /// `std_t = 0` (at `t = T`) drops the residual term; `u == t` returns `x_t`.
    pub fn solver_update<R: Real>(
        &self,
        x_t: &Tensor<R>,
        x0_hat: &Tensor<R>,
        y: &Tensor<R>,
        t: &[f64],
        u: &[f64],
    ) -> Result<Tensor<R>, BridgeError> {
        if x_t.shape() != x0_hat.shape() || x_t.shape() != y.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "solver_update",
                lhs: x_t.shape().to_vec(),
                rhs: x0_hat.shape().to_vec(),
            }
            .into());
        }
        if t.len() != u.len() {
            return Err(BridgeError::Schedule("t and u lengths differ".into()));
        }
        for (&tb, &ub) in t.iter().zip(u) {
            if ub > tb || ub < 0.0 {
                return Err(BridgeError::Domain { t: ub, lo: 0.0, hi: tb });
            }
        }
        let m_t = self.mean_batch(x0_hat, y, t)?;
        let m_u = self.mean_batch(x0_hat, y, u)?;
        let row = x_t.len() / x_t.shape()[0].max(1);
        per_row(x_t.shape(), t, |b, tb, out| {
            let r = b * row..(b + 1) * row;
            let ub = u[b];
            if ub == tb {
                out.copy_from_slice(&x_t.data()[r]);
                return Ok(());
            }
            let (std_t, std_u) = (self.coefs(tb)?.std, self.coefs(ub)?.std);
            let ratio = if std_t > 0.0 { R::lit(std_u / std_t) } else { R::zero() };
            for (((o, &mu), &mt), &x) in out.iter_mut().zip(&m_u.data()[r.clone()]).zip(&m_t.data()[r.clone()]).zip(&x_t.data()[r]) {
                *o = mu + ratio * (x - mt);
            }
            Ok(())
        })
    }
}

/// Standard normal draw of a given shape.
pub fn gaussian<R: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<R> {
    Tensor::from_fn(shape, |_| R::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Descending discretisation `t_0 = sigma_max > ... > t_{N-1} = sigma_min`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub rho: f64,
    values: Vec<f64>,
}

impl TimeGrid {
    /// `t_i = (smax^{1/rho} + i/(N-1) (smin^{1/rho} - smax^{1/rho}))^rho`,
    /// with both endpoints pinned to their exact values.
    pub fn new(n: usize, rho: f64, sigma_min: f64, sigma_max: f64) -> Result<Self, BridgeError> {
        if n < 2 {
            return Err(BridgeError::Schedule(format!("grid needs N >= 2, got {n}")));
        }
        if !(rho > 0.0) {
            return Err(BridgeError::Schedule(format!("rho must be > 0, got {rho}")));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max) {
            return Err(BridgeError::Schedule(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        let hi = sigma_max.powf(1.0 / rho);
        let lo = sigma_min.powf(1.0 / rho);
        let mut values: Vec<f64> = (0..n)
            .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(rho))
            .collect();
        values[0] = sigma_max;
        values[n - 1] = sigma_min;
        Ok(Self { rho, values })
    }

    pub fn from_schedule(n: usize, rho: f64, schedule: &BridgeSchedule) -> Result<Self, BridgeError> {
        Self::new(n, rho, schedule.sigma_min, schedule.sigma_max)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest grid time (the degraded-signal end).
    pub fn t_start(&self) -> f64 {
        self.values[0]
    }

    /// `nfe` evenly spaced indices `round(i (N-1) / (nfe-1))` from the top of
    /// the grid to the bottom; `[0]` for one step.
    pub fn even_indices(&self, nfe: usize) -> Result<Vec<usize>, BridgeError> {
        let n = self.values.len();
        if nfe == 0 || nfe > n {
            return Err(BridgeError::Schedule(format!("need 1 <= nfe <= {n}, got {nfe}")));
        }
        if nfe == 1 {
            return Ok(vec![0]);
        }
        Ok((0..nfe)
            .map(|i| ((i * (n - 1)) as f64 / (nfe - 1) as f64).round() as usize)
            .collect())
    }

    /// Smallest usable time.
    pub fn t_min(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}
