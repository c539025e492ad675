//! Optional magnitude compression applied to spectrograms before the network.

use serde::{Deserialize, Serialize};

use super::{SignalError, Spectrogram};
use crate::tensor::{Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpecTransform {
    #[default]
    Identity,
    /// `z -> alpha * |z|^exponent * e^{i arg z}`
    PowerLaw { alpha: f64, exponent: f64 },
}

impl SpecTransform {
    pub fn validate(&self) -> Result<(), SignalError> {
        match *self {
            SpecTransform::Identity => Ok(()),
            SpecTransform::PowerLaw { alpha, exponent } => {
                if !(exponent > 0.0) {
                    return Err(SignalError::Transform(format!("exponent must be > 0, got {exponent}")));
                }
                if !(alpha > 0.0) {
                    return Err(SignalError::Transform(format!("alpha must be > 0, got {alpha}")));
                }
                Ok(())
            }
        }
    }

    pub fn forward<R: Real>(&self, spec: &Spectrogram<R>) -> Result<Spectrogram<R>, SignalError> {
        self.validate()?;
        match *self {
            SpecTransform::Identity => Ok(spec.clone()),
            SpecTransform::PowerLaw { alpha, exponent } => Ok(spec.with_values(rescale(&spec.values, |m| {
                alpha * m.powf(exponent)
            }))),
        }
    }

    pub fn inverse<R: Real>(&self, spec: &Spectrogram<R>) -> Result<Spectrogram<R>, SignalError> {
        self.validate()?;
        match *self {
            SpecTransform::Identity => Ok(spec.clone()),
            SpecTransform::PowerLaw { alpha, exponent } => Ok(spec.with_values(rescale(&spec.values, |m| {
                (m / alpha).powf(1.0 / exponent)
            }))),
        }
    }
}

impl SpecTransform {
    /// Forward map on raw `[B, 2, F, K]` values.
    pub fn forward_values<R: Real>(&self, values: &Tensor<R>) -> Tensor<R> {
        match *self {
            SpecTransform::Identity => values.clone(),
            SpecTransform::PowerLaw { alpha, exponent } => rescale(values, |m| alpha * m.powf(exponent)),
        }
    }

    /// Inverse map on raw `[B, 2, F, K]` values.
    pub fn inverse_values<R: Real>(&self, values: &Tensor<R>) -> Tensor<R> {
        match *self {
            SpecTransform::Identity => values.clone(),
            SpecTransform::PowerLaw { alpha, exponent } => rescale(values, |m| (m / alpha).powf(1.0 / exponent)),
        }
    }

    /// Differentiable inverse: `z |z|^{1/e - 1} / alpha^{1/e}`.
    pub fn inverse_var<'g, R: Real>(&self, z: Var<'g, R>) -> Result<Var<'g, R>, TensorError> {
        match *self {
            SpecTransform::Identity => Ok(z),
            SpecTransform::PowerLaw { alpha, exponent } => {
                let m = z.complex_abs(R::lit(1e-10))?;
                let k = m.pow(R::lit(1.0 / exponent - 1.0))?.scale(R::lit(alpha.powf(-1.0 / exponent)))?;
                z.mul(k)
            }
        }
    }
}

/// Maps every complex value's magnitude through `f`, keeping its phase.
fn rescale<R: Real>(values: &Tensor<R>, f: impl Fn(f64) -> f64) -> Tensor<R> {
    let shape = values.shape();
    let planes = shape[0] * shape[1] / 2;
    let inner: usize = shape[2..].iter().product();
    let d = values.data();
    let mut out = d.to_vec();
    for p in 0..planes {
        let re = 2 * p * inner;
        let im = re + inner;
        for j in 0..inner {
            let (a, b) = (d[re + j].as_f64(), d[im + j].as_f64());
            let m = a.hypot(b);
            if m == 0.0 {
                continue;
            }
            let k = f(m) / m;
            out[re + j] = R::lit(a * k);
            out[im + j] = R::lit(b * k);
        }
    }
    Tensor::new(shape, out).expect("same shape")
}
