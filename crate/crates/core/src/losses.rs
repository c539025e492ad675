//! Spectrogram-domain training objective: squared error plus optional
//! time-domain L1 and perceptual-proxy terms on the resynthesised waveforms.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::metrics::{MetricError, PerceptualProxy};
use crate::signal::{IstftOp, SpecTransform, StftConfig};
use crate::tensor::{Real, TensorError, Var};

/// Per-term values of one loss evaluation. Disabled terms are exactly zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub td: f64,
    pub perceptual: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_td: f64,
    pub lambda_p: f64,
}

impl LossWeights {
    pub const PLAIN: LossWeights = LossWeights {
        lambda_td: 0.0,
        lambda_p: 0.0,
    };
}

pub struct SpecLoss<R: Real> {
    stft: StftConfig,
    transform: SpecTransform,
    proxy: PerceptualProxy<R>,
    istft: RefCell<HashMap<usize, Arc<IstftOp<R>>>>,
}

impl<R: Real> SpecLoss<R> {
    pub fn new(stft: StftConfig, transform: SpecTransform) -> Result<Self, MetricError> {
        Ok(Self {
            stft,
            transform,
            proxy: PerceptualProxy::new()?,
            istft: RefCell::new(HashMap::new()),
        })
    }

    /// Waveform length resynthesised from `frames` frames.
    pub fn wave_len(&self, frames: usize) -> usize {
        (frames - 1) * self.stft.hop
    }

    fn istft_op(&self, frames: usize) -> Result<Arc<IstftOp<R>>, MetricError> {
        if let Some(op) = self.istft.borrow().get(&frames) {
            return Ok(op.clone());
        }
        let op = Arc::new(IstftOp::new(self.stft, self.wave_len(frames))?);
        self.istft.borrow_mut().insert(frames, op.clone());
        Ok(op)
    }

    /// `[B, 2, F, K]` network-domain spectrogram to `[B, L]` waveform.
    pub fn waveform<'g>(&self, spec: Var<'g, R>) -> Result<Var<'g, R>, MetricError> {
        let frames = spec.shape()[2];
        let z = self.transform.inverse_var(spec)?;
        Ok(z.linear_map(self.istft_op(frames)?)?)
    }

    pub fn mse<'g>(&self, reference: Var<'g, R>, estimate: Var<'g, R>) -> Result<Var<'g, R>, TensorError> {
        reference.sub(estimate)?.square()?.mean()
    }

    pub fn td<'g>(&self, reference: Var<'g, R>, estimate: Var<'g, R>) -> Result<Var<'g, R>, MetricError> {
        Ok(self.waveform(reference)?.sub(self.waveform(estimate)?)?.abs()?.mean()?)
    }

    pub fn perceptual<'g>(&self, reference: Var<'g, R>, estimate: Var<'g, R>) -> Result<Var<'g, R>, MetricError> {
        self.proxy.loss(self.waveform(reference)?, self.waveform(estimate)?)
    }

    /// `||ref - est||^2 + lambda_td ||ref_wave - est_wave||_1 + lambda_p P(ref_wave, est_wave)`,
    /// with means as the reductions. A zero weight skips its term entirely.
    pub fn combined<'g>(
        &self,
        reference: Var<'g, R>,
        estimate: Var<'g, R>,
        w: LossWeights,
    ) -> Result<(Var<'g, R>, LossTerms), MetricError> {
        let mut terms = LossTerms::default();
        let mut total = self.mse(reference, estimate)?;
        terms.mse = total.value().item()?.as_f64();
        if w.lambda_td > 0.0 {
            let td = self.td(reference, estimate)?;
            terms.td = td.value().item()?.as_f64();
            total = total.add(td.scale(R::lit(w.lambda_td))?)?;
        }
        if w.lambda_p > 0.0 {
            let p = self.perceptual(reference, estimate)?;
            terms.perceptual = p.value().item()?.as_f64();
            total = total.add(p.scale(R::lit(w.lambda_p))?)?;
        }
        terms.total = total.value().item()?.as_f64();
        Ok((total, terms))
    }
}
