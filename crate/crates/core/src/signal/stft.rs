use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::SignalError;
use crate::tensor::{LinearMap, Real, Tensor, TensorError};

/// Analysis/synthesis parameters. The window is a periodic Hann of
/// `window_len` samples, zero-padded at the end to `fft_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 510,
            hop: 128,
            fft_size: 512,
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    /// Window of `window_len`, hop `hop`, smallest power-of-two FFT that fits.
    pub fn new(window_len: usize, hop: usize) -> Result<Self, SignalError> {
        let cfg = Self {
            window_len,
            hop,
            fft_size: window_len.next_power_of_two(),
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.window_len < 2 || self.hop == 0 || self.hop >= self.window_len {
            return Err(SignalError::Config(format!(
                "need 0 < hop < window_len, got hop {} window {}",
                self.hop, self.window_len
            )));
        }
        if self.fft_size < self.window_len {
            return Err(SignalError::Config(format!(
                "fft_size {} shorter than window {}",
                self.fft_size, self.window_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Reflect padding applied to both ends before framing.
    pub fn pad(&self) -> usize {
        self.window_len / 2
    }

    pub fn num_frames(&self, signal_len: usize) -> usize {
        (signal_len + 2 * self.pad() - self.window_len) / self.hop + 1
    }

    pub fn window<R: Real>(&self) -> Vec<R> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| R::lit(0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()))
            .collect()
    }

    /// Longest signal an `frames`-frame spectrogram can be inverted to.
    fn max_len(&self, frames: usize) -> usize {
        ((frames - 1) * self.hop + self.window_len).saturating_sub(self.pad())
    }
}

/// One-sided complex spectrogram, `[B, 2, frames, bins]` with real part on
/// channel 0 and imaginary part on channel 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<R: Real> {
    pub values: Tensor<R>,
    pub config: StftConfig,
    pub signal_len: usize,
}

impl<R: Real> Spectrogram<R> {
    pub fn frames(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn with_values(&self, values: Tensor<R>) -> Self {
        Self {
            values,
            config: self.config,
            signal_len: self.signal_len,
        }
    }
}

struct Plans<R: Real> {
    forward: Arc<dyn Fft<R>>,
    inverse: Arc<dyn Fft<R>>,
}

impl<R: Real> Plans<R> {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

fn reflect(j: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = j;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

/// Forward STFT as a differentiable linear map: `[B, L] -> [B, 2, F, K]`.
pub struct StftOp<R: Real> {
    cfg: StftConfig,
    window: Vec<R>,
    plans: Plans<R>,
}

impl<R: Real> StftOp<R> {
    pub fn new(cfg: StftConfig) -> Result<Self, SignalError> {
        cfg.validate()?;
        Ok(Self {
            window: cfg.window(),
            plans: Plans::new(cfg.fft_size),
            cfg,
        })
    }

    fn check_len(&self, len: usize) -> Result<(), TensorError> {
        if len < self.cfg.window_len || len <= self.cfg.pad() {
            return Err(TensorError::InvalidArgument(format!(
                "signal of {len} samples is shorter than the {}-sample window",
                self.cfg.window_len
            )));
        }
        Ok(())
    }
}

impl<R: Real> LinearMap<R> for StftOp<R> {
    fn name(&self) -> &'static str {
        "stft"
    }

    fn apply(&self, input: &Tensor<R>) -> Result<Tensor<R>, TensorError> {
        let (batch, len) = batch_len(input)?;
        self.check_len(len)?;
        let cfg = &self.cfg;
        let (frames, bins, n) = (cfg.num_frames(len), cfg.bins(), cfg.fft_size);
        let pad = cfg.pad() as isize;
        let mut out = vec![R::zero(); batch * 2 * frames * bins];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
        for b in 0..batch {
            let x = &input.data()[b * len..(b + 1) * len];
            let (re_plane, im_plane) = out[b * 2 * frames * bins..(b + 1) * 2 * frames * bins].split_at_mut(frames * bins);
            for f in 0..frames {
                for (i, c) in buf.iter_mut().enumerate() {
                    *c = if i < cfg.window_len {
                        let j = reflect((f * cfg.hop + i) as isize - pad, len);
                        Complex::new(x[j] * self.window[i], R::zero())
                    } else {
                        Complex::new(R::zero(), R::zero())
                    };
                }
                self.plans.forward.process(&mut buf);
                for k in 0..bins {
                    re_plane[f * bins + k] = buf[k].re;
                    im_plane[f * bins + k] = buf[k].im;
                }
            }
        }
        Tensor::new(&[batch, 2, frames, bins], out)
    }

    fn adjoint(&self, grad: &Tensor<R>, input_shape: &[usize]) -> Result<Vec<R>, TensorError> {
        let (batch, len) = (input_shape[0], input_shape[1]);
        let cfg = &self.cfg;
        let (frames, bins, n) = (grad.shape()[2], grad.shape()[3], cfg.fft_size);
        let pad = cfg.pad() as isize;
        let mut out = vec![R::zero(); batch * len];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
        for b in 0..batch {
            let g = &grad.data()[b * 2 * frames * bins..(b + 1) * 2 * frames * bins];
            let (gre, gim) = g.split_at(frames * bins);
            let dx = &mut out[b * len..(b + 1) * len];
            for f in 0..frames {
                // Re( sum_k (gR + i gI) e^{+i 2 pi k n / N} ) over the one-sided bins
                for (k, c) in buf.iter_mut().enumerate() {
                    *c = if k < bins {
                        Complex::new(gre[f * bins + k], gim[f * bins + k])
                    } else {
                        Complex::new(R::zero(), R::zero())
                    };
                }
                self.plans.inverse.process(&mut buf);
                for i in 0..cfg.window_len {
                    let j = reflect((f * cfg.hop + i) as isize - pad, len);
                    dx[j] += self.window[i] * buf[i].re;
                }
            }
        }
        Ok(out)
    }
}

/// Least-squares inverse STFT as a differentiable linear map: `[B, 2, F, K] -> [B, L]`.
///
/// Frames are inverse-transformed, weighted by the analysis window, overlap-added
/// and divided by the summed squared window, so `istft(stft(x)) == x`.
pub struct IstftOp<R: Real> {
    cfg: StftConfig,
    window: Vec<R>,
    plans: Plans<R>,
    out_len: usize,
}

impl<R: Real> IstftOp<R> {
    pub fn new(cfg: StftConfig, out_len: usize) -> Result<Self, SignalError> {
        cfg.validate()?;
        Ok(Self {
            window: cfg.window(),
            plans: Plans::new(cfg.fft_size),
            cfg,
            out_len,
        })
    }

    /// Per padded-sample normalisation `1 / sum_f w^2`, zero where uncovered.
    fn inv_norm(&self, frames: usize) -> Vec<R> {
        let cfg = &self.cfg;
        let span = (frames - 1) * cfg.hop + cfg.window_len;
        let mut norm = vec![R::zero(); span];
        for f in 0..frames {
            for i in 0..cfg.window_len {
                norm[f * cfg.hop + i] += self.window[i] * self.window[i];
            }
        }
        let tiny = R::lit(1e-10);
        norm.iter().map(|&v| if v > tiny { R::one() / v } else { R::zero() }).collect()
    }

    fn check(&self, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
        if shape.len() != 4 || shape[1] != 2 || shape[3] != self.cfg.bins() {
            return Err(TensorError::InvalidArgument(format!(
                "istft expects [B, 2, frames, {}], got {shape:?}",
                self.cfg.bins()
            )));
        }
        let frames = shape[2];
        let natural_lo = (frames.max(1) - 1) * self.cfg.hop;
        if frames == 0 || self.out_len > self.cfg.max_len(frames) || self.out_len + self.cfg.window_len < natural_lo {
            return Err(TensorError::InvalidArgument(format!(
                "output length {} incompatible with {frames} frames",
                self.out_len
            )));
        }
        Ok((shape[0], frames, shape[3]))
    }
}

impl<R: Real> LinearMap<R> for IstftOp<R> {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn apply(&self, input: &Tensor<R>) -> Result<Tensor<R>, TensorError> {
        let (batch, frames, bins) = self.check(input.shape())?;
        let cfg = &self.cfg;
        let n = cfg.fft_size;
        let inv_n = R::one() / R::lit(n as f64);
        let pad = cfg.pad();
        let inv_norm = self.inv_norm(frames);
        let mut out = vec![R::zero(); batch * self.out_len];
        let mut acc = vec![R::zero(); inv_norm.len()];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
        for b in 0..batch {
            let s = &input.data()[b * 2 * frames * bins..(b + 1) * 2 * frames * bins];
            let (re, im) = s.split_at(frames * bins);
            acc.fill(R::zero());
            for f in 0..frames {
                fill_hermitian(&mut buf, &re[f * bins..(f + 1) * bins], &im[f * bins..(f + 1) * bins]);
                self.plans.inverse.process(&mut buf);
                for i in 0..cfg.window_len {
                    acc[f * cfg.hop + i] += self.window[i] * buf[i].re * inv_n;
                }
            }
            let y = &mut out[b * self.out_len..(b + 1) * self.out_len];
            for (j, v) in y.iter_mut().enumerate() {
                let m = j + pad;
                if m < acc.len() {
                    *v = acc[m] * inv_norm[m];
                }
            }
        }
        Tensor::new(&[batch, self.out_len], out)
    }

    fn adjoint(&self, grad: &Tensor<R>, input_shape: &[usize]) -> Result<Vec<R>, TensorError> {
        let (batch, frames, bins) = self.check(input_shape)?;
        let cfg = &self.cfg;
        let n = cfg.fft_size;
        let inv_n = R::one() / R::lit(n as f64);
        let two = R::lit(2.0);
        let pad = cfg.pad();
        let inv_norm = self.inv_norm(frames);
        let mut out = vec![R::zero(); batch * 2 * frames * bins];
        let mut gpad = vec![R::zero(); inv_norm.len()];
        let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
        for b in 0..batch {
            let g = &grad.data()[b * self.out_len..(b + 1) * self.out_len];
            gpad.fill(R::zero());
            for (j, &v) in g.iter().enumerate() {
                let m = j + pad;
                if m < gpad.len() {
                    gpad[m] = v * inv_norm[m];
                }
            }
            let dst = &mut out[b * 2 * frames * bins..(b + 1) * 2 * frames * bins];
            let (dre, dim) = dst.split_at_mut(frames * bins);
            for f in 0..frames {
                for (i, c) in buf.iter_mut().enumerate() {
                    let v = if i < cfg.window_len {
                        self.window[i] * gpad[f * cfg.hop + i]
                    } else {
                        R::zero()
                    };
                    *c = Complex::new(v, R::zero());
                }
                self.plans.forward.process(&mut buf);
                for k in 0..bins {
                    let c = if k == 0 || 2 * k == n { inv_n } else { two * inv_n };
                    dre[f * bins + k] = c * buf[k].re;
                    // imaginary parts of DC and Nyquist are discarded by the inverse
                    dim[f * bins + k] = if k == 0 || 2 * k == n { R::zero() } else { c * buf[k].im };
                }
            }
        }
        Ok(out)
    }
}

/// Full-length Hermitian spectrum from one-sided bins.
fn fill_hermitian<R: Real>(buf: &mut [Complex<R>], re: &[R], im: &[R]) {
    let n = buf.len();
    let bins = re.len();
    for k in 0..n {
        buf[k] = if k < bins {
            let imag = if k == 0 || 2 * k == n { R::zero() } else { im[k] };
            Complex::new(re[k], imag)
        } else {
            let m = n - k;
            Complex::new(re[m], -im[m])
        };
    }
}

fn batch_len<R: Real>(t: &Tensor<R>) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [b, l] => Ok((*b, *l)),
        [l] => Ok((1, *l)),
        s => Err(TensorError::InvalidArgument(format!("expected [B, L] waveform, got {s:?}"))),
    }
}

/// STFT of one waveform.
pub fn stft<R: Real>(wave: &[R], cfg: &StftConfig) -> Result<Spectrogram<R>, SignalError> {
    if wave.iter().any(|x| !x.is_finite()) {
        return Err(SignalError::NonFinite);
    }
    if wave.len() < cfg.window_len {
        return Err(SignalError::TooShort {
            len: wave.len(),
            min: cfg.window_len,
        });
    }
    let op = StftOp::new(*cfg)?;
    let x = Tensor::new(&[1, wave.len()], wave.to_vec())?;
    Ok(Spectrogram {
        values: op.apply(&x)?,
        config: *cfg,
        signal_len: wave.len(),
    })
}

/// Inverse STFT of a (possibly batched) spectrogram; returns `[B, out_len]`.
pub fn istft<R: Real>(spec: &Spectrogram<R>, out_len: usize) -> Result<Tensor<R>, SignalError> {
    let op = IstftOp::new(spec.config, out_len)?;
    Ok(op.apply(&spec.values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_values() {
        let c = StftConfig::default();
        assert_eq!((c.window_len, c.hop, c.fft_size, c.bins()), (510, 128, 512, 257));
        assert_eq!(StftConfig::new(510, 128).unwrap(), c);
    }

    #[test]
    fn hop_must_be_shorter_than_window() {
        assert!(StftConfig::new(128, 128).is_err());
        assert!(StftConfig::new(128, 0).is_err());
    }

    #[test]
    fn periodic_hann_has_zero_first_sample_and_unit_peak() {
        let w: Vec<f64> = StftConfig::default().window();
        assert_eq!(w[0], 0.0);
        assert!((w[255] - 1.0).abs() < 1e-15);
        // periodic: symmetric about n = N/2 with w[k] == w[N - k]
        for k in 1..255 {
            assert!((w[k] - w[510 - k]).abs() < 1e-14);
        }
    }

    #[test]
    fn frame_count() {
        let c = StftConfig::default();
        assert_eq!(c.num_frames(16000), 126);
        assert_eq!(c.num_frames(3968), 32);
    }

    #[test]
    fn zeros_in_zeros_out() {
        let c = StftConfig::default();
        let s = stft(&vec![0.0f64; 4000], &c).unwrap();
        assert!(s.values.data().iter().all(|&v| v == 0.0));
        let y = istft(&s, 4000).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_short_and_non_finite() {
        let c = StftConfig::default();
        assert!(matches!(stft(&vec![0.0f64; 100], &c), Err(SignalError::TooShort { .. })));
        let mut x = vec![0.0f64; 1000];
        x[3] = f64::NAN;
        assert!(matches!(stft(&x, &c), Err(SignalError::NonFinite)));
    }

    #[test]
    fn istft_rejects_far_off_lengths() {
        let c = StftConfig::default();
        let s = stft(&vec![0.1f64; 4000], &c).unwrap();
        assert!(istft(&s, 40_000).is_err());
        assert!(istft(&s, 100).is_err());
    }
}
