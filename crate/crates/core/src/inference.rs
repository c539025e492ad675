//! Anytime multi-step enhancement, evaluation over a corpus, and RTF timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeError, BridgeSchedule, TimeGrid};
use crate::data::{normalisation_gain, Utterance};
use crate::metrics::{score_row, EvalReport, MetricError};
use crate::model::{DenoiserModel, ModelError};
use crate::signal::{istft, stft, SignalError, SpecTransform, Spectrogram, StftConfig};
use crate::teacher::{TeacherModel, TrainError};
use crate::tensor::{Graph, Real, Tensor, TensorError};

/// Longest accepted input.
pub const MAX_INPUT_S: f64 = 30.0;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("input of {0:.1} s exceeds the {MAX_INPUT_S} s limit; split it into shorter files")]
    TooLong(f64),
    #[error("nothing to evaluate")]
    Empty,
}

/// Jump times `t_N > ... > t_1` followed by the final target `0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub nfe: usize,
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
    pub use_ema: bool,
}

impl SamplerPlan {
    /// `(t, s)` pairs of the successive jumps.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Evenly spaced grid indices including both extremes, then a jump to 0.
pub fn select_jump_schedule(grid: &TimeGrid, nfe: usize) -> Result<SamplerPlan, InferenceError> {
    let indices = grid.even_indices(nfe)?;
    let mut times: Vec<f64> = indices.iter().map(|&i| grid.get(i)).collect();
    times.push(0.0);
    Ok(SamplerPlan {
        nfe,
        indices,
        times,
        use_ema: true,
    })
}

/// `x <- G(x, y, t_n, t_{n-1})` from `x = y`, for a `[B, 2, F, K]` batch.
pub fn enhance<R: Real>(model: &DenoiserModel<R>, y: &Tensor<R>, plan: &SamplerPlan) -> Result<Tensor<R>, InferenceError> {
    let b = y.shape()[0];
    let mut x = y.clone();
    for (t, s) in plan.jumps() {
        let g = Graph::new();
        let p = model.bind_frozen(&g)?;
        let out = model.g_theta(&p, g.constant(x)?, g.constant(y.clone())?, &vec![t; b], &vec![s; b])?;
        x = out.value();
    }
    Ok(x)
}

/// Waveform <-> network-domain spectrogram conversion with level normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontEnd {
    pub stft: StftConfig,
    pub transform: SpecTransform,
    pub norm_rms: f64,
}

impl FrontEnd {
    /// `[1, 2, F, K]` spectrogram of the normalised waveform and the gain used.
    pub fn analyse(&self, wave: &[f32]) -> Result<(Tensor<f32>, f64), InferenceError> {
        let dur = wave.len() as f64 / self.stft.sample_rate as f64;
        if dur > MAX_INPUT_S {
            return Err(InferenceError::TooLong(dur));
        }
        let gain = normalisation_gain(wave, self.norm_rms);
        let scaled: Vec<f32> = wave.iter().map(|&v| (v as f64 * gain) as f32).collect();
        let spec = stft(&scaled, &self.stft)?;
        Ok((self.transform.forward_values(&spec.values), gain))
    }

    pub fn synthesise(&self, spec: &Tensor<f32>, gain: f64, len: usize) -> Result<Vec<f32>, InferenceError> {
        let values = self.transform.inverse_values(spec);
        let s = Spectrogram {
            values,
            config: self.stft,
            signal_len: len,
        };
        let wave = istft(&s, len)?;
        Ok(wave.data().iter().map(|&v| (v as f64 / gain) as f32).collect())
    }
}

/// Anything that maps a noisy waveform to an estimate at a given NFE.
pub trait Enhancer {
    fn enhance_wave(&self, noisy: &[f32], nfe: usize) -> Result<Vec<f32>, InferenceError>;
}

/// Consistency-trajectory student (or any `G` model) with its front end.
pub struct StudentEnhancer<'a> {
    pub model: &'a DenoiserModel<f32>,
    pub grid: &'a TimeGrid,
    pub front: FrontEnd,
}

impl Enhancer for StudentEnhancer<'_> {
    fn enhance_wave(&self, noisy: &[f32], nfe: usize) -> Result<Vec<f32>, InferenceError> {
        let (y, gain) = self.front.analyse(noisy)?;
        let plan = select_jump_schedule(self.grid, nfe)?;
        let x = enhance(self.model, &y, &plan)?;
        self.front.synthesise(&x, gain, noisy.len())
    }
}

/// Bridge teacher sampled with the deterministic solver.
pub struct TeacherEnhancer<'a> {
    pub teacher: &'a TeacherModel<f32>,
    pub schedule: &'a BridgeSchedule,
    pub grid: &'a TimeGrid,
    pub front: FrontEnd,
}

impl Enhancer for TeacherEnhancer<'_> {
    fn enhance_wave(&self, noisy: &[f32], nfe: usize) -> Result<Vec<f32>, InferenceError> {
        let (y, gain) = self.front.analyse(noisy)?;
        let x = self.teacher.sample(self.schedule, self.grid, &y, nfe)?;
        self.front.synthesise(&x, gain, noisy.len())
    }
}

/// Scores `enhancer` on every utterance at every NFE, in corpus order.
pub fn evaluate(
    label: &str,
    config_hash: &str,
    utts: &[Utterance],
    enhancer: &dyn Enhancer,
    nfes: &[usize],
    sample_rate: u32,
) -> Result<EvalReport, InferenceError> {
    if utts.is_empty() || nfes.is_empty() {
        return Err(InferenceError::Empty);
    }
    let mut report = EvalReport::new(label, config_hash);
    for &nfe in nfes {
        for u in utts {
            let est = enhancer.enhance_wave(&u.noisy, nfe)?;
            report.rows.push(score_row(&u.id, nfe, &u.clean, &est, sample_rate)?);
        }
    }
    Ok(report)
}

/// The unprocessed noisy input scored as an estimate (reported with NFE 0).
pub fn evaluate_input(config_hash: &str, utts: &[Utterance], sample_rate: u32) -> Result<EvalReport, InferenceError> {
    if utts.is_empty() {
        return Err(InferenceError::Empty);
    }
    let mut report = EvalReport::new("input", config_hash);
    for u in utts {
        report.rows.push(score_row(&u.id, 0, &u.clean, &u.noisy, sample_rate)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub nfe: usize,
    pub duration_s: f64,
    pub runs: Vec<f64>,
    pub mean_s: f64,
    pub rtf: f64,
    pub hardware: String,
}

pub fn hardware_string() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{cpu}; {cores} logical cores; single worker")
}

/// Times `runs` enhancements of `input` after one untimed warm-up.
/// Every network call does the same work, so a single-step warm-up is enough.
pub fn bench_rtf(enhancer: &dyn Enhancer, input: &[f32], sample_rate: u32, nfe: usize, runs: usize) -> Result<RtfReport, InferenceError> {
    let duration_s = input.len() as f64 / sample_rate as f64;
    enhancer.enhance_wave(input, 1)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let out = enhancer.enhance_wave(input, nfe)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mean_s = times.iter().sum::<f64>() / runs.max(1) as f64;
    Ok(RtfReport {
        nfe,
        duration_s,
        runs: times,
        mean_s,
        rtf: mean_s / duration_s,
        hardware: hardware_string(),
    })
}
