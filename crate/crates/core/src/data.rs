//! Synthetic paired corpus, manifests, and spectrogram training pairs.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::wav::{read_wav, write_wav, WavError, WavFormat};
use crate::signal::{stft, SignalError, StftConfig};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: WavError,
    },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("pair {id}: clean has {clean} samples, noisy has {noisy}")]
    Unpaired { id: String, clean: usize, noisy: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_utterances: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            duration_s: 2.0,
            sample_rate: 16_000,
            snr_db_min: -5.0,
            snr_db_max: 5.0,
            valid_fraction: 0.0,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.num_utterances == 0 {
            return bad("num_utterances must be positive");
        }
        if !(self.duration_s > 0.0 && self.duration_s <= 30.0) {
            return bad("duration_s must lie in (0, 30]");
        }
        if self.sample_rate != 16_000 {
            return bad("only 16 kHz is supported");
        }
        if self.snr_db_min.is_nan() || self.snr_db_max.is_nan() || self.snr_db_min > self.snr_db_max {
            return bad("snr range must satisfy min <= max");
        }
        let f = self.valid_fraction + self.test_fraction;
        if self.valid_fraction < 0.0 || self.test_fraction < 0.0 || f >= 1.0 {
            return bad("valid and test fractions must be >= 0 and sum below 1");
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    /// Seed of utterance `index`.
    pub fn utterance_seed(&self, index: usize) -> u64 {
        self.seed ^ index as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub clean: Vec<f32>,
    pub noisy: Vec<f32>,
    pub snr_db: f64,
}

/// `clean + noise` with the noise rescaled to an exact energy ratio. An
/// infinite SNR returns `clean` unchanged.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>, DataError> {
    if clean.len() != noise.len() {
        return Err(DataError::Config("clean and noise lengths differ".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(clean.to_vec());
    }
    let ec: f64 = clean.iter().map(|x| x * x).sum();
    let en: f64 = noise.iter().map(|x| x * x).sum();
    if !(snr_db.is_finite() && ec > 0.0 && en > 0.0) {
        return Err(DataError::Config(format!("cannot mix at {snr_db} dB")));
    }
    let gain = (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean.iter().zip(noise).map(|(c, n)| c + gain * n).collect())
}

fn raised_cosine(n: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.max(1).min(len / 2 + 1);
    if n < ramp {
        0.5 - 0.5 * (PI * n as f64 / ramp as f64).cos()
    } else if n + ramp > len {
        0.5 - 0.5 * (PI * (len - n) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

/// Two-pole resonator over `x`.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64, sr: f64) {
    let r = (-PI * bandwidth / sr).exp();
    let a1 = 2.0 * r * (2.0 * PI * freq / sr).cos();
    let a2 = -r * r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = *v * (1.0 - r) + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn harmonic_segment(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let f0_start: f64 = rng.gen_range(90.0..260.0);
    let f0_end = f0_start * rng.gen_range(0.7..1.4);
    let vib_rate: f64 = rng.gen_range(3.0..7.0);
    let vib_depth: f64 = rng.gen_range(0.0..0.03);
    let formants = [rng.gen_range(300.0..900.0), rng.gen_range(900.0..2500.0), rng.gen_range(2400.0..3500.0)];
    let mut phase = 0.0;
    let mut out = vec![0.0; len];
    for (n, o) in out.iter_mut().enumerate() {
        let frac = n as f64 / len as f64;
        let f0 = (f0_start + (f0_end - f0_start) * frac) * (1.0 + vib_depth * (2.0 * PI * vib_rate * n as f64 / sr).sin());
        phase += 2.0 * PI * f0 / sr;
        let mut v = 0.0;
        let mut k = 1.0;
        while k * f0 < 4000.0 {
            let f = k * f0;
            let env: f64 = formants.iter().map(|&fm| 1.0 / (1.0 + ((f - fm) / 150.0).powi(2))).sum();
            v += (0.15 + env) / k * (k * phase).sin();
            k += 1.0;
        }
        *o = v;
    }
    out
}

fn chirp_segment(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let f_start: f64 = rng.gen_range(250.0..2000.0);
    let f_end: f64 = rng.gen_range(250.0..3500.0);
    let am_rate: f64 = rng.gen_range(2.0..12.0);
    let am_depth: f64 = rng.gen_range(0.0..0.8);
    let mut phase = 0.0;
    (0..len)
        .map(|n| {
            let frac = n as f64 / len as f64;
            phase += 2.0 * PI * (f_start + (f_end - f_start) * frac) / sr;
            let am = 1.0 - am_depth * (0.5 + 0.5 * (2.0 * PI * am_rate * n as f64 / sr).sin());
            am * phase.sin()
        })
        .collect()
}

fn impulse_segment(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let rate: f64 = rng.gen_range(70.0..220.0);
    let period = (sr / rate).round() as usize;
    let mut x = vec![0.0; len];
    let mut n = rng.gen_range(0..period.max(1));
    while n < len {
        x[n] = 1.0;
        n += period;
    }
    resonate(&mut x, rng.gen_range(400.0..2500.0), rng.gen_range(60.0..300.0), sr);
    resonate(&mut x, rng.gen_range(150.0..800.0), rng.gen_range(80.0..200.0), sr);
    x
}

/// Speech-like clean signal: syllable-length segments of harmonic tones,
/// AM/FM chirps and resonated impulse trains separated by short pauses.
pub fn synth_clean(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut pos = rng.gen_range(0..(0.15 * sr) as usize + 1);
    while pos < len {
        let seg = rng.gen_range((0.12 * sr) as usize..(0.45 * sr) as usize).min(len - pos);
        if seg < 64 {
            break;
        }
        let kind = rng.gen_range(0..10);
        let mut s = match kind {
            0..=5 => harmonic_segment(rng, seg, sr),
            6..=7 => chirp_segment(rng, seg, sr),
            _ => impulse_segment(rng, seg, sr),
        };
        let rms = (s.iter().map(|v| v * v).sum::<f64>() / seg as f64).sqrt().max(1e-12);
        let level = 10f64.powf(rng.gen_range(-12.0..0.0) / 20.0) * 0.1 / rms;
        let ramp = (0.02 * sr) as usize;
        for (n, v) in s.iter_mut().enumerate() {
            out[pos + n] += *v * level * raised_cosine(n, seg, ramp);
        }
        pos += seg + rng.gen_range((0.02 * sr) as usize..(0.2 * sr) as usize);
    }
    if out.iter().all(|&v| v == 0.0) {
        // guarantee a non-silent reference
        let s = harmonic_segment(rng, len, sr);
        let rms = (s.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
        out = s.iter().map(|v| v * 0.05 / rms).collect();
    }
    out
}

/// Coloured Gaussian noise: white noise through a one-pole filter with a
/// random pole, plus an optional slow amplitude modulation.
pub fn synth_noise(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let pole: f64 = rng.gen_range(-0.6..0.97);
    let mod_depth: f64 = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.6) } else { 0.0 };
    let mod_rate: f64 = rng.gen_range(0.5..4.0);
    let mut y = 0.0;
    (0..len)
        .map(|n| {
            let w: f64 = rng.sample(StandardNormal);
            y = pole * y + w;
            y * (1.0 - mod_depth * (0.5 + 0.5 * (2.0 * PI * mod_rate * n as f64 / sr).sin()))
        })
        .collect()
}

/// Utterance `index` of the corpus described by `cfg`. Depends only on
/// `(cfg, index)`.
pub fn synth_utterance(cfg: &SynthConfig, index: usize) -> Result<Utterance, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.utterance_seed(index));
    let len = cfg.num_samples();
    let sr = cfg.sample_rate as f64;
    let clean = synth_clean(&mut rng, len, sr);
    let noise = synth_noise(&mut rng, len, sr);
    let snr_db = if cfg.snr_db_min == cfg.snr_db_max {
        cfg.snr_db_min
    } else {
        rng.gen_range(cfg.snr_db_min..cfg.snr_db_max)
    };
    let noisy = mix_at_snr(&clean, &noise, snr_db)?;
    Ok(Utterance {
        id: format!("utt{index:05}"),
        clean: clean.iter().map(|&v| v as f32).collect(),
        noisy: noisy.iter().map(|&v| v as f32).collect(),
        snr_db,
    })
}

/// Whole corpus, generated on all available cores; order follows the index.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Utterance>, DataError> {
    cfg.validate()?;
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(cfg.num_utterances);
    if workers <= 1 {
        return (0..cfg.num_utterances).map(|i| synth_utterance(cfg, i)).collect();
    }
    let results: Vec<Vec<Result<Utterance, DataError>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..cfg.num_utterances)
                        .step_by(workers)
                        .map(|i| synth_utterance(cfg, i))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("synth worker")).collect()
    });
    let mut slots: Vec<Option<Result<Utterance, DataError>>> = (0..cfg.num_utterances).map(|_| None).collect();
    for (w, chunk) in results.into_iter().enumerate() {
        for (k, r) in chunk.into_iter().enumerate() {
            slots[w + k * workers] = Some(r);
        }
    }
    slots.into_iter().map(|r| r.expect("every index produced")).collect()
}

/// Seeded assignment of `n` items to splits; a partition by construction.
pub fn assign_splits(n: usize, valid_fraction: f64, test_fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED)));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_valid = ((n as f64) * valid_fraction).round() as usize;
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_valid {
            Split::Valid
        } else {
            Split::Train
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub num_samples: usize,
    pub duration_s: f64,
    /// `null` for the infinite-SNR sentinel.
    pub snr_db: Option<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, json).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut seen = std::collections::HashSet::new();
        for e in &m.entries {
            if !seen.insert(&e.id) {
                return Err(DataError::Manifest {
                    path: path.to_path_buf(),
                    msg: format!("duplicate id {}", e.id),
                });
            }
        }
        Ok(m)
    }

    /// Reads the pairs of one split; paths are relative to `root`.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<Utterance>, DataError> {
        self.split(split)
            .map(|e| {
                let read = |p: &Path| {
                    let path = root.join(p);
                    read_wav(&path).map_err(|source| DataError::Wav { path, source })
                };
                let clean = read(&e.clean)?;
                let noisy = read(&e.noisy)?;
                if clean.len() != noisy.len() {
                    return Err(DataError::Unpaired {
                        id: e.id.clone(),
                        clean: clean.len(),
                        noisy: noisy.len(),
                    });
                }
                Ok(Utterance {
                    id: e.id.clone(),
                    clean,
                    noisy,
                    snr_db: e.snr_db.unwrap_or(f64::INFINITY),
                })
            })
            .collect()
    }
}

/// Writes the corpus as float WAVs under `dir/{clean,noisy}` plus a manifest.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<Manifest, DataError> {
    let utts = synth_corpus(cfg)?;
    let splits = assign_splits(utts.len(), cfg.valid_fraction, cfg.test_fraction, cfg.seed);
    for sub in ["clean", "noisy"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|source| DataError::Io { path: p, source })?;
    }
    let mut entries = Vec::with_capacity(utts.len());
    for (u, split) in utts.iter().zip(splits) {
        let clean = PathBuf::from("clean").join(format!("{}.wav", u.id));
        let noisy = PathBuf::from("noisy").join(format!("{}.wav", u.id));
        for (rel, samples) in [(&clean, &u.clean), (&noisy, &u.noisy)] {
            let path = dir.join(rel);
            write_wav(&path, samples, WavFormat::Float32).map_err(|source| DataError::Wav { path, source })?;
        }
        entries.push(ManifestEntry {
            id: u.id.clone(),
            clean,
            noisy,
            num_samples: u.clean.len(),
            duration_s: u.clean.len() as f64 / cfg.sample_rate as f64,
            snr_db: u.snr_db.is_finite().then_some(u.snr_db),
            split,
        });
    }
    let m = Manifest {
        seed: cfg.seed,
        sample_rate: cfg.sample_rate,
        entries,
    };
    m.save(&dir.join(MANIFEST_FILE))?;
    Ok(m)
}

/// Gain mapping the noisy waveform to a fixed RMS; applied to both signals.
pub fn normalisation_gain(noisy: &[f32], target_rms: f64) -> f64 {
    let rms = (noisy.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / noisy.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        target_rms / rms
    } else {
        1.0
    }
}

/// A clean/noisy pair in the complex-spectrogram domain, `[2, F, K]` each.
#[derive(Clone, Debug)]
pub struct SpecPair {
    pub id: String,
    pub x0: Tensor<f32>,
    pub y: Tensor<f32>,
    pub gain: f64,
    pub num_samples: usize,
}

impl SpecPair {
    pub fn from_utterance(u: &Utterance, stft_cfg: &StftConfig, target_rms: f64) -> Result<Self, DataError> {
        let gain = normalisation_gain(&u.noisy, target_rms) as f32;
        let scale = |x: &[f32]| x.iter().map(|&v| v * gain).collect::<Vec<_>>();
        let x0 = stft(&scale(&u.clean), stft_cfg)?.values;
        let y = stft(&scale(&u.noisy), stft_cfg)?.values;
        let drop_batch = |t: Tensor<f32>| {
            let s = t.shape()[1..].to_vec();
            t.reshape(&s)
        };
        Ok(Self {
            id: u.id.clone(),
            x0: drop_batch(x0)?,
            y: drop_batch(y)?,
            gain: gain as f64,
            num_samples: u.clean.len(),
        })
    }

    pub fn frames(&self) -> usize {
        self.x0.shape()[1]
    }
}

/// Random fixed-length frame crops stacked into `[B, 2, crop, K]` batches.
pub struct CropSampler<'a> {
    pairs: &'a [SpecPair],
    crop: usize,
    rng: ChaCha8Rng,
}

impl<'a> CropSampler<'a> {
    pub fn new(pairs: &'a [SpecPair], crop: usize, seed: u64) -> Result<Self, DataError> {
        if pairs.is_empty() {
            return Err(DataError::Config("no training pairs".into()));
        }
        if let Some(p) = pairs.iter().find(|p| p.frames() < crop) {
            return Err(DataError::Config(format!("{} has {} frames, crop needs {crop}", p.id, p.frames())));
        }
        Ok(Self {
            pairs,
            crop,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self, batch: usize) -> (Tensor<f32>, Tensor<f32>) {
        let bins = self.pairs[0].x0.shape()[2];
        let plane = self.crop * bins;
        let mut x0 = Vec::with_capacity(batch * 2 * plane);
        let mut y = Vec::with_capacity(batch * 2 * plane);
        for _ in 0..batch {
            let p = &self.pairs[self.rng.gen_range(0..self.pairs.len())];
            let start = self.rng.gen_range(0..=p.frames() - self.crop);
            let frames = p.frames();
            for (src, dst) in [(&p.x0, &mut x0), (&p.y, &mut y)] {
                for c in 0..2 {
                    let off = (c * frames + start) * bins;
                    dst.extend_from_slice(&src.data()[off..off + plane]);
                }
            }
        }
        let shape = [batch, 2, self.crop, bins];
        (
            Tensor::new(&shape, x0).expect("sized"),
            Tensor::new(&shape, y).expect("sized"),
        )
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_utterances: 6,
            duration_s: 0.5,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn infinite_snr_returns_clean_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = synth_clean(&mut rng, 4000, 16000.0);
        let n = synth_noise(&mut rng, 4000, 16000.0);
        assert_eq!(mix_at_snr(&c, &n, f64::INFINITY).unwrap(), c);
        let cfg = SynthConfig {
            snr_db_min: f64::INFINITY,
            snr_db_max: f64::INFINITY,
            ..small()
        };
        let u = synth_utterance(&cfg, 0).unwrap();
        assert_eq!(u.clean, u.noisy);
    }

    #[test]
    fn corpus_is_deterministic_and_seed_dependent() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&SynthConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a[0].clean, c[0].clean);
        assert!(a.iter().all(|u| u.clean.len() == 8000 && u.noisy.len() == 8000));
    }

    #[test]
    fn splits_partition_the_corpus() {
        let s = assign_splits(50, 0.1, 0.2, 3);
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (35, 5, 10));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SynthConfig { snr_db_min: 5.0, snr_db_max: 0.0, ..small() }.validate().is_err());
        assert!(SynthConfig { test_fraction: 1.0, ..small() }.validate().is_err());
        assert!(SynthConfig { num_utterances: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn crops_have_requested_shape() {
        let utts = synth_corpus(&small()).unwrap();
        let cfg = StftConfig::default();
        let pairs: Vec<_> = utts.iter().map(|u| SpecPair::from_utterance(u, &cfg, 0.05).unwrap()).collect();
        let mut s = CropSampler::new(&pairs, 16, 0).unwrap();
        let (x0, y) = s.next_batch(3);
        assert_eq!(x0.shape(), &[3, 2, 16, 257]);
        assert_eq!(y.shape(), x0.shape());
        assert!(CropSampler::new(&pairs, 1000, 0).is_err());
    }
}
