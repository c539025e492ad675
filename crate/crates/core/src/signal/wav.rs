//! Mono 16 kHz WAV input/output (16-bit PCM or 32-bit float).

use std::path::Path;

use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Io { path: String, source: hound::Error },
    #[error("{path}: sample rate {rate} Hz not supported (resample to 16000 Hz first)")]
    SampleRate { path: String, rate: u32 },
    #[error("{path}: {channels} channels not supported (mono only)")]
    Channels { path: String, channels: u16 },
    #[error("{path}: unsupported sample format {bits}-bit {format:?}")]
    Format {
        path: String,
        bits: u16,
        format: hound::SampleFormat,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

pub fn read_wav(path: &Path) -> Result<Vec<f32>, WavError> {
    let p = path.display().to_string();
    let io = |source| WavError::Io { path: p.clone(), source };
    let mut reader = hound::WavReader::open(path).map_err(io)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(WavError::SampleRate {
            path: p,
            rate: spec.sample_rate,
        });
    }
    if spec.channels != 1 {
        return Err(WavError::Channels {
            path: p,
            channels: spec.channels,
        });
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(io),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>().map_err(io),
        (format, bits) => Err(WavError::Format { path: p, bits, format }),
    }
}

pub fn write_wav(path: &Path, samples: &[f32], format: WavFormat) -> Result<(), WavError> {
    let p = path.display().to_string();
    let io = |source| WavError::Io { path: p.clone(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in samples {
        match format {
            WavFormat::Pcm16 => {
                let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                w.write_sample(v).map_err(io)?;
            }
            WavFormat::Float32 => w.write_sample(s).map_err(io)?,
        }
    }
    w.finalize().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x: Vec<f32> = (0..500).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
        write_wav(&path, &x, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&path).unwrap(), x);
    }

    #[test]
    fn pcm16_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x: Vec<f32> = (0..500).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
        write_wav(&path, &x, WavFormat::Pcm16).unwrap();
        let y = read_wav(&path).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }

    #[test]
    fn other_sample_rates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(WavError::SampleRate { rate: 44_100, .. })));
    }
}
