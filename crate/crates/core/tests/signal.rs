mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use common::{grad_check, rng, uniform};
use rand::Rng;
use sbctm::signal::{istft, stft, IstftOp, StftConfig, StftOp};
use sbctm::tensor::Tensor;

fn random_wave(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Naive one-sided DFT of one frame as the library defines it: reflect-padded
/// by window/2, windowed, zero-padded to fft_size.
fn naive_frame(x: &[f64], cfg: &StftConfig, frame: usize) -> Vec<(f64, f64)> {
    let n = cfg.fft_size;
    let pad = (cfg.window_len / 2) as isize;
    let len = x.len() as isize;
    let w: Vec<f64> = (0..cfg.window_len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window_len as f64).cos())
        .collect();
    let mut seg = vec![0.0; n];
    for i in 0..cfg.window_len {
        let mut j = (frame * cfg.hop + i) as isize - pad;
        if j < 0 {
            j = -j;
        }
        if j >= len {
            j = 2 * (len - 1) - j;
        }
        seg[i] = w[i] * x[j as usize];
    }
    (0..=n / 2)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, &v) in seg.iter().enumerate() {
                let th = 2.0 * PI * (k * t) as f64 / n as f64;
                re += v * th.cos();
                im -= v * th.sin();
            }
            (re, im)
        })
        .collect()
}

fn frame_values(spec: &Tensor<f64>, frame: usize) -> Vec<(f64, f64)> {
    let s = spec.shape();
    (0..s[3]).map(|k| (spec.at(&[0, 0, frame, k]), spec.at(&[0, 1, frame, k]))).collect()
}

#[test]
fn matches_naive_dft_on_toy_frames() {
    let cfg = StftConfig::new(16, 6).unwrap();
    let x = random_wave(20, 1);
    let s = stft(&x, &cfg).unwrap();
    assert_eq!(s.frames(), cfg.num_frames(20));
    for f in 0..s.frames().min(3) {
        for ((a, b), (c, d)) in frame_values(&s.values, f).iter().zip(naive_frame(&x, &cfg, f)) {
            assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
        }
    }
}

#[test]
fn time_shift_by_hop_shifts_interior_frames() {
    let cfg = StftConfig::new(16, 4).unwrap();
    let x = random_wave(64, 2);
    let shifted: Vec<f64> = x[cfg.hop..].to_vec();
    let a = stft(&x, &cfg).unwrap();
    let b = stft(&shifted, &cfg).unwrap();
    // frames fully inside both signals line up one hop apart
    for f in 3..6 {
        for ((p, q), (r, s)) in frame_values(&a.values, f + 1).iter().zip(frame_values(&b.values, f)) {
            assert!((p - r).abs() < 1e-12 && (q - s).abs() < 1e-12);
        }
    }
}

#[test]
fn sine_energy_lands_in_nearest_bin() {
    let cfg = StftConfig::default();
    let x: Vec<f64> = (0..4000).map(|n| (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin()).collect();
    let s = stft(&x, &cfg).unwrap();
    let f = s.frames() / 2;
    let mags: Vec<f64> = frame_values(&s.values, f).iter().map(|(a, b)| a.hypot(*b)).collect();
    let peak = mags
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert_eq!(peak, (1000.0 * 512.0 / 16000.0_f64).round() as usize);
}

#[test]
fn parseval_per_frame() {
    let cfg = StftConfig::default();
    let x = random_wave(3000, 3);
    let s = stft(&x, &cfg).unwrap();
    let f = 5;
    // direct summation oracle on the windowed frame
    let w: Vec<f64> = cfg.window();
    let start = f * cfg.hop - cfg.window_len / 2;
    let time_energy: f64 = (0..cfg.window_len).map(|i| (w[i] * x[start + i]).powi(2)).sum();
    let vals = frame_values(&s.values, f);
    let n = cfg.fft_size;
    // one-sided: interior bins count twice
    let spec_energy: f64 = vals
        .iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let m = a * a + b * b;
            if k == 0 || k == n / 2 {
                m
            } else {
                2.0 * m
            }
        })
        .sum();
    assert!((time_energy - spec_energy / n as f64).abs() < 1e-9 * time_energy);
}

#[test]
fn round_trip_one_second_default_config() {
    let cfg = StftConfig::default();
    let x = random_wave(16000, 4);
    let y = istft(&stft(&x, &cfg).unwrap(), 16000).unwrap();
    let err = x.iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "max abs error {err}");
}

#[test]
fn round_trip_over_durations_and_configs() {
    let configs = [
        StftConfig::default(),
        StftConfig::new(512, 128).unwrap(),
        StftConfig::new(1024, 256).unwrap(),
        StftConfig::new(2048, 512).unwrap(),
        StftConfig::new(510, 255).unwrap(),
    ];
    for (ci, cfg) in configs.iter().enumerate() {
        for (di, secs) in [0.2, 0.77, 2.0].iter().enumerate() {
            let len = (secs * 16000.0) as usize;
            let x = random_wave(len, 100 + (ci * 10 + di) as u64);
            let y = istft(&stft(&x, cfg).unwrap(), len).unwrap();
            let err = x.iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "cfg {cfg:?} len {len}: {err}");
        }
    }
}

#[test]
fn istft_is_linear() {
    let cfg = StftConfig::default();
    let s1 = stft(&random_wave(2000, 5), &cfg).unwrap();
    let mut s2 = s1.clone();
    s2.values = uniform(s1.values.shape(), 6);
    let (a, b) = (0.7, -1.3);
    let combo = s1.with_values(s1.values.zip_map(&s2.values, |p, q| a * p + b * q).unwrap());
    let lhs = istft(&combo, 2000).unwrap();
    let r1 = istft(&s1, 2000).unwrap();
    let r2 = istft(&s2, 2000).unwrap();
    let rhs = r1.zip_map(&r2, |p, q| a * p + b * q).unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
}

#[test]
fn stft_and_istft_gradients_match_finite_differences() {
    let cfg = StftConfig::new(16, 4).unwrap();
    let stft_op = Arc::new(StftOp::<f64>::new(cfg).unwrap());
    let x = uniform(&[2, 23], 7);
    let err = grad_check(&[x], |_, v| v[0].linear_map(stft_op.clone()));
    assert!(err < 1e-4, "stft {err}");

    let frames = cfg.num_frames(23);
    let istft_op = Arc::new(IstftOp::<f64>::new(cfg, 23).unwrap());
    let s = uniform(&[2, 2, frames, cfg.bins()], 8);
    let err = grad_check(&[s], |_, v| v[0].linear_map(istft_op.clone()));
    assert!(err < 1e-4, "istft {err}");
}
