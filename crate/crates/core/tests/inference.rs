mod common;

use common::rng;
use rand::Rng;
use sbctm::bridge::{gaussian, TimeGrid};
use sbctm::inference::{bench_rtf, enhance, evaluate, select_jump_schedule, Enhancer, FrontEnd, InferenceError, StudentEnhancer, MAX_INPUT_S};
use sbctm::model::{DenoiserModel, ModelConfig};
use sbctm::signal::{SpecTransform, StftConfig};
use sbctm::tensor::{Graph, Tensor};

fn model() -> DenoiserModel<f32> {
    let mut m = DenoiserModel::new(ModelConfig {
        channels: [4, 8, 8],
        fourier_features: 4,
        embed_dim: 8,
        seed: 3,
        ..Default::default()
    });
    let mut r = rng(4);
    for i in 0..m.params.len() {
        let p = &m.params.tensors()[i];
        let v = p.data().iter().map(|v| v + r.gen_range(-0.05f32..0.05)).collect();
        let t = Tensor::new(p.shape(), v).unwrap();
        m.params.set_index(i, t);
    }
    m
}

fn grid() -> TimeGrid {
    TimeGrid::new(40, 7.0, 0.03, 1.0).unwrap()
}

fn jump(m: &DenoiserModel<f32>, x: &Tensor<f32>, y: &Tensor<f32>, t: f64, s: f64) -> Tensor<f32> {
    let g = Graph::new();
    let p = m.bind_frozen(&g).unwrap();
    m.g_theta(&p, g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap(), &[t], &[s]).unwrap().value()
}

fn front() -> FrontEnd {
    FrontEnd {
        stft: StftConfig::default(),
        transform: SpecTransform::default(),
        norm_rms: 0.05,
    }
}

#[test]
fn jump_schedules_are_evenly_spaced_with_both_extremes() {
    let g = grid();
    let four = select_jump_schedule(&g, 4).unwrap();
    assert_eq!(four.indices, vec![0, 13, 26, 39]);
    assert_eq!(four.times.len(), 5);
    assert_eq!(four.times[0], 1.0);
    assert_eq!(*four.times.last().unwrap(), 0.0);
    let one = select_jump_schedule(&g, 1).unwrap();
    assert_eq!(one.times, vec![1.0, 0.0]);
    let full = select_jump_schedule(&g, 40).unwrap();
    assert_eq!(&full.times[..40], g.values());
    assert!(select_jump_schedule(&g, 0).is_err());
    assert!(select_jump_schedule(&g, 41).is_err());
}

#[test]
fn two_evaluations_compose_two_jumps() {
    let m = model();
    let g = grid();
    let y = gaussian::<f32>(&[1, 2, 8, 257], &mut rng(5));
    let plan = select_jump_schedule(&g, 2).unwrap();
    let got = enhance(&m, &y, &plan).unwrap();
    let mid = jump(&m, &y, &y, 1.0, g.t_min());
    let want = jump(&m, &mid, &y, g.t_min(), 0.0);
    assert_eq!(got, want);
    let one = enhance(&m, &y, &select_jump_schedule(&g, 1).unwrap()).unwrap();
    assert_eq!(one, jump(&m, &y, &y, 1.0, 0.0));
}

#[test]
fn enhancement_is_deterministic_and_length_preserving() {
    let m = model();
    let g = grid();
    let e = StudentEnhancer {
        model: &m,
        grid: &g,
        front: front(),
    };
    let mut r = rng(6);
    let wave: Vec<f32> = (0..5000).map(|_| r.gen_range(-0.3f32..0.3)).collect();
    let a = e.enhance_wave(&wave, 2).unwrap();
    assert_eq!(a.len(), wave.len());
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, e.enhance_wave(&wave, 2).unwrap());
}

#[test]
fn overlong_input_is_refused() {
    let m = model();
    let g = grid();
    let e = StudentEnhancer {
        model: &m,
        grid: &g,
        front: front(),
    };
    let n = ((MAX_INPUT_S + 0.5) * 16_000.0) as usize;
    assert!(matches!(e.enhance_wave(&vec![0.01; n], 1), Err(InferenceError::TooLong(_))));
}

#[test]
fn empty_evaluation_is_an_error() {
    let m = model();
    let g = grid();
    let e = StudentEnhancer {
        model: &m,
        grid: &g,
        front: front(),
    };
    assert!(matches!(evaluate("s", "h", &[], &e, &[1], 16_000), Err(InferenceError::Empty)));
}

#[test]
fn rtf_report_is_consistent() {
    let m = model();
    let g = grid();
    let e = StudentEnhancer {
        model: &m,
        grid: &g,
        front: front(),
    };
    let wave = vec![0.01f32; 8000];
    let rep = bench_rtf(&e, &wave, 16_000, 1, 2).unwrap();
    assert_eq!(rep.runs.len(), 2);
    assert!((rep.duration_s - 0.5).abs() < 1e-12);
    assert!((rep.rtf - rep.mean_s / 0.5).abs() < 1e-12);
}
