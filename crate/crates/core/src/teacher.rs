//! Bridge teacher: data-prediction training and the deterministic solver.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{gaussian, BridgeError, BridgeSchedule, TimeGrid};
use crate::data::{CropSampler, DataError, SpecPair};
use crate::losses::{LossTerms, LossWeights, SpecLoss};
use crate::metrics::MetricError;
use crate::model::{BoundParams, DenoiserModel, EmaShadow, ModelError};
use crate::optim::{Radam, RadamConfig};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} consecutive non-finite steps (last at step {1}); aborting")]
    Diverged(usize, usize),
}

impl TrainError {
    /// True for numeric failures, false for configuration or I/O problems.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Diverged(..)
                | TrainError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub lambda_td: f64,
    pub lambda_p: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: 20,
            batch_size: 1,
            crop_frames: 32,
            lr: 1e-3,
            ema_decay: 0.995,
            lambda_td: 0.0,
            lambda_p: 0.0,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TeacherConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.crop_frames < 4 {
            return Err(TrainError::Config("batch_size >= 1 and crop_frames >= 4 required".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(TrainError::Config("lr must be > 0 and ema_decay in [0, 1]".into()));
        }
        if self.lambda_td < 0.0 || self.lambda_p < 0.0 {
            return Err(TrainError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// A [`DenoiserModel`] used as a single-time clean-endpoint predictor; the
/// `s` input is tied to `t`.
#[derive(Clone, Debug)]
pub struct TeacherModel<R: Real> {
    pub model: DenoiserModel<R>,
}

impl<R: Real> TeacherModel<R> {
    pub fn new(mut model: DenoiserModel<R>) -> Self {
        model.zero_s_projection();
        Self { model }
    }

    /// `x0_hat = F(x_t, y, t, t)` on a graph.
    pub fn predict<'g>(&self, p: &BoundParams<'g, R>, x_t: Var<'g, R>, y: Var<'g, R>, t: &[f64]) -> Result<Var<'g, R>, ModelError> {
        self.model.f_theta(p, x_t, y, t, t)
    }

    /// Gradient-free prediction.
    pub fn predict_tensor(&self, x_t: &Tensor<R>, y: &Tensor<R>, t: &[f64]) -> Result<Tensor<R>, ModelError> {
        let g = Graph::new();
        let p = self.model.bind_frozen(&g)?;
        let out = self.predict(&p, g.constant(x_t.clone())?, g.constant(y.clone())?, t)?;
        Ok(out.value())
    }

    /// One deterministic step `t -> u` using the teacher's prediction at `t`.
    pub fn solver_step(
        &self,
        schedule: &BridgeSchedule,
        x_t: &Tensor<R>,
        y: &Tensor<R>,
        t: &[f64],
        u: &[f64],
    ) -> Result<Tensor<R>, TrainError> {
        for (&tb, &ub) in t.iter().zip(u) {
            if ub > tb {
                return Err(BridgeError::Domain { t: ub, lo: 0.0, hi: tb }.into());
            }
        }
        if t == u {
            return Ok(x_t.clone());
        }
        let x0_hat = self.predict_tensor(x_t, y, t)?;
        Ok(schedule.solver_update(x_t, &x0_hat, y, t, u)?)
    }

    /// `nfe` evaluations: solver steps between `nfe` evenly spaced grid points
    /// from the top of the grid down, then a final prediction at the last one.
    pub fn sample(&self, schedule: &BridgeSchedule, grid: &TimeGrid, y: &Tensor<R>, nfe: usize) -> Result<Tensor<R>, TrainError> {
        let idx = grid.even_indices(nfe)?;
        let b = y.shape()[0];
        let mut x = y.clone();
        for w in idx.windows(2) {
            let (t, u) = (grid.get(w[0]), grid.get(w[1]));
            x = self.solver_step(schedule, &x, y, &vec![t; b], &vec![u; b])?;
        }
        let last = grid.get(*idx.last().expect("nfe >= 1"));
        Ok(self.predict_tensor(&x, y, &vec![last; b])?)
    }
}

/// Data-prediction loss at times `t` (one per batch row) for bridge noise
/// `noise`, with optional auxiliary terms.
#[allow(clippy::too_many_arguments)]
pub fn teacher_loss<'g, R: Real>(
    teacher: &TeacherModel<R>,
    p: &BoundParams<'g, R>,
    schedule: &BridgeSchedule,
    loss: &SpecLoss<R>,
    x0: &Tensor<R>,
    y: &Tensor<R>,
    t: &[f64],
    noise: &Tensor<R>,
    weights: LossWeights,
) -> Result<(Var<'g, R>, LossTerms), TrainError> {
    let g = p.vars()[0].graph();
    let x_t = schedule.marginal_batch(x0, y, t, noise)?;
    let pred = teacher.predict(p, g.constant(x_t)?, g.constant(y.clone())?, t)?;
    Ok(loss.combined(g.constant(x0.clone())?, pred, weights)?)
}

/// One JSON-lines training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub terms: LossTerms,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_dsm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsm_terms: Option<LossTerms>,
    pub skipped: bool,
    pub wall_s: f64,
}

pub struct TeacherOutcome {
    pub teacher: TeacherModel<f32>,
    pub ema: EmaShadow<f32>,
    pub losses: Vec<f64>,
}

/// Trains a teacher on random crops. `log` receives every recorded step.
pub fn train_teacher(
    init: DenoiserModel<f32>,
    pairs: &[SpecPair],
    schedule: &BridgeSchedule,
    grid: &TimeGrid,
    loss: &SpecLoss<f32>,
    cfg: &TeacherConfig,
    mut log: impl FnMut(&StepRecord),
) -> Result<TeacherOutcome, TrainError> {
    cfg.validate()?;
    let mut teacher = TeacherModel::new(init);
    let mut ema = EmaShadow::new(&teacher.model.params, cfg.ema_decay);
    let mut opt = Radam::new(&teacher.model.params, RadamConfig::with_lr(cfg.lr));
    let mut sampler = CropSampler::new(pairs, cfg.crop_frames, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EAC);
    let weights = LossWeights {
        lambda_td: cfg.lambda_td,
        lambda_p: cfg.lambda_p,
    };
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.total_steps());
    let mut skips = 0;
    for step in 0..cfg.total_steps() {
        let (x0, y) = sampler.next_batch(cfg.batch_size);
        let t: Vec<f64> = (0..cfg.batch_size).map(|_| grid.get(rng.gen_range(0..grid.len()))).collect();
        let noise = gaussian::<f32>(x0.shape(), &mut rng);
        let g = Graph::new();
        let p = teacher.model.bind(&g, |n| !DenoiserModel::<f32>::is_s_param(n))?;
        let result = teacher_loss(&teacher, &p, schedule, loss, &x0, &y, &t, &noise, weights)
            .and_then(|(l, terms)| Ok((terms, p.grads(&g.backward(l)?))));
        let record = match result {
            Ok((terms, grads)) if terms.total.is_finite() => {
                skips = 0;
                opt.step(&mut teacher.model.params, &grads)?;
                ema.update(&teacher.model.params)?;
                losses.push(terms.total);
                StepRecord {
                    step,
                    loss: terms.total,
                    terms,
                    lambda_dsm: None,
                    dsm_terms: None,
                    skipped: false,
                    wall_s: start.elapsed().as_secs_f64(),
                }
            }
            Ok(_) | Err(TrainError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. })) => {
                skips += 1;
                log::warn!("teacher step {step}: non-finite loss or gradient, skipped");
                if skips >= 10 {
                    return Err(TrainError::Diverged(skips, step));
                }
                StepRecord {
                    step,
                    loss: f64::NAN,
                    terms: LossTerms::default(),
                    lambda_dsm: None,
                    dsm_terms: None,
                    skipped: true,
                    wall_s: start.elapsed().as_secs_f64(),
                }
            }
            Err(e) => return Err(e),
        };
        if record.skipped || cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.total_steps()) {
            log(&record);
        }
    }
    Ok(TeacherOutcome { teacher, ema, losses })
}
