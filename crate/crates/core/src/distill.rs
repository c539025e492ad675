//! Consistency-trajectory distillation of a bridge teacher.
//!
//! Per step a triplet `t > u >= s` is drawn and
//!
//! ```text
//! x_tgt  = G_ema(G_ema(Solver(x_t, y, t, u), y, u, s), y, s, 0)     no gradient
//! x_est  = G_ema(G_theta(x_t, y, t, s), y, s, 0)                   gradient via inner G
//! x_self = F_theta(x_t, y, t, t)
//! L      = L_ctm(x_tgt, x_est) + lambda_dsm * L_dsm(x0, x_self)
//! ```
//!
//! with `lambda_dsm` the ratio of squared last-layer gradient norms.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{gaussian, BridgeSchedule, TimeGrid};
use crate::data::{CropSampler, SpecPair};
use crate::losses::{LossTerms, LossWeights, SpecLoss};
use crate::model::{BoundParams, DenoiserModel, EmaShadow, ModelConfig, LAST_LAYER};
use crate::optim::{Radam, RadamConfig};
use crate::teacher::{StepRecord, TeacherModel, TrainError};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub const LAMBDA_DSM_MIN: f64 = 1e-4;
pub const LAMBDA_DSM_MAX: f64 = 1e4;
pub const LAMBDA_DSM_EPS: f64 = 1e-12;
/// Consecutive non-finite steps tolerated before aborting.
pub const MAX_SKIPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_td: f64,
    pub lambda_p: f64,
    /// Tuned for the 2000-step desk run; a 70k-step run would use 0.999.
    pub ema_decay: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub crop_frames: usize,
    pub seed: u64,
    pub log_every: usize,
    pub disable_ctm_aux: bool,
    pub disable_dsm_aux: bool,
    pub disable_td: bool,
    pub disable_pesq: bool,
    pub cm_mode: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_td: 1e-3,
            lambda_p: 5e-4,
            ema_decay: 0.97,
            lr: 6e-4,
            batch_size: 1,
            epochs: 100,
            steps_per_epoch: 20,
            crop_frames: 32,
            seed: 0,
            log_every: 50,
            disable_ctm_aux: false,
            disable_dsm_aux: false,
            disable_td: false,
            disable_pesq: false,
            cm_mode: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda_td < 0.0 || self.lambda_p < 0.0 || self.lambda_td.is_nan() || self.lambda_p.is_nan() {
            return Err(TrainError::Config("loss weights must be >= 0".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(TrainError::Config("lr must be > 0 and ema_decay in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.crop_frames < 4 {
            return Err(TrainError::Config("batch_size >= 1 and crop_frames >= 4 required".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Weights of the trajectory loss after the ablation flags.
    pub fn ctm_weights(&self) -> LossWeights {
        self.weights(self.disable_ctm_aux)
    }

    /// Weights of the denoising loss after the ablation flags.
    pub fn dsm_weights(&self) -> LossWeights {
        self.weights(self.disable_dsm_aux)
    }

    fn weights(&self, no_aux: bool) -> LossWeights {
        LossWeights {
            lambda_td: if no_aux || self.disable_td { 0.0 } else { self.lambda_td },
            lambda_p: if no_aux || self.disable_pesq { 0.0 } else { self.lambda_p },
        }
    }
}

/// Positions on the ascending axis `0 = anchor (time 0)`, `k = grid[N - k]`,
/// so position `N` is the top of the grid. Invariant: `s <= u < t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimestepTriplet {
    pub i_t: usize,
    pub i_u: usize,
    pub i_s: usize,
}

impl TimestepTriplet {
    pub fn time(grid: &TimeGrid, pos: usize) -> f64 {
        if pos == 0 {
            0.0
        } else {
            grid.get(grid.len() - pos)
        }
    }

    /// `(t, u, s)`.
    pub fn times(&self, grid: &TimeGrid) -> (f64, f64, f64) {
        (Self::time(grid, self.i_t), Self::time(grid, self.i_u), Self::time(grid, self.i_s))
    }
}

/// `i_t` uniform over positions `2..=N` (t above the grid minimum), `i_s`
/// uniform over `[0, i_t)` including the anchor, `i_u` uniform over
/// `[i_s, i_t)`. `cm_mode` pins `i_s` to the anchor.
pub fn sample_triplet(grid: &TimeGrid, cm_mode: bool, rng: &mut impl Rng) -> TimestepTriplet {
    let n = grid.len();
    assert!(n >= 2, "grid needs two points");
    let i_t = rng.gen_range(2..=n);
    let i_s = if cm_mode { 0 } else { rng.gen_range(0..i_t) };
    let i_u = rng.gen_range(i_s..i_t);
    TimestepTriplet { i_t, i_u, i_s }
}

/// Ratio of squared gradient norms, clamped; `None` when both are zero.
pub fn adaptive_lambda_dsm(grad_ctm: &[Tensor<f64>], grad_dsm: &[Tensor<f64>]) -> Option<f64> {
    let ctm: f64 = grad_ctm.iter().map(|g| g.sq_norm()).sum();
    let dsm: f64 = grad_dsm.iter().map(|g| g.sq_norm()).sum();
    if ctm == 0.0 && dsm == 0.0 {
        return None;
    }
    Some((ctm / (dsm + LAMBDA_DSM_EPS)).clamp(LAMBDA_DSM_MIN, LAMBDA_DSM_MAX))
}

/// Everything the distillation step reads but does not train.
pub struct DistillContext<'a, R: Real> {
    pub teacher: &'a TeacherModel<R>,
    pub schedule: &'a BridgeSchedule,
    pub grid: &'a TimeGrid,
    pub loss: &'a SpecLoss<R>,
}

pub struct DistillState<R: Real> {
    pub student: DenoiserModel<R>,
    pub ema: EmaShadow<R>,
    pub opt: Radam,
    pub step: usize,
    pub skips: usize,
}

impl<R: Real> DistillState<R> {
    /// Student and EMA start from the teacher weights with a zero `s` projection.
    pub fn from_teacher(teacher: &TeacherModel<R>, cfg: &DistillConfig) -> Self {
        let mut student = teacher.model.clone();
        let fresh = DenoiserModel::<R>::new(ModelConfig {
            seed: teacher.model.config.seed ^ 0x5_u64,
            ..teacher.model.config.clone()
        });
        for (name, t) in fresh.params.iter() {
            if DenoiserModel::<R>::is_s_param(name) {
                student.params.insert(name, t.clone());
            }
        }
        student.zero_s_projection();
        let ema = EmaShadow::new(&student.params, cfg.ema_decay);
        let opt = Radam::new(&student.params, RadamConfig::with_lr(cfg.lr));
        Self {
            student,
            ema,
            opt,
            step: 0,
            skips: 0,
        }
    }

    pub fn ema_model(&self) -> DenoiserModel<R> {
        self.ema.model(&self.student.config)
    }
}

/// Gradient-free `G_ema(x, y, t, s)`.
fn g_ema<R: Real>(ema: &DenoiserModel<R>, x: &Tensor<R>, y: &Tensor<R>, t: &[f64], s: &[f64]) -> Result<Tensor<R>, TrainError> {
    if t == s {
        return Ok(x.clone());
    }
    let g = Graph::new();
    let p = ema.bind_frozen(&g)?;
    Ok(ema.g_theta(&p, g.constant(x.clone())?, g.constant(y.clone())?, t, s)?.value())
}

/// `x_tgt`, computed entirely outside any gradient tape.
#[allow(clippy::too_many_arguments)]
pub fn target<R: Real>(
    ctx: &DistillContext<'_, R>,
    ema: &DenoiserModel<R>,
    x_t: &Tensor<R>,
    y: &Tensor<R>,
    t: &[f64],
    u: &[f64],
    s: &[f64],
) -> Result<Tensor<R>, TrainError> {
    let x_u = ctx.teacher.solver_step(ctx.schedule, x_t, y, t, u)?;
    let x_s = g_ema(ema, &x_u, y, u, s)?;
    let zeros = vec![0.0; s.len()];
    g_ema(ema, &x_s, y, s, &zeros)
}

/// The three quantities of one step. `x_est` and `x_self` live on `g`.
pub struct Targets<'g, R: Real> {
    pub x_tgt: Tensor<R>,
    pub x_est: Var<'g, R>,
    pub x_self: Var<'g, R>,
}

#[allow(clippy::too_many_arguments)]
pub fn build_targets<'g, R: Real>(
    ctx: &DistillContext<'_, R>,
    student: &DenoiserModel<R>,
    params: &BoundParams<'g, R>,
    ema: &DenoiserModel<R>,
    ema_params: &BoundParams<'g, R>,
    x_t: &Tensor<R>,
    y: &Tensor<R>,
    t: &[f64],
    u: &[f64],
    s: &[f64],
) -> Result<Targets<'g, R>, TrainError> {
    let g = params.vars()[0].graph();
    let x_tgt = target(ctx, ema, x_t, y, t, u, s)?;
    let (xv, yv) = (g.constant(x_t.clone())?, g.constant(y.clone())?);
    let inner = student.g_theta(params, xv, yv, t, s)?;
    let zeros = vec![0.0; s.len()];
    let x_est = ema.g_theta(ema_params, inner, yv, s, &zeros)?;
    let x_self = student.f_theta(params, xv, yv, t, t)?;
    Ok(Targets { x_tgt, x_est, x_self })
}

/// One optimiser step on a `[B, 2, F, K]` batch. Non-finite steps are skipped
/// and counted; [`MAX_SKIPS`] in a row abort with [`TrainError::Diverged`].
pub fn distill_step<R: Real>(
    ctx: &DistillContext<'_, R>,
    state: &mut DistillState<R>,
    cfg: &DistillConfig,
    x0: &Tensor<R>,
    y: &Tensor<R>,
    rng: &mut ChaCha8Rng,
    start: Instant,
) -> Result<StepRecord, TrainError> {
    let b = x0.shape()[0];
    let triplets: Vec<_> = (0..b).map(|_| sample_triplet(ctx.grid, cfg.cm_mode, rng)).collect();
    let times: Vec<_> = triplets.iter().map(|tr| tr.times(ctx.grid)).collect();
    let t: Vec<f64> = times.iter().map(|x| x.0).collect();
    let u: Vec<f64> = times.iter().map(|x| x.1).collect();
    let s: Vec<f64> = times.iter().map(|x| x.2).collect();
    let noise = gaussian::<R>(x0.shape(), rng);
    let step = state.step;
    state.step += 1;

    let outcome = (|| -> Result<_, TrainError> {
        let x_t = ctx.schedule.marginal_batch(x0, y, &t, &noise)?;
        let ema = state.ema_model();
        let g = Graph::new();
        let params = state.student.bind(&g, |_| true)?;
        let ema_params = ema.bind_frozen(&g)?;
        let tg = build_targets(ctx, &state.student, &params, &ema, &ema_params, &x_t, y, &t, &u, &s)?;
        let (l_ctm, ctm_terms) = ctx.loss.combined(g.constant(tg.x_tgt)?, tg.x_est, cfg.ctm_weights())?;
        let (l_dsm, dsm_terms) = ctx.loss.combined(g.constant(x0.clone())?, tg.x_self, cfg.dsm_weights())?;
        if !(ctm_terms.total.is_finite() && dsm_terms.total.is_finite()) {
            return Err(TensorError::NonFinite { op: "loss" }.into());
        }
        let g_ctm = params.grads(&g.backward_retain(l_ctm)?);
        let g_dsm = params.grads(&g.backward(l_dsm)?);
        let last = |gs: &[Option<Tensor<R>>]| -> Vec<Tensor<f64>> {
            state
                .student
                .params
                .names()
                .iter()
                .zip(gs)
                .filter(|(n, _)| LAST_LAYER.contains(&n.as_str()))
                .filter_map(|(_, g)| g.as_ref().map(|g| g.cast()))
                .collect()
        };
        let lambda = adaptive_lambda_dsm(&last(&g_ctm), &last(&g_dsm)).unwrap_or_else(|| {
            log::warn!("step {step}: both last-layer gradients are zero; lambda_dsm = 1");
            1.0
        });
        let l = R::lit(lambda);
        let grads: Vec<Option<Tensor<R>>> = g_ctm
            .into_iter()
            .zip(g_dsm)
            .map(|(a, d)| match (a, d) {
                (Some(a), Some(d)) => Some(a.zip_map(&d, |x, y| x + l * y).expect("same shape")),
                (Some(a), None) => Some(a),
                (None, Some(d)) => Some(d.map(|y| l * y)),
                (None, None) => None,
            })
            .collect();
        Ok((ctm_terms, dsm_terms, lambda, grads))
    })();

    match outcome {
        Ok((ctm, dsm, lambda, grads)) => {
            state.skips = 0;
            state.opt.step(&mut state.student.params, &grads)?;
            state.ema.update(&state.student.params)?;
            Ok(StepRecord {
                step,
                loss: ctm.total + lambda * dsm.total,
                terms: ctm,
                lambda_dsm: Some(lambda),
                dsm_terms: Some(dsm),
                skipped: false,
                wall_s: start.elapsed().as_secs_f64(),
            })
        }
        Err(TrainError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. })) => {
            state.skips += 1;
            log::warn!("distill step {step}: non-finite loss or gradient, skipped");
            if state.skips >= MAX_SKIPS {
                return Err(TrainError::Diverged(state.skips, step));
            }
            Ok(StepRecord {
                step,
                loss: f64::NAN,
                terms: LossTerms::default(),
                lambda_dsm: None,
                dsm_terms: None,
                skipped: true,
                wall_s: start.elapsed().as_secs_f64(),
            })
        }
        Err(e) => Err(e),
    }
}

/// Full distillation run.
pub fn distill<R: Real>(
    ctx: &DistillContext<'_, R>,
    pairs: &[SpecPair],
    cfg: &DistillConfig,
    mut log: impl FnMut(&StepRecord),
) -> Result<DistillState<R>, TrainError> {
    cfg.validate()?;
    let mut state = DistillState::from_teacher(ctx.teacher, cfg);
    let mut sampler = CropSampler::new(pairs, cfg.crop_frames, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD157);
    let start = Instant::now();
    let total = cfg.total_steps();
    for step in 0..total {
        let (x0, y) = sampler.next_batch(cfg.batch_size);
        let rec = distill_step(ctx, &mut state, cfg, &x0.cast(), &y.cast(), &mut rng, start)?;
        if rec.skipped || cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
            log(&rec);
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_mapping() {
        let base = DistillConfig::default();
        assert_eq!(base.ctm_weights().lambda_td, 1e-3);
        assert_eq!(base.dsm_weights().lambda_p, 5e-4);
        let a = DistillConfig {
            disable_ctm_aux: true,
            ..base.clone()
        };
        assert_eq!(a.ctm_weights(), LossWeights::PLAIN);
        assert_eq!(a.dsm_weights(), base.dsm_weights());
        let d = DistillConfig {
            disable_td: true,
            ..base.clone()
        };
        assert_eq!((d.ctm_weights().lambda_td, d.dsm_weights().lambda_td), (0.0, 0.0));
        assert_eq!(d.ctm_weights().lambda_p, 5e-4);
    }

    #[test]
    fn triplet_positions_map_to_grid() {
        let g = TimeGrid::new(5, 7.0, 0.03, 1.0).unwrap();
        assert_eq!(TimestepTriplet::time(&g, 0), 0.0);
        assert_eq!(TimestepTriplet::time(&g, 1), 0.03);
        assert_eq!(TimestepTriplet::time(&g, 5), 1.0);
    }

    #[test]
    fn lambda_edge_cases() {
        let z = vec![Tensor::<f64>::zeros(&[3])];
        assert_eq!(adaptive_lambda_dsm(&z, &z), None);
        let a = vec![Tensor::new(&[2], vec![1.0, 2.0]).unwrap()];
        assert!((adaptive_lambda_dsm(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(adaptive_lambda_dsm(&a, &z).unwrap(), LAMBDA_DSM_MAX);
        assert_eq!(adaptive_lambda_dsm(&z, &a).unwrap(), LAMBDA_DSM_MIN);
    }
}
