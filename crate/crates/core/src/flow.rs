//! Flow-matching generation: straight-line interpolation, the velocity-field
//! training loss, Euler ODE sampling, and the matched SDE sampler whose
//! Gaussian transition densities drive the policy-gradient ratios.

use crate::data::{Condition, DatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::nn::{init_velocity_params, velocity_forward, velocity_no_grad, ParamVars, VelocityConfig};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp bound keeping sigma_t and the drift correction away from the
/// singularities at t=0 and t=1.
pub const T_MIN: f64 = 1e-3;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub cfg: VelocityConfig,
    pub params: ParamSet,
}

impl VelocityModel {
    pub fn init(cfg: VelocityConfig, rng: &mut RngStream) -> Result<VelocityModel> {
        let params = init_velocity_params(&cfg, rng)?;
        Ok(VelocityModel { cfg, params })
    }

    /// Velocity at a single state: x is [d].
    pub fn velocity(&self, params: &ParamSet, x: &Tensor, t: f64, cond: Condition) -> Result<Tensor> {
        let row = x.reshaped(&[1, x.numel()])?;
        let v = velocity_no_grad(&self.cfg, params, &row, &[t], &[cond])?;
        v.reshaped(&[x.numel()])
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub t: f64,
    pub x: Tensor,
    pub mean: Tensor,
    pub std: f64,
    pub next_x: Tensor,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub condition: Condition,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn terminal(&self) -> &Tensor {
        &self.steps.last().expect("non-empty trajectory").next_x
    }
}

/// Eq-1 style straight-line interpolation between data and noise.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolate: t={t} outside [0, 1]")));
    }
    x0.scale(1.0 - t).add(&x1.scale(t))
}

/// Flow-matching loss on a batch: mean squared error between the predicted
/// velocity at x_t and the target x1 - x0.
pub fn fm_loss<'t>(
    cfg: &VelocityConfig,
    pv: &ParamVars<'t>,
    tape: &'t Tape,
    x0: &Tensor,
    x1: &Tensor,
    ts: &[f64],
    conds: &[Condition],
) -> Result<Var<'t>> {
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "fm_loss",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    let n = x0.shape()[0];
    let d = x0.shape()[1];
    let mut xt = vec![0.0; n * d];
    for i in 0..n {
        let t = ts[i];
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("fm_loss: t={t} outside [0, 1]")));
        }
        for j in 0..d {
            xt[i * d + j] = (1.0 - t) * x0.row(i)[j] + t * x1.row(i)[j];
        }
    }
    let xt = tape.constant(Tensor::new(vec![n, d], xt)?);
    let target = tape.constant(x1.sub(x0)?);
    let v = velocity_forward(cfg, pv, tape, &xt, ts, conds)?;
    v.mse(&target)
}

#[derive(Debug, Clone)]
pub struct FmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Train a velocity field on a dataset spec. Returns the model and the
/// per-step loss curve. Aborts on a non-finite loss, naming the step.
pub fn train_fm(
    spec: &DatasetSpec,
    model_cfg: VelocityConfig,
    train: &FmTrainConfig,
) -> Result<(VelocityModel, Vec<f64>)> {
    spec.validate()?;
    let mut init_rng = RngStream::new(train.seed, 0);
    let mut model = VelocityModel::init(model_cfg, &mut init_rng)?;
    let mut data_rng = RngStream::new(train.seed, 1);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let (x0, conds) = spec.generate_batch(train.batch, &mut data_rng)?;
        let x1 = data_rng.normal_tensor(x0.shape());
        let ts: Vec<f64> = (0..train.batch).map(|_| data_rng.uniform()).collect();
        let tape = Tape::new();
        let pv = model.params.vars(&tape);
        let loss = fm_loss(&model.cfg, &pv, &tape, &x0, &x1, &ts, &conds)?;
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("fm loss diverged at step {step}")));
        }
        losses.push(lv);
        let grads = tape.backward(&loss, &model.params)?;
        model.params.adam_step(&grads, train.lr, 0.9, 0.999, 1e-8)?;
    }
    Ok((model, losses))
}

/// Noise scale sigma_t = a * sqrt(t / (1 - t)), with t clamped away from the
/// endpoints.
pub fn sigma_t(a: f64, t: f64) -> f64 {
    let tc = t.clamp(T_MIN, 1.0 - T_MIN);
    a * (tc / (1.0 - tc)).sqrt()
}

/// Euler step of the deterministic probability-flow ODE: x - s * v.
pub fn ode_step(
    model: &VelocityModel,
    params: &ParamSet,
    x: &Tensor,
    t: f64,
    s: f64,
    cond: Condition,
) -> Result<Tensor> {
    if s <= 0.0 || t - s < -1e-12 {
        return Err(invalid(format!("ode_step: invalid step t={t}, s={s}")));
    }
    let v = model.velocity(params, x, t, cond)?;
    x.sub(&v.scale(s))
}

#[derive(Debug, Clone)]
pub struct SdeStep {
    pub mean: Tensor,
    pub std: f64,
    pub next: Tensor,
}

/// Whether the step from t to t - s crosses either clamp region, where the
/// noise scale is meaningless; such steps fall back to the deterministic
/// transport x - s * v.
fn step_is_deterministic(t: f64, s: f64) -> bool {
    t - s <= T_MIN || t >= 1.0 - T_MIN
}

/// Transition mean and stddev of the reverse-time SDE step from t to t - s.
///
/// mean = x - s * [v + sigma_t^2/(2 t) * (x + (1 - t) v)], std = sigma_t * sqrt(s).
/// Two steps are deterministic (std = 0): the final one into t <= T_MIN, so
/// the terminal state is never corrupted, and the first one out of
/// t >= 1 - T_MIN, where sigma_t explodes against the clamp and the state is
/// pure noise anyway. Both are excluded from probability ratios.
pub fn sde_mean_std(
    model: &VelocityModel,
    params: &ParamSet,
    x: &Tensor,
    t: f64,
    s: f64,
    a: f64,
    cond: Condition,
) -> Result<(Tensor, f64)> {
    if s <= 0.0 || t - s < -1e-12 {
        return Err(invalid(format!("sde_step: invalid step t={t}, s={s}")));
    }
    let v = model.velocity(params, x, t, cond)?;
    if step_is_deterministic(t, s) {
        let mean = x.sub(&v.scale(s))?;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("sde drift at t={t}")));
        }
        return Ok((mean, 0.0));
    }
    let tc = t.clamp(T_MIN, 1.0 - T_MIN);
    let sig = sigma_t(a, t);
    let corr = sig * sig / (2.0 * tc);
    // drift = v + corr * (x + (1 - tc) * v)
    let drift = v.add(&x.add(&v.scale(1.0 - tc))?.scale(corr))?;
    if !drift.is_finite() {
        return Err(Error::NonFinite(format!("sde drift at t={t}, x={:?}", x.data())));
    }
    Ok((x.sub(&drift.scale(s))?, sig * s.sqrt()))
}

/// One reverse-time SDE step from t to t - s, drawing the injected noise
/// from `rng` when the step is stochastic.
pub fn sde_step(
    model: &VelocityModel,
    params: &ParamSet,
    x: &Tensor,
    t: f64,
    s: f64,
    a: f64,
    cond: Condition,
    rng: &mut RngStream,
) -> Result<SdeStep> {
    let (mean, std) = sde_mean_std(model, params, x, t, s, a, cond)?;
    let next = if std == 0.0 {
        mean.clone()
    } else {
        let eps = rng.normal_tensor(mean.shape());
        mean.add(&eps.scale(std))?
    };
    Ok(SdeStep { mean, std, next })
}

/// Tape version of the transition mean for a batch of parent states sharing
/// one timestep: x is [n, d], the result is [n, d] differentiable in the
/// parameters.
pub fn sde_mean_var<'t>(
    cfg: &VelocityConfig,
    pv: &ParamVars<'t>,
    tape: &'t Tape,
    x: &Tensor,
    t: f64,
    s: f64,
    a: f64,
    conds: &[Condition],
) -> Result<Var<'t>> {
    if s <= 0.0 || t - s < -1e-12 {
        return Err(invalid(format!("sde_mean_var: invalid step t={t}, s={s}")));
    }
    let xv = tape.constant(x.clone());
    let ts = vec![t; conds.len()];
    let v = velocity_forward(cfg, pv, tape, &xv, &ts, conds)?;
    if step_is_deterministic(t, s) {
        return xv.sub(&v.scale(s));
    }
    let tc = t.clamp(T_MIN, 1.0 - T_MIN);
    let sig = sigma_t(a, t);
    let corr = sig * sig / (2.0 * tc);
    let drift = v.add(&xv.add(&v.scale(1.0 - tc))?.scale(corr))?;
    xv.sub(&drift.scale(s))
}

/// Log-density of the isotropic Gaussian transition kernel.
pub fn transition_logprob(x_next: &Tensor, mean: &Tensor, std: f64) -> Result<f64> {
    if std <= 0.0 {
        return Err(invalid(format!(
            "transition_logprob: std={std}; deterministic steps have no density"
        )));
    }
    if x_next.shape() != mean.shape() {
        return Err(Error::ShapeMismatch {
            op: "transition_logprob",
            lhs: x_next.shape().to_vec(),
            rhs: mean.shape().to_vec(),
        });
    }
    let d = x_next.numel() as f64;
    let diff = x_next.sub(mean)?;
    Ok(-0.5 * d * LN_2PI - d * std.ln() - diff.norm_sq() / (2.0 * std * std))
}

/// Roll out one full reverse-time trajectory on the uniform grid t: 1 -> 0,
/// recording every transition's (mean, std) for later density evaluation.
pub fn sample_trajectory(
    model: &VelocityModel,
    params: &ParamSet,
    cond: Condition,
    t_steps: usize,
    a: f64,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    if t_steps < 2 {
        return Err(invalid(format!("sample_trajectory: T={t_steps} must be >= 2")));
    }
    let d = model.cfg.state_dim;
    let s = 1.0 / t_steps as f64;
    let mut x = rng.normal_tensor(&[d]);
    let mut steps = Vec::with_capacity(t_steps);
    for i in 0..t_steps {
        let t = 1.0 - i as f64 * s;
        let step = sde_step(model, params, &x, t, s, a, cond, rng)?;
        steps.push(TrajectoryStep {
            t,
            x: x.clone(),
            mean: step.mean,
            std: step.std,
            next_x: step.next.clone(),
        });
        x = step.next;
    }
    Ok(Trajectory {
        condition: cond,
        steps,
    })
}

/// Terminal sample of a deterministic (a = 0) rollout.
pub fn ode_sample(
    model: &VelocityModel,
    params: &ParamSet,
    cond: Condition,
    t_steps: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    Ok(sample_trajectory(model, params, cond, t_steps, 0.0, rng)?
        .terminal()
        .clone())
}
