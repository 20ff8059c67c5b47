//! Policy-gradient alignment of the flow sampler: trajectory-level GRPO with
//! terminal rewards, and the step-wise variant that branches k candidates per
//! denoising step and scores each one on the noisy state directly.

use crate::data::Condition;
use crate::error::{invalid, Error, Result};
use crate::flow::{sample_trajectory, sde_mean_std, sde_mean_var, Trajectory, VelocityModel};
use crate::nn::VelocityConfig;
use crate::params::ParamSet;
use crate::reward::{reward_score, RewardModel};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Grpo,
    StepGrpo,
}

/// How the chain continues after a branched step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Continuation {
    /// Keep one candidate chosen uniformly (the default; equivalent in
    /// distribution to a fresh transition draw).
    Random,
    /// Keep the candidate the reward model scored highest.
    Greedy,
}

#[derive(Debug, Clone)]
pub struct GrpoConfig {
    pub algo: Algo,
    /// Trajectories per group (GRPO).
    pub group_size: usize,
    /// Branch factor per step (Step-GRPO).
    pub k: usize,
    pub eps_clip: f64,
    pub beta: f64,
    pub lr: f64,
    /// SDE noise scale a.
    pub noise_scale: f64,
    pub t_steps: usize,
    pub continuation: Continuation,
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        match self.algo {
            Algo::Grpo if self.group_size < 2 => {
                return Err(invalid("grpo needs group_size >= 2"));
            }
            Algo::StepGrpo if self.k < 2 => {
                return Err(invalid("step-grpo needs k >= 2"));
            }
            _ => {}
        }
        if self.eps_clip <= 0.0 {
            return Err(invalid("eps_clip must be positive"));
        }
        if self.beta < 0.0 {
            return Err(invalid("beta must be >= 0"));
        }
        if self.lr <= 0.0 {
            return Err(invalid("lr must be positive"));
        }
        if self.t_steps < 2 {
            return Err(invalid("t_steps must be >= 2"));
        }
        if self.algo == Algo::StepGrpo && self.noise_scale <= 0.0 {
            return Err(invalid("step-grpo needs a stochastic sampler (noise_scale > 0)"));
        }
        Ok(())
    }
}

/// Frozen behaviour policy and reference policy for one update.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub theta_old: ParamSet,
    pub pi_ref: ParamSet,
}

impl PolicySnapshot {
    pub fn new(model: &VelocityModel) -> PolicySnapshot {
        PolicySnapshot {
            theta_old: model.params.clone(),
            pi_ref: model.params.clone(),
        }
    }

    /// Re-freeze the behaviour policy at the current parameters; the
    /// reference policy stays at its original pretrained value.
    pub fn refresh(&mut self, model: &VelocityModel) {
        self.theta_old = model.params.clone();
    }
}

/// Group-relative advantages: (R_i - mean) / population std. A degenerate
/// group (std below 1e-8) gets all-zero advantages instead of a blow-up.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(invalid(format!("group_advantage: need >= 2 rewards, got {n}")));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("group_advantage: reward".into()));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; n]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Advantages over the k candidates of one step; same normalization as the
/// trajectory-level group.
pub fn step_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    group_advantage(rewards)
}

/// min(r * A, clip(r, 1 - eps, 1 + eps) * A).
pub fn clipped_objective(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    (ratio * advantage).min(clipped * advantage)
}

/// KL between two isotropic Gaussians with equal stddev:
/// ||mean_theta - mean_ref||^2 / (2 std^2).
pub fn gaussian_kl(mean_theta: &Tensor, mean_ref: &Tensor, std: f64) -> Result<f64> {
    if std <= 0.0 {
        return Err(invalid(format!("gaussian_kl: std={std} must be positive")));
    }
    Ok(mean_theta.sub(mean_ref)?.norm_sq() / (2.0 * std * std))
}

/// Probability ratio of one recorded transition under parameters `theta`
/// against the behaviour policy that generated it:
/// exp((||x - mean_old||^2 - ||x - mean_theta||^2) / (2 std^2)).
pub fn prob_ratio(
    model: &VelocityModel,
    theta: &ParamSet,
    x: &Tensor,
    x_next: &Tensor,
    mean_old: &Tensor,
    std: f64,
    t: f64,
    s: f64,
    a: f64,
    cond: Condition,
) -> Result<f64> {
    if std <= 0.0 {
        return Err(invalid("prob_ratio: deterministic steps have no ratio"));
    }
    let (mean_new, _) = sde_mean_std(model, theta, x, t, s, a, cond)?;
    let old_sq = x_next.sub(mean_old)?.norm_sq();
    let new_sq = x_next.sub(&mean_new)?.norm_sq();
    Ok(((old_sq - new_sq) / (2.0 * std * std)).exp())
}

#[derive(Debug, Clone, Default)]
pub struct AlignMetrics {
    /// Mean terminal reward of the rollouts used for this update.
    pub reward: f64,
    /// Mean per-step candidate reward (Step-GRPO; equals `reward` for GRPO).
    pub step_reward: f64,
    pub kl: f64,
    pub ratio: f64,
    pub grad_norm: f64,
}

struct ObjectiveStats {
    ratio_sum: f64,
    kl_sum: f64,
    n_terms: usize,
}

fn sde_mean_no_grad(
    cfg: &VelocityConfig,
    params: &ParamSet,
    x: &Tensor,
    t: f64,
    s: f64,
    a: f64,
    conds: &[Condition],
) -> Result<Tensor> {
    let tape = Tape::new();
    let pv = params.vars(&tape);
    Ok(sde_mean_var(cfg, &pv, &tape, x, t, s, a, conds)?.value().clone())
}

fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    let d = rows[0].numel();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// One stochastic step's contribution to the surrogate: per-row ratios from
/// the recorded transitions, clipped advantage terms, and the KL penalty
/// against the reference means. `x_parent` is [n, d]; every row shares the
/// same timestep and stddev.
#[allow(clippy::too_many_arguments)]
fn step_objective<'t>(
    cfg: &VelocityConfig,
    pv: &crate::nn::ParamVars<'t>,
    tape: &'t Tape,
    pi_ref: &ParamSet,
    x_parent: &Tensor,
    x_next: &Tensor,
    mean_old: &Tensor,
    std: f64,
    t: f64,
    s: f64,
    a: f64,
    conds: &[Condition],
    advantages: &[f64],
    grpo: &GrpoConfig,
    stats: &mut ObjectiveStats,
) -> Result<Var<'t>> {
    let n = x_parent.shape()[0];
    let inv = 1.0 / (2.0 * std * std);
    let mean_new = sde_mean_var(cfg, pv, tape, x_parent, t, s, a, conds)?;

    let mut old_sq = Vec::with_capacity(n);
    for i in 0..n {
        let diff: f64 = x_next
            .row(i)
            .iter()
            .zip(mean_old.row(i))
            .map(|(x, m)| (x - m) * (x - m))
            .sum();
        old_sq.push(diff);
    }
    let old_sq = tape.constant(Tensor::from_vec(old_sq));
    let xn = tape.constant(x_next.clone());
    let diff = mean_new.sub(&xn)?;
    let new_sq = diff.mul(&diff)?.row_sum()?;
    let log_r = old_sq.sub(&new_sq)?.scale(inv);
    let r = log_r.exp();

    let adv = tape.constant(Tensor::from_vec(advantages.to_vec()));
    let plain = r.mul(&adv)?;
    let clipped = r.clamp(1.0 - grpo.eps_clip, 1.0 + grpo.eps_clip).mul(&adv)?;
    let surrogate = plain.min2(&clipped)?;

    let mean_ref = sde_mean_no_grad(cfg, pi_ref, x_parent, t, s, a, conds)?;
    let kd = mean_new.sub(&tape.constant(mean_ref))?;
    let kl_rows = kd.mul(&kd)?.row_sum()?.scale(inv);

    stats.ratio_sum += r.value().data().iter().sum::<f64>();
    stats.kl_sum += kl_rows.value().data().iter().sum::<f64>();
    stats.n_terms += n;

    Ok(surrogate.sub(&kl_rows.scale(grpo.beta))?.sum())
}

/// Build the (negated-later) GRPO surrogate over a group of recorded
/// trajectories with trajectory-level advantages.
fn grpo_objective<'t>(
    cfg: &VelocityConfig,
    pv: &crate::nn::ParamVars<'t>,
    tape: &'t Tape,
    pi_ref: &ParamSet,
    rollouts: &[Trajectory],
    advantages: &[f64],
    grpo: &GrpoConfig,
    stats: &mut ObjectiveStats,
) -> Result<Var<'t>> {
    let g = rollouts.len();
    let t_steps = rollouts[0].steps.len();
    let s = 1.0 / t_steps as f64;
    let conds: Vec<Condition> = rollouts.iter().map(|r| r.condition).collect();
    let mut total: Option<Var<'t>> = None;
    let mut n_stoch = 0usize;
    for j in 0..t_steps {
        let std = rollouts[0].steps[j].std;
        if std <= 0.0 {
            continue;
        }
        n_stoch += 1;
        let t = rollouts[0].steps[j].t;
        let x_parent = stack_rows(&rollouts.iter().map(|r| &r.steps[j].x).collect::<Vec<_>>())?;
        let x_next = stack_rows(&rollouts.iter().map(|r| &r.steps[j].next_x).collect::<Vec<_>>())?;
        let mean_old = stack_rows(&rollouts.iter().map(|r| &r.steps[j].mean).collect::<Vec<_>>())?;
        let term = step_objective(
            cfg, pv, tape, pi_ref, &x_parent, &x_next, &mean_old, std, t, s,
            grpo.noise_scale, &conds, advantages, grpo, stats,
        )?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| invalid("grpo_objective: no stochastic steps"))?;
    Ok(total.scale(1.0 / (g * n_stoch) as f64))
}

/// One GRPO update: roll out a group under the frozen behaviour policy,
/// normalize the terminal rewards within the group, and take a single
/// clipped-surrogate ascent step with a KL penalty toward the reference.
pub fn grpo_iteration(
    model: &mut VelocityModel,
    snapshot: &PolicySnapshot,
    reward_fn: &dyn Fn(&Tensor, Condition) -> f64,
    cfg: &GrpoConfig,
    rng: &mut RngStream,
) -> Result<AlignMetrics> {
    cfg.validate()?;
    if cfg.algo != Algo::Grpo {
        return Err(invalid("grpo_iteration called with a step-grpo config"));
    }
    let cond = rng.index(model.cfg.n_conditions);
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let mut sub = rng.substream(i as u64);
        rollouts.push(sample_trajectory(
            model,
            &snapshot.theta_old,
            cond,
            cfg.t_steps,
            cfg.noise_scale,
            &mut sub,
        )?);
    }
    let rewards: Vec<f64> = rollouts
        .iter()
        .map(|r| reward_fn(r.terminal(), cond))
        .collect();
    let advantages = group_advantage(&rewards)?;

    let tape = Tape::new();
    let pv = model.params.vars(&tape);
    let mut stats = ObjectiveStats {
        ratio_sum: 0.0,
        kl_sum: 0.0,
        n_terms: 0,
    };
    let obj = grpo_objective(
        &model.cfg,
        &pv,
        &tape,
        &snapshot.pi_ref,
        &rollouts,
        &advantages,
        cfg,
        &mut stats,
    )?;
    let loss = obj.scale(-1.0);
    if !loss.value().is_finite() {
        return Err(Error::NonFinite("grpo objective".into()));
    }
    let grads = tape.backward(&loss, &model.params)?;
    let gn = ParamSet::grad_norm(&grads);
    model.params.adam_step(&grads, cfg.lr, 0.9, 0.999, 1e-8)?;

    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(AlignMetrics {
        reward: mean_reward,
        step_reward: mean_reward,
        kl: stats.kl_sum / stats.n_terms.max(1) as f64,
        ratio: stats.ratio_sum / stats.n_terms.max(1) as f64,
        grad_norm: gn,
    })
}

/// One branched step of a Step-GRPO chain, kept for the update.
struct BranchRecord {
    t: f64,
    parent: Tensor,
    mean: Tensor,
    std: f64,
    candidates: Tensor,
    advantages: Vec<f64>,
}

/// One Step-GRPO update: walk a single chain under the frozen behaviour
/// policy; at every stochastic step draw k sibling candidates from the same
/// transition, score them with the reward model at their own noise level, and
/// normalize advantages within the step. A single ascent step uses all
/// branched transitions.
pub fn step_grpo_iteration(
    model: &mut VelocityModel,
    snapshot: &PolicySnapshot,
    drm: &RewardModel,
    cfg: &GrpoConfig,
    rng: &mut RngStream,
) -> Result<AlignMetrics> {
    cfg.validate()?;
    if cfg.algo != Algo::StepGrpo {
        return Err(invalid("step_grpo_iteration called with a grpo config"));
    }
    let cond = rng.index(model.cfg.n_conditions);
    let d = model.cfg.state_dim;
    let s = 1.0 / cfg.t_steps as f64;
    let mut x = rng.normal_tensor(&[d]);
    let mut records: Vec<BranchRecord> = Vec::new();
    let mut step_reward_sum = 0.0;
    let mut step_reward_n = 0usize;

    for i in 0..cfg.t_steps {
        let t = 1.0 - i as f64 * s;
        let (mean, std) =
            sde_mean_std(model, &snapshot.theta_old, &x, t, s, cfg.noise_scale, cond)?;
        if std <= 0.0 {
            x = mean;
            continue;
        }
        let t_next = t - s;
        let mut cand_data = Vec::with_capacity(cfg.k * d);
        let mut rewards = Vec::with_capacity(cfg.k);
        for _ in 0..cfg.k {
            let eps = rng.normal_tensor(&[d]);
            let cand = mean.add(&eps.scale(std))?;
            rewards.push(reward_score(drm, &cand, t_next, cond)?);
            cand_data.extend_from_slice(cand.data());
        }
        let candidates = Tensor::new(vec![cfg.k, d], cand_data)?;
        step_reward_sum += rewards.iter().sum::<f64>();
        step_reward_n += rewards.len();
        let advantages = step_advantage(&rewards)?;

        let chosen = match cfg.continuation {
            Continuation::Random => rng.index(cfg.k),
            Continuation::Greedy => {
                rewards
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite rewards"))
                    .expect("k >= 2")
                    .0
            }
        };
        let next = Tensor::from_vec(candidates.row(chosen).to_vec());
        records.push(BranchRecord {
            t,
            parent: x.clone(),
            mean,
            std,
            candidates,
            advantages,
        });
        x = next;
    }
    if records.is_empty() {
        return Err(invalid("step_grpo_iteration: no stochastic steps to branch"));
    }
    let terminal_reward = reward_score(drm, &x, 0.0, cond)?;

    let tape = Tape::new();
    let pv = model.params.vars(&tape);
    let mut stats = ObjectiveStats {
        ratio_sum: 0.0,
        kl_sum: 0.0,
        n_terms: 0,
    };
    let mut total: Option<Var<'_>> = None;
    let conds = vec![cond; cfg.k];
    for rec in &records {
        // k sibling candidates share one parent: replicate the parent row so
        // the batched objective sees one transition per candidate.
        let parent_rows = stack_rows(&vec![&rec.parent; cfg.k])?;
        let mean_rows = stack_rows(&vec![&rec.mean; cfg.k])?;
        let term = step_objective(
            &model.cfg,
            &pv,
            &tape,
            &snapshot.pi_ref,
            &parent_rows,
            &rec.candidates,
            &mean_rows,
            rec.std,
            rec.t,
            s,
            cfg.noise_scale,
            &conds,
            &rec.advantages,
            cfg,
            &mut stats,
        )?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let obj = total
        .expect("records non-empty")
        .scale(1.0 / (cfg.k * records.len()) as f64);
    let loss = obj.scale(-1.0);
    if !loss.value().is_finite() {
        return Err(Error::NonFinite("step-grpo objective".into()));
    }
    let grads = tape.backward(&loss, &model.params)?;
    let gn = ParamSet::grad_norm(&grads);
    model.params.adam_step(&grads, cfg.lr, 0.9, 0.999, 1e-8)?;

    Ok(AlignMetrics {
        reward: terminal_reward,
        step_reward: step_reward_sum / step_reward_n.max(1) as f64,
        kl: stats.kl_sum / stats.n_terms.max(1) as f64,
        ratio: stats.ratio_sum / stats.n_terms.max(1) as f64,
        grad_norm: gn,
    })
}
