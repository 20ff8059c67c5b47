//! Reward-guided inference: at every stochastic denoising step, draw k
//! candidate transitions, score each noisy candidate with the reward model,
//! and continue from the best one. With k = 1 this is exactly the plain SDE
//! sampler, including the random stream it consumes.

use crate::data::Condition;
use crate::error::{invalid, Result};
use crate::flow::{sde_mean_std, VelocityModel};
use crate::reward::{reward_score, RewardModel};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub k: usize,
    pub t_steps: usize,
    /// SDE noise scale a.
    pub noise_scale: f64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("sampler k must be >= 1"));
        }
        if self.t_steps < 2 {
            return Err(invalid("sampler t_steps must be >= 2"));
        }
        if self.k > 1 && self.noise_scale <= 0.0 {
            return Err(invalid(
                "candidate selection needs a stochastic sampler (noise_scale > 0)",
            ));
        }
        Ok(())
    }
}

/// Index of the best score; ties go to the first maximum.
pub fn select_best(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(invalid("select_best: empty score list"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("select_best: non-finite score"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Record of one branched step, for inspection and tests.
#[derive(Debug, Clone)]
pub struct SelectionTrace {
    pub t: f64,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

/// Run one reward-guided reverse-time chain; returns the terminal sample and
/// the per-step selection traces (empty entries are deterministic steps).
pub fn stepwise_sample(
    model: &VelocityModel,
    drm: &RewardModel,
    cond: Condition,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<(Tensor, Vec<SelectionTrace>)> {
    cfg.validate()?;
    let d = model.cfg.state_dim;
    let s = 1.0 / cfg.t_steps as f64;
    let mut x = rng.normal_tensor(&[d]);
    let mut traces = Vec::new();
    for i in 0..cfg.t_steps {
        let t = 1.0 - i as f64 * s;
        let (mean, std) = sde_mean_std(model, &model.params, &x, t, s, cfg.noise_scale, cond)?;
        if std <= 0.0 {
            x = mean;
            continue;
        }
        if cfg.k == 1 {
            // Plain SDE step; consume exactly one noise draw.
            let eps = rng.normal_tensor(&[d]);
            x = mean.add(&eps.scale(std))?;
            continue;
        }
        let t_next = t - s;
        let mut candidates = Vec::with_capacity(cfg.k);
        let mut scores = Vec::with_capacity(cfg.k);
        for _ in 0..cfg.k {
            let eps = rng.normal_tensor(&[d]);
            let cand = mean.add(&eps.scale(std))?;
            scores.push(reward_score(drm, &cand, t_next, cond)?);
            candidates.push(cand);
        }
        let chosen = select_best(&scores)?;
        traces.push(SelectionTrace { t, scores, chosen });
        x = candidates.swap_remove(chosen);
    }
    Ok((x, traces))
}

/// Mean pairwise Euclidean distance over a set of samples; the diversity
/// proxy reported by the sweeps.
pub fn diversity_proxy(samples: &[Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid("diversity_proxy: need >= 2 samples"));
    }
    let d = samples[0].numel();
    for s in samples {
        if s.numel() != d {
            return Err(invalid("diversity_proxy: mismatched sample dimensions"));
        }
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            acc += samples[i].sub(&samples[j])?.norm_sq().sqrt();
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}
