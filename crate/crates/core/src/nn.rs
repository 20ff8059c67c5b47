//! Residual MLP backbone shared by the generator and the reward model.
//!
//! Input embedding combines the state, sinusoidal time features, and a learned
//! condition embedding; the trunk is a stack of residual blocks
//! (affine -> relu -> affine, plus skip). The velocity head maps the trunk
//! feature back to state dimension.

use crate::error::{invalid, Result};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityConfig {
    pub state_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_freqs: usize,
    pub n_conditions: usize,
    pub cond_dim: usize,
}

impl VelocityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 4 {
            return Err(invalid(format!(
                "trunk needs at least 4 blocks for truncation, got {}",
                self.blocks
            )));
        }
        if self.state_dim == 0 || self.hidden == 0 || self.n_conditions < 2 || self.cond_dim == 0 {
            return Err(invalid("velocity config has zero-sized field"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + 2 * self.time_freqs + self.cond_dim
    }
}

/// Per-tape cache of parameter leaves so each parameter is registered once.
pub struct ParamVars<'t> {
    map: HashMap<String, Var<'t>>,
}

impl ParamSet {
    pub fn vars<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            map: self
                .iter()
                .map(|(name, p)| (name.clone(), tape.param(name, &p.value)))
                .collect(),
        }
    }
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Result<&Var<'t>> {
        self.map
            .get(name)
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    /// Replace one entry, e.g. to differentiate with respect to a single
    /// tensor in tests.
    pub fn insert(&mut self, name: &str, var: Var<'t>) {
        self.map.insert(name.to_string(), var);
    }
}

fn he_init(rng: &mut RngStream, out_dim: usize, in_dim: usize) -> Tensor {
    let scale = (2.0 / in_dim as f64).sqrt();
    Tensor::new(
        vec![out_dim, in_dim],
        (0..out_dim * in_dim).map(|_| scale * rng.normal()).collect(),
    )
    .expect("valid shape")
}

pub fn init_velocity_params(cfg: &VelocityConfig, rng: &mut RngStream) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    ps.insert("embed.w", he_init(rng, cfg.hidden, cfg.input_dim()))?;
    ps.insert("embed.b", Tensor::zeros(&[cfg.hidden]))?;
    ps.insert(
        "cond.table",
        Tensor::new(
            vec![cfg.n_conditions, cfg.cond_dim],
            (0..cfg.n_conditions * cfg.cond_dim)
                .map(|_| 0.5 * rng.normal())
                .collect(),
        )?,
    )?;
    for b in 0..cfg.blocks {
        ps.insert(&format!("block{b}.w1"), he_init(rng, cfg.hidden, cfg.hidden))?;
        ps.insert(&format!("block{b}.b1"), Tensor::zeros(&[cfg.hidden]))?;
        // Zero-init the second affine so each block starts as the identity.
        ps.insert(&format!("block{b}.w2"), Tensor::zeros(&[cfg.hidden, cfg.hidden]))?;
        ps.insert(&format!("block{b}.b2"), Tensor::zeros(&[cfg.hidden]))?;
    }
    ps.insert("head.w", he_init(rng, cfg.state_dim, cfg.hidden))?;
    ps.insert("head.b", Tensor::zeros(&[cfg.state_dim]))?;
    Ok(ps)
}

/// Sinusoidal features [sin(w_j t), cos(w_j t)] with geometric frequencies.
pub fn time_features(ts: &[f64], freqs: usize) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * 2 * freqs);
    for &t in ts {
        for j in 0..freqs {
            let w = std::f64::consts::PI * (1 << j) as f64;
            data.push((w * t).sin());
            data.push((w * t).cos());
        }
    }
    Tensor::new(vec![ts.len(), 2 * freqs], data).expect("valid shape")
}

/// Trunk feature after `depth` residual blocks: [n, hidden].
pub fn trunk_features<'t>(
    cfg: &VelocityConfig,
    pv: &ParamVars<'t>,
    tape: &'t Tape,
    x: &Var<'t>,
    ts: &[f64],
    conds: &[usize],
    depth: usize,
) -> Result<Var<'t>> {
    let n = x.shape()[0];
    if x.shape() != [n, cfg.state_dim] {
        return Err(invalid(format!(
            "trunk input shape {:?}, expected [{n}, {}]",
            x.shape(),
            cfg.state_dim
        )));
    }
    if ts.len() != n || conds.len() != n {
        return Err(invalid("trunk: batch length mismatch between x, t, conditions"));
    }
    for &c in conds {
        if c >= cfg.n_conditions {
            return Err(invalid(format!("condition {c} >= {}", cfg.n_conditions)));
        }
    }
    if depth > cfg.blocks {
        return Err(invalid(format!("trunk depth {depth} > {}", cfg.blocks)));
    }
    let tf = tape.constant(time_features(ts, cfg.time_freqs));
    let ce = Var::gather_rows(pv.get("cond.table")?, conds)?;
    let inp = Var::concat_cols(&[x.clone(), tf, ce])?;
    let mut h = inp.linear(pv.get("embed.w")?, pv.get("embed.b")?)?.relu();
    for b in 0..depth {
        let z = h
            .linear(pv.get(&format!("block{b}.w1"))?, pv.get(&format!("block{b}.b1"))?)?
            .relu()
            .linear(pv.get(&format!("block{b}.w2"))?, pv.get(&format!("block{b}.b2"))?)?;
        h = h.add(&z)?;
    }
    Ok(h)
}

/// Predicted velocity v(x_t, t, c): [n, state_dim].
pub fn velocity_forward<'t>(
    cfg: &VelocityConfig,
    pv: &ParamVars<'t>,
    tape: &'t Tape,
    x: &Var<'t>,
    ts: &[f64],
    conds: &[usize],
) -> Result<Var<'t>> {
    trunk_features(cfg, pv, tape, x, ts, conds, cfg.blocks)?
        .linear(pv.get("head.w")?, pv.get("head.b")?)
}

/// Convenience forward without gradient tracking.
pub fn velocity_no_grad(
    cfg: &VelocityConfig,
    params: &ParamSet,
    x: &Tensor,
    ts: &[f64],
    conds: &[usize],
) -> Result<Tensor> {
    let tape = Tape::new();
    let pv = params.vars(&tape);
    let xv = tape.constant(x.clone());
    Ok(velocity_forward(cfg, &pv, &tape, &xv, ts, conds)?.value().clone())
}
