//! Named parameter sets with Adam state and JSON checkpointing.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

#[derive(Serialize, Deserialize)]
struct ParamJson {
    shape: Vec<usize>,
    data: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bias-corrected Adam update. Missing gradient entries count as zero;
    /// non-finite gradients abort the run.
    pub fn adam_step(&mut self, grads: &GradMap, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient for parameter {name}")));
            }
            if !self.entries.contains_key(name) {
                return Err(invalid(format!("gradient for unknown parameter {name}")));
            }
        }
        for (name, p) in self.entries.iter_mut() {
            p.step += 1;
            let t = p.step as f64;
            let g = grads.get(name);
            let bc1 = 1.0 - beta1.powf(t);
            let bc2 = 1.0 - beta2.powf(t);
            let gd: &[f64] = match g {
                Some(g) => {
                    if g.shape() != p.value.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "adam_step",
                            lhs: p.value.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    g.data()
                }
                None => &[],
            };
            let n = p.value.numel();
            for i in 0..n {
                let gi = if gd.is_empty() { 0.0 } else { gd[i] };
                let m = beta1 * p.m.data()[i] + (1.0 - beta1) * gi;
                let v = beta2 * p.v.data()[i] + (1.0 - beta2) * gi * gi;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc: BTreeMap<&String, ParamJson> = self
            .entries
            .iter()
            .map(|(k, p)| {
                (
                    k,
                    ParamJson {
                        shape: p.value.shape().to_vec(),
                        data: p.value.data().to_vec(),
                        m: p.m.data().to_vec(),
                        v: p.v.data().to_vec(),
                        step: p.step,
                    },
                )
            })
            .collect();
        serde_json::to_string(&doc).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<ParamSet> {
        let doc: BTreeMap<String, ParamJson> =
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("parse failure: {e}")))?;
        let mut out = ParamSet::new();
        for (name, p) in doc {
            let n: usize = p.shape.iter().product();
            if n != p.data.len() || n != p.m.len() || n != p.v.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} inconsistent with stored lengths {}/{}/{}",
                    p.shape,
                    p.data.len(),
                    p.m.len(),
                    p.v.len()
                )));
            }
            let value = Tensor::new(p.shape.clone(), p.data)
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            out.entries.insert(
                name,
                Param {
                    value,
                    m: Tensor::new(p.shape.clone(), p.m).unwrap(),
                    v: Tensor::new(p.shape, p.v).unwrap(),
                    step: p.step,
                },
            );
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ParamSet::from_json(&s)
    }

    /// Verify this set provides exactly the same names and shapes as `other`.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        for (name, p) in &self.entries {
            match other.entries.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(o) if o.value.shape() != p.value.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: shape {:?} vs {:?}",
                        p.value.shape(),
                        o.value.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn grad_norm(grads: &GradMap) -> f64 {
        grads.values().map(|g| g.norm_sq()).sum::<f64>().sqrt()
    }
}
