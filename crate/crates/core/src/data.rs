//! Synthetic datasets and the ground-truth scoring oracle.
//!
//! Two modes: `vector2d` (Gaussian mixture in the plane, one component per
//! condition) and `grid` (small blob images, one blob center per condition).
//! The oracle reward generates preference labels and evaluates alignment.

use crate::error::{invalid, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub type Condition = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Vector2d {
        means: Vec<[f64; 2]>,
        stddev: f64,
    },
    Grid {
        side: usize,
        centers: Vec<(f64, f64)>,
        sharpness: (f64, f64),
    },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Vector2d { means, stddev } => {
                if means.len() < 2 {
                    return Err(invalid("vector2d needs at least 2 conditions"));
                }
                if *stddev <= 0.0 {
                    return Err(invalid("vector2d stddev must be positive"));
                }
            }
            DatasetSpec::Grid {
                side,
                centers,
                sharpness,
            } => {
                if centers.len() < 2 {
                    return Err(invalid("grid needs at least 2 conditions"));
                }
                if *side == 0 || side % 2 != 0 {
                    return Err(invalid("grid side must be positive and even"));
                }
                if sharpness.0 <= 0.0 || sharpness.1 < sharpness.0 {
                    return Err(invalid("grid sharpness range must be positive and ordered"));
                }
            }
        }
        Ok(())
    }

    pub fn n_conditions(&self) -> usize {
        match self {
            DatasetSpec::Vector2d { means, .. } => means.len(),
            DatasetSpec::Grid { centers, .. } => centers.len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            DatasetSpec::Vector2d { .. } => 2,
            DatasetSpec::Grid { side, .. } => side * side,
        }
    }

    /// Render the grid blob for a condition at a given sharpness.
    fn render_blob(&self, cond: Condition, sharp: f64) -> Vec<f64> {
        let DatasetSpec::Grid { side, centers, .. } = self else {
            unreachable!("render_blob is grid-only")
        };
        let (cx, cy) = centers[cond];
        let s = *side as f64;
        let mut out = Vec::with_capacity(side * side);
        for i in 0..*side {
            for j in 0..*side {
                let dy = (i as f64 - cy) / s;
                let dx = (j as f64 - cx) / s;
                out.push((-sharp * (dx * dx + dy * dy) * s).exp());
            }
        }
        out
    }

    fn reference_sharpness(&self) -> f64 {
        match self {
            DatasetSpec::Grid { sharpness, .. } => 0.5 * (sharpness.0 + sharpness.1),
            DatasetSpec::Vector2d { .. } => 0.0,
        }
    }

    /// One clean sample for a condition.
    pub fn sample_for(&self, cond: Condition, rng: &mut RngStream) -> Vec<f64> {
        match self {
            DatasetSpec::Vector2d { means, stddev } => {
                let m = means[cond];
                vec![m[0] + stddev * rng.normal(), m[1] + stddev * rng.normal()]
            }
            DatasetSpec::Grid { sharpness, .. } => {
                let sharp = rng.uniform_in(sharpness.0, sharpness.1);
                self.render_blob(cond, sharp)
            }
        }
    }

    /// Batch of samples with uniformly drawn conditions: ([n, d], conditions).
    pub fn generate_batch(&self, n: usize, rng: &mut RngStream) -> Result<(Tensor, Vec<Condition>)> {
        if n == 0 {
            return Err(invalid("generate_batch: n must be >= 1"));
        }
        let d = self.state_dim();
        let mut data = Vec::with_capacity(n * d);
        let mut conds = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.index(self.n_conditions());
            data.extend_from_slice(&self.sample_for(c, rng));
            conds.push(c);
        }
        Ok((Tensor::new(vec![n, d], data)?, conds))
    }

    /// Ground-truth reward R*(x, c).
    pub fn oracle_reward(&self, x: &[f64], cond: Condition) -> f64 {
        match self {
            DatasetSpec::Vector2d { means, .. } => {
                let m = means[cond];
                let dx = x[0] - m[0];
                let dy = x[1] - m[1];
                -(dx * dx + dy * dy)
            }
            DatasetSpec::Grid { .. } => {
                let ideal = self.render_blob(cond, self.reference_sharpness());
                let n = ideal.len() as f64;
                let mse: f64 = x
                    .iter()
                    .zip(&ideal)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / n;
                let mean = x.iter().sum::<f64>() / n;
                let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                -mse + 0.25 * (max - mean)
            }
        }
    }

    /// Best oracle reward attainable for a condition.
    pub fn oracle_max(&self, cond: Condition) -> f64 {
        match self {
            DatasetSpec::Vector2d { .. } => 0.0,
            DatasetSpec::Grid { .. } => {
                let ideal = self.render_blob(cond, self.reference_sharpness());
                self.oracle_reward(&ideal, cond)
            }
        }
    }

    /// Mean oracle reward of the data distribution itself, estimated by
    /// sampling; the baseline for alignment thresholds.
    pub fn oracle_data_mean(&self, n: usize, rng: &mut RngStream) -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            let c = i % self.n_conditions();
            let x = self.sample_for(c, rng);
            acc += self.oracle_reward(&x, c);
        }
        acc / n as f64
    }
}
