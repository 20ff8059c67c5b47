//! Python bindings for the core pipeline: the exact-math primitives
//! (interpolation, losses, advantages, densities), the deterministic rng,
//! and a small train/sample wrapper around the 2-D toy task.

use drmflow_core::align;
use drmflow_core::data::DatasetSpec;
use drmflow_core::flow::{self, FmTrainConfig, VelocityModel};
use drmflow_core::infer;
use drmflow_core::reward;
use drmflow_core::rng;
use drmflow_core::tensor::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: drmflow_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn interpolate(x0: Vec<f64>, x1: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    let out = flow::interpolate(&Tensor::from_vec(x0), &Tensor::from_vec(x1), t).map_err(err)?;
    Ok(out.data().to_vec())
}

#[pyfunction]
fn sigma_t(a: f64, t: f64) -> f64 {
    flow::sigma_t(a, t)
}

#[pyfunction]
fn bt_loss(s_win: f64, s_lose: f64) -> f64 {
    reward::bt_loss(s_win, s_lose)
}

#[pyfunction]
fn group_advantage(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    align::group_advantage(&rewards).map_err(err)
}

#[pyfunction]
fn step_advantage(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    align::step_advantage(&rewards).map_err(err)
}

#[pyfunction]
fn clipped_objective(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    align::clipped_objective(ratio, advantage, eps_clip)
}

#[pyfunction]
fn gaussian_kl(mean_theta: Vec<f64>, mean_ref: Vec<f64>, std: f64) -> PyResult<f64> {
    align::gaussian_kl(&Tensor::from_vec(mean_theta), &Tensor::from_vec(mean_ref), std).map_err(err)
}

#[pyfunction]
fn transition_logprob(x_next: Vec<f64>, mean: Vec<f64>, std: f64) -> PyResult<f64> {
    flow::transition_logprob(&Tensor::from_vec(x_next), &Tensor::from_vec(mean), std).map_err(err)
}

#[pyfunction]
fn select_best(scores: Vec<f64>) -> PyResult<usize> {
    infer::select_best(&scores).map_err(err)
}

#[pyfunction]
fn diversity_proxy(samples: Vec<Vec<f64>>) -> PyResult<f64> {
    let tensors: Vec<Tensor> = samples.into_iter().map(Tensor::from_vec).collect();
    infer::diversity_proxy(&tensors).map_err(err)
}

/// Counter-based deterministic random stream.
#[pyclass(name = "RngStream")]
struct PyRngStream {
    inner: rng::RngStream,
}

#[pymethods]
impl PyRngStream {
    #[new]
    fn new(seed: u64, stream: u64) -> PyRngStream {
        PyRngStream {
            inner: rng::RngStream::new(seed, stream),
        }
    }

    fn uniform(&mut self) -> f64 {
        self.inner.uniform()
    }

    fn normal(&mut self) -> f64 {
        self.inner.normal()
    }

    fn substream(&self, id: u64) -> PyRngStream {
        PyRngStream {
            inner: self.inner.substream(id),
        }
    }

    fn counter(&self) -> u64 {
        self.inner.counter()
    }
}

/// A velocity field trained on a 2-D Gaussian-mixture toy task.
#[pyclass(name = "FlowModel")]
struct PyFlowModel {
    model: VelocityModel,
    losses: Vec<f64>,
}

#[pymethods]
impl PyFlowModel {
    /// Per-step training loss curve.
    fn loss_curve(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Terminal sample from one reverse-time SDE rollout.
    #[pyo3(signature = (cond, t_steps=8, a=0.7, seed=0, stream=0))]
    fn sample(&self, cond: usize, t_steps: usize, a: f64, seed: u64, stream: u64) -> PyResult<Vec<f64>> {
        let mut r = rng::RngStream::new(seed, stream);
        let traj = flow::sample_trajectory(&self.model, &self.model.params, cond, t_steps, a, &mut r)
            .map_err(err)?;
        Ok(traj.terminal().data().to_vec())
    }

    /// Predicted velocity at (x, t, cond).
    fn velocity(&self, x: Vec<f64>, t: f64, cond: usize) -> PyResult<Vec<f64>> {
        let v = self
            .model
            .velocity(&self.model.params, &Tensor::from_vec(x), t, cond)
            .map_err(err)?;
        Ok(v.data().to_vec())
    }
}

/// Train a flow-matching model on a 2-D mixture with one mode per condition.
#[pyfunction]
#[pyo3(signature = (means, stddev=0.4, hidden=32, blocks=4, steps=200, batch=32, lr=1e-3, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_fm_vector2d(
    means: Vec<(f64, f64)>,
    stddev: f64,
    hidden: usize,
    blocks: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> PyResult<PyFlowModel> {
    let spec = DatasetSpec::Vector2d {
        means: means.iter().map(|&(x, y)| [x, y]).collect(),
        stddev,
    };
    let cfg = drmflow_core::nn::VelocityConfig {
        state_dim: 2,
        hidden,
        blocks,
        time_freqs: 4,
        n_conditions: means.len(),
        cond_dim: 8,
    };
    let (model, losses) = flow::train_fm(&spec, cfg, &FmTrainConfig { steps, batch, lr, seed })
        .map_err(err)?;
    Ok(PyFlowModel { model, losses })
}

#[pymodule]
fn drmflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_t, m)?)?;
    m.add_function(wrap_pyfunction!(bt_loss, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(step_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_objective, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(transition_logprob, m)?)?;
    m.add_function(wrap_pyfunction!(select_best, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_proxy, m)?)?;
    m.add_function(wrap_pyfunction!(train_fm_vector2d, m)?)?;
    m.add_class::<PyRngStream>()?;
    m.add_class::<PyFlowModel>()?;
    Ok(())
}
