//! Python bindings for the serial federated learning simulator.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use tricon_core::cli::{self, ExperimentSpec, MethodSelector};
use tricon_core::comms::{self, ChannelParams, MethodCost};
use tricon_core::contribution::{self, Status, TabulatedUtility};
use tricon_core::model::{self, Activation, LayeredParams, MlpConfig, Tensor2D};
use tricon_core::shuffle::{self, DefenseConfig};
use tricon_core::{rng, Error};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_python<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor2D> {
    Tensor2D::from_rows(&rows).map_err(to_py)
}

/// Multilayer perceptron with frozen-layer support.
#[pyclass(module = "tricon")]
struct Mlp {
    params: LayeredParams,
}

#[pymethods]
impl Mlp {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims, n_classes, activation = "relu", seed = 0))]
    fn new(input_dim: usize, hidden_dims: Vec<usize>, n_classes: usize, activation: &str, seed: u64) -> PyResult<Self> {
        let activation = match activation {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
        };
        let cfg = MlpConfig {
            input_dim,
            hidden_dims,
            n_classes,
            activation,
        };
        Ok(Self {
            params: model::init_params(&cfg, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    #[getter]
    fn freeze_mask(&self) -> Vec<bool> {
        self.params.freeze_mask().to_vec()
    }

    fn flatten(&self) -> Vec<f64> {
        self.params.flatten()
    }

    /// Mean cross-entropy and the flattened gradient.
    fn loss_and_grad(&self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<(f64, Vec<f64>)> {
        let (loss, g) = model::loss_and_grad(&self.params, &tensor(x)?, &y).map_err(to_py)?;
        Ok((loss, g.flatten()))
    }

    /// One SGD step on the trainable layers; returns the pre-step loss.
    fn sgd_step(&mut self, x: Vec<Vec<f64>>, y: Vec<usize>, lr: f64) -> PyResult<f64> {
        let (loss, g) = model::loss_and_grad(&self.params, &tensor(x)?, &y).map_err(to_py)?;
        self.params = model::sgd_step(&self.params, &g, lr).map_err(to_py)?;
        Ok(loss)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        model::predict(&self.params, &tensor(x)?).map_err(to_py)
    }

    /// `(accuracy, mean loss)`
    fn evaluate(&self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<(f64, f64)> {
        model::evaluate(&self.params, &tensor(x)?, &y).map_err(to_py)
    }
}

/// Parsed experiment document driving the subcommands.
#[pyclass(module = "tricon")]
struct Experiment {
    spec: ExperimentSpec,
}

fn selector(method: &str) -> PyResult<MethodSelector> {
    match method {
        "tricon" => Ok(MethodSelector::Tricon),
        "fedavg" => Ok(MethodSelector::Fedavg),
        "both" => Ok(MethodSelector::Both),
        other => Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    }
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (config_json, seed = None))]
    fn new(config_json: &str, seed: Option<u64>) -> PyResult<Self> {
        let mut spec = ExperimentSpec::from_json(config_json).map_err(to_py)?;
        if let Some(s) = seed {
            spec = spec.with_seed(s);
        }
        Ok(Self { spec })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            spec: cli::load_config(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.spec.run.seed
    }

    /// Summary rows as dicts.
    #[pyo3(signature = (out, method = "both"))]
    fn run<'py>(&self, py: Python<'py>, out: PathBuf, method: &str) -> PyResult<Bound<'py, PyAny>> {
        let sel = selector(method)?;
        let rows = py.detach(|| cli::cmd_run(&self.spec, sel, &out)).map_err(to_py)?;
        to_python(py, &rows)
    }

    fn compare<'py>(&self, py: Python<'py>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let rows = py
            .detach(|| cli::cmd_compare(&self.spec, MethodSelector::Both, &out))
            .map_err(to_py)?;
        to_python(py, &rows)
    }

    fn shapley<'py>(&self, py: Python<'py>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| cli::cmd_shapley(&self.spec, &out)).map_err(to_py)?;
        to_python(py, &report)
    }

    fn attack<'py>(&self, py: Python<'py>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let res = py.detach(|| cli::cmd_attack(&self.spec, &out)).map_err(to_py)?;
        to_python(py, &res)
    }

    /// Mean total-variation label skew; writes `partition.csv`.
    fn partition_report(&self, py: Python<'_>, out: PathBuf) -> PyResult<f64> {
        py.detach(|| cli::cmd_partition_report(&self.spec, &out)).map_err(to_py)
    }
}

/// Shannon-Hartley rate in bits per second.
#[pyfunction]
#[pyo3(signature = (bandwidth, power, gain = 1.0, noise = 1.0))]
fn rate(bandwidth: f64, power: f64, gain: f64, noise: f64) -> f64 {
    comms::rate(&ChannelParams {
        bandwidth,
        power,
        gain,
        noise,
    })
}

/// `(serial_bits, parallel_bits)`
#[pyfunction]
fn cost_totals(rounds: u64, n_clients: u64, model_bits: u64) -> (u64, u64) {
    comms::cost_totals(rounds, n_clients, model_bits)
}

/// `(R_up, C_up)` relative to the baseline; `None` when a method never converged.
#[pyfunction]
fn improvement_rates(
    baseline: (Option<f64>, Option<f64>),
    method: (Option<f64>, Option<f64>),
) -> PyResult<(Option<f64>, Option<f64>)> {
    let b = MethodCost {
        rounds: baseline.0,
        cost: baseline.1,
    };
    let m = MethodCost {
        rounds: method.0,
        cost: method.1,
    };
    comms::improvement_rates(b, m).map_err(to_py)
}

/// Exact Shapley values for a utility tabulated by coalition bitmask.
#[pyfunction]
fn shapley_exact(n_clients: usize, values: Vec<f64>) -> PyResult<Vec<f64>> {
    let u = TabulatedUtility::new(n_clients, values).map_err(to_py)?;
    contribution::shapley_exact(n_clients, &u).map_err(to_py)
}

/// `(phi, std_err)` from `m` sampled permutations.
#[pyfunction]
fn shapley_mc(n_clients: usize, values: Vec<f64>, m: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let u = TabulatedUtility::new(n_clients, values).map_err(to_py)?;
    let est = contribution::shapley_mc(n_clients, &u, m, seed).map_err(to_py)?;
    Ok((est.phi, est.std_err))
}

/// `"Honest"` / `"Flagged"` per client; the threshold defaults to half the median.
#[pyfunction]
#[pyo3(signature = (phi, phi_min = None))]
fn classify(phi: Vec<f64>, phi_min: Option<f64>) -> Vec<&'static str> {
    let t = phi_min.unwrap_or_else(|| contribution::default_threshold(&phi));
    contribution::classify(&phi, t)
        .status
        .iter()
        .map(|s| match s {
            Status::Honest => "Honest",
            Status::Flagged => "Flagged",
        })
        .collect()
}

/// Permute, clip to the L2 ball and add Gaussian noise.
#[pyfunction]
#[pyo3(signature = (z, clip_norm = 1.0, noise_sigma = 1.0, perm_seed = 0, stream_seed = 0, permute = true))]
fn shuffle_clip_noise(
    z: Vec<f64>,
    clip_norm: f64,
    noise_sigma: f64,
    perm_seed: u64,
    stream_seed: u64,
    permute: bool,
) -> PyResult<Vec<f64>> {
    let cfg = DefenseConfig {
        clip_norm,
        noise_sigma,
        perm_seed,
        enabled: true,
        permute,
    };
    cfg.validate().map_err(to_py)?;
    Ok(shuffle::shuffle_clip_noise(&z, &cfg, stream_seed))
}

#[pyfunction]
#[pyo3(signature = (master, tag, path = Vec::new()))]
fn derive_seed(master: u64, tag: &str, path: Vec<u64>) -> u64 {
    rng::derive_seed(master, tag, &path)
}

#[pymodule]
fn tricon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mlp>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(rate, m)?)?;
    m.add_function(wrap_pyfunction!(cost_totals, m)?)?;
    m.add_function(wrap_pyfunction!(improvement_rates, m)?)?;
    m.add_function(wrap_pyfunction!(shapley_exact, m)?)?;
    m.add_function(wrap_pyfunction!(shapley_mc, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(shuffle_clip_noise, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
