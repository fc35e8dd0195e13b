//! Python bindings: configs, allocation, routing math, untrained models and
//! whole training runs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use moelora::allocation::{experts_per_layer as rs_experts_per_layer, AllocationConfig, Profile};
use moelora::config::{ExperimentConfig, DEFAULT_CONFIG_TOML};
use moelora::harness::run_experiment as rs_run_experiment;
use moelora::model::{count_params as rs_count_params, Gating, Sample, TokenBatch, ToyBackbone};
use moelora::routing::{self, GateRecord, Router, RoutingMode};
use moelora::tensor::Tensor;
use moelora::Error;
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Domain(_) | Error::Index { .. } => PyValueError::new_err(e.to_string()),
        Error::Key(k) => PyKeyError::new_err(k),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_config(toml: Option<&str>) -> PyResult<ExperimentConfig> {
    match toml {
        Some(t) => ExperimentConfig::from_toml_str(t).map_err(py_err),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_mode(mode: &str) -> PyResult<RoutingMode> {
    mode.parse().map_err(py_err)
}

/// The commented default experiment config.
#[pyfunction]
fn default_config() -> &'static str {
    DEFAULT_CONFIG_TOML
}

/// SHA-256 of the canonical form of a config.
#[pyfunction]
#[pyo3(signature = (toml=None))]
fn config_hash(toml: Option<&str>) -> PyResult<String> {
    Ok(parse_config(toml)?.hash())
}

/// Power-law expert count at 1-based `layer`.
#[pyfunction]
fn experts_per_layer(n_min: usize, n_max: usize, gamma: f64, num_layers: usize, layer: usize) -> PyResult<usize> {
    let cfg = AllocationConfig {
        n_min,
        n_max,
        gamma,
        num_layers,
        base_experts_per_layer: 0,
        profile: Profile::PowerLaw,
        ..AllocationConfig::default()
    };
    cfg.validate().map_err(py_err)?;
    rs_experts_per_layer(&cfg, layer).map_err(py_err)
}

/// `softmax(logits / tau)`.
#[pyfunction]
fn soft_merge_weights(logits: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    let mut router = Router::new(logits.len(), 1, 0.0, 0);
    if tau < router.tau_min {
        return Err(PyValueError::new_err(format!("tau must be at least {}", router.tau_min)));
    }
    router.set_tau(tau);
    Ok(routing::soft_merge_weights(&Tensor::vector(logits), &router).map_err(py_err)?.into_data())
}

/// Softmax over the `k` largest logits, zero elsewhere.
#[pyfunction]
fn topk_weights(logits: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    Ok(routing::topk_weights(&Tensor::vector(logits), k).map_err(py_err)?.into_data())
}

/// Auxiliary load-balance loss of one layer's per-token gate rows.
#[pyfunction]
fn load_balance_loss(gates: Vec<Vec<f64>>) -> PyResult<f64> {
    let recs: Vec<GateRecord> =
        gates.into_iter().enumerate().map(|(i, probs)| GateRecord { probs, layer: 1, position: i }).collect();
    routing::load_balance_loss(&recs).map_err(py_err)
}

/// Runs a full experiment and returns the final eval `{task: {"loss", "accuracy"}}`.
#[pyfunction]
#[pyo3(signature = (toml=None))]
fn run_experiment(toml: Option<&str>) -> PyResult<BTreeMap<String, BTreeMap<&'static str, f64>>> {
    let cfg = parse_config(toml)?;
    let out = rs_run_experiment(&cfg, &mut |_| Ok(())).map_err(py_err)?;
    Ok(out
        .metrics
        .final_eval()
        .tasks
        .iter()
        .map(|(id, e)| (id.clone(), BTreeMap::from([("loss", e.loss), ("accuracy", e.accuracy)])))
        .collect())
}

/// Trains into a fresh run directory and returns its path.
#[pyfunction]
#[pyo3(signature = (toml=None))]
fn train(toml: Option<&str>) -> PyResult<PathBuf> {
    moelora::cli::cmd_train(&parse_config(toml)?).map_err(py_err)
}

/// A randomly initialized backbone with zero-delta adapters attached.
#[pyclass(name = "Model")]
struct PyModel {
    model: ToyBackbone,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (toml=None, seed=0))]
    fn new(toml: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = parse_config(toml)?;
        let mut model = ToyBackbone::new(cfg.backbone.clone(), seed).map_err(py_err)?;
        model.attach_adapters(&cfg.adapter, seed.wrapping_add(1)).map_err(py_err)?;
        Ok(Self { model })
    }

    /// Logits `[len x vocab]` for every position of `tokens`. `mode` is
    /// `soft`, `topk:K` or `off` (backbone only).
    #[pyo3(signature = (tokens, mode="soft"))]
    fn logits(&self, tokens: Vec<usize>, mode: &str) -> PyResult<Vec<Vec<f64>>> {
        let gating = if mode == "off" { Gating::Off } else { Gating::from(parse_mode(mode)?) };
        if tokens.len() < 2 {
            return Err(PyValueError::new_err("need at least two tokens"));
        }
        let sample = Sample::new(tokens, 1);
        let batch = TokenBatch::new(&[&sample], 0).map_err(py_err)?;
        let logits = self.model.logits_all(&batch, &gating).map_err(py_err)?;
        Ok(logits.data().chunks(logits.cols()).map(<[f64]>::to_vec).collect())
    }

    /// `{"trainable", "active", "frozen"}` under `mode`.
    #[pyo3(signature = (mode="soft"))]
    fn count_params(&self, mode: &str) -> PyResult<BTreeMap<&'static str, usize>> {
        let c = rs_count_params(&self.model, parse_mode(mode)?).map_err(py_err)?;
        Ok(BTreeMap::from([("trainable", c.trainable), ("active", c.active), ("frozen", c.frozen)]))
    }

    fn param_names(&self) -> Vec<String> {
        self.model.params().into_iter().map(|p| p.name).collect()
    }

    /// Per adapted layer, the `(role, rank)` of every expert.
    fn plan(&self) -> Vec<Vec<(&'static str, usize)>> {
        self.model.adapted_layers().map(|l| l.experts.iter().map(|e| (e.role.as_str(), e.rank)).collect()).collect()
    }
}

#[pymodule]
fn moelora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(experts_per_layer, m)?)?;
    m.add_function(wrap_pyfunction!(soft_merge_weights, m)?)?;
    m.add_function(wrap_pyfunction!(topk_weights, m)?)?;
    m.add_function(wrap_pyfunction!(load_balance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
