//! Python bindings: fixed-point encoding, additive sharing, the reference
//! model, secure aggregation, encrypted inference and the CLI commands.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use smpc_fedsim::cli;
use smpc_fedsim::config::ExperimentConfig;
use smpc_fedsim::error::Error;
use smpc_fedsim::fedavg;
use smpc_fedsim::model::{ModelParams, Shape3};
use smpc_fedsim::model_io;
use smpc_fedsim::ring::{FixedPointConfig, RingElement};
use smpc_fedsim::secure_nn::{decrypt_model, encrypt_model, InferenceRunner};
use smpc_fedsim::sharing::{self, ShareVector};
use smpc_fedsim::simnet::{Links, Simulation};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Parameter(_) | Error::Shape(_) | Error::Range { .. } | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn ring(k: u32, f: u32) -> PyResult<FixedPointConfig> {
    FixedPointConfig::new(k, f).map_err(py_err)
}

/// Fixed-point encoding into the ring of `k`-bit integers with `f`
/// fractional bits.
#[pyclass(frozen, from_py_object)]
#[derive(Clone, Copy)]
struct FixedPoint {
    cfg: FixedPointConfig,
}

#[pymethods]
impl FixedPoint {
    #[new]
    #[pyo3(signature = (k=64, f=16))]
    fn new(k: u32, f: u32) -> PyResult<Self> {
        Ok(Self { cfg: ring(k, f)? })
    }

    #[getter]
    fn k(&self) -> u32 {
        self.cfg.bits()
    }

    #[getter]
    fn f(&self) -> u32 {
        self.cfg.frac_bits()
    }

    #[getter]
    fn lsb(&self) -> f64 {
        self.cfg.lsb()
    }

    fn encode(&self, values: Vec<f64>) -> PyResult<Vec<u64>> {
        Ok(self.cfg.encode_slice(&values).map_err(py_err)?.into_iter().map(|v| v.0).collect())
    }

    fn decode(&self, values: Vec<u64>) -> Vec<f64> {
        values.into_iter().map(|v| self.cfg.decode(self.cfg.reduce(v))).collect()
    }

    fn signed(&self, value: u64) -> i64 {
        self.cfg.signed(self.cfg.reduce(value))
    }

    fn __repr__(&self) -> String {
        format!("FixedPoint(k={}, f={})", self.cfg.bits(), self.cfg.frac_bits())
    }
}

/// Splits each ring element of `secret` into `n` additive shares.
#[pyfunction]
#[pyo3(signature = (secret, n, ring, seed=0))]
fn share(secret: Vec<u64>, n: usize, ring: &FixedPoint, seed: u64) -> PyResult<Vec<Vec<u64>>> {
    let cfg = ring.cfg;
    let s: Vec<RingElement> = secret.into_iter().map(|v| cfg.reduce(v)).collect();
    let shares = sharing::share(&s, n, cfg, &mut ChaCha20Rng::seed_from_u64(seed)).map_err(py_err)?;
    Ok(shares.iter().map(|v| v.values().iter().map(|e| e.0).collect()).collect())
}

#[pyfunction]
fn reconstruct(shares: Vec<Vec<u64>>, ring: &FixedPoint) -> PyResult<Vec<u64>> {
    let cfg = ring.cfg;
    let parts = shares
        .into_iter()
        .enumerate()
        .map(|(p, v)| ShareVector::new(p, v.into_iter().map(|x| cfg.reduce(x)).collect(), cfg))
        .collect::<smpc_fedsim::error::Result<Vec<_>>>()
        .map_err(py_err)?;
    Ok(sharing::reconstruct(&parts).map_err(py_err)?.into_iter().map(|v| v.0).collect())
}

/// The reference CNN in plaintext floating point.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Model {
    inner: ModelParams,
}

#[pymethods]
impl Model {
    /// Randomly initialised reference network for `side` x `side` grayscale
    /// images.
    #[staticmethod]
    #[pyo3(signature = (classes, side=16, filters=8, hidden=32, seed=0))]
    fn reference(classes: usize, side: usize, filters: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Self { inner: ModelParams::reference_with(Shape3::new(1, side, side), filters, hidden, classes, &mut rng) }
    }

    /// Reads a plaintext model file.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: model_io::read_plain_model(&path).map_err(py_err)?.1 })
    }

    #[pyo3(signature = (path, k=64, f=16))]
    fn save(&self, path: std::path::PathBuf, k: u32, f: u32) -> PyResult<()> {
        model_io::write_plain_model(&path, &self.inner, ring(k, f)?).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.flatten_params()
    }

    fn with_params(&self, params: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_params(&params).map_err(py_err)? })
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&x).map_err(py_err)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&x).map_err(py_err)
    }

    /// One SGD step on a batch; returns the mean loss before the step.
    fn sgd_step(&mut self, xs: Vec<Vec<f64>>, labels: Vec<usize>, lr: f64) -> PyResult<f64> {
        if xs.len() != labels.len() {
            return Err(PyValueError::new_err("xs and labels differ in length"));
        }
        let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| x.as_slice()).zip(labels).collect();
        self.inner.sgd_step(&batch, lr).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Model(params={}, classes={})", self.inner.param_count(), self.inner.num_classes())
    }
}

/// Plaintext element-wise mean of the parameters.
#[pyfunction]
fn fedavg_plain(models: Vec<Model>) -> PyResult<Model> {
    let ms: Vec<ModelParams> = models.into_iter().map(|m| m.inner).collect();
    Ok(Model { inner: fedavg::fedavg_plain(&ms).map_err(py_err)? })
}

/// Secure aggregation on a simulated network. Returns the reconstructed mean
/// and the number of bytes the hospitals sent.
#[pyfunction]
#[pyo3(signature = (models, ring=None, seed=0))]
fn secure_aggregate(models: Vec<Model>, ring: Option<FixedPoint>, seed: u64) -> PyResult<(Model, u64)> {
    let cfg = ring.map(|r| r.cfg).unwrap_or_default();
    let ms: Vec<ModelParams> = models.into_iter().map(|m| m.inner).collect();
    let (shares, transcript) = fedavg::secure_aggregate(&ms, cfg, Links::default(), seed).map_err(py_err)?;
    Ok((Model { inner: decrypt_model(&shares).map_err(py_err)? }, transcript.total_sent()))
}

/// Encrypted inference of `inputs` with a model secret-shared between the two
/// computing parties. Returns the predictions, bytes sent and simulated
/// nanoseconds.
#[pyfunction]
#[pyo3(signature = (model, inputs, ring=None, seed=0))]
fn encrypted_predict(
    model: &Model,
    inputs: Vec<Vec<f64>>,
    ring: Option<FixedPoint>,
    seed: u64,
) -> PyResult<(Vec<usize>, u64, u64)> {
    let cfg = ring.map(|r| r.cfg).unwrap_or_default();
    let [s0, s1] = encrypt_model(&model.inner, cfg, &mut ChaCha20Rng::seed_from_u64(seed)).map_err(py_err)?;
    let mut runner = InferenceRunner::new(Simulation::new(3, Links::default(), seed), [&s0, &s1], seed).map_err(py_err)?;
    let out = runner.run_batch(&inputs).map_err(py_err)?;
    Ok((out.predictions, out.bytes, out.sim_time_ns))
}

fn config(json: Option<&str>) -> PyResult<ExperimentConfig> {
    match json {
        Some(text) => ExperimentConfig::from_json(text, "<python>").map_err(py_err),
        None => Ok(ExperimentConfig::default()),
    }
}

/// The effective configuration as JSON (defaults filled in).
#[pyfunction]
#[pyo3(signature = (json=None))]
fn config_json(json: Option<&str>) -> PyResult<String> {
    Ok(config(json)?.to_json())
}

/// Runs `train`. Returns the per-round global validation accuracies and the
/// transcript hash.
#[pyfunction]
#[pyo3(signature = (json=None))]
fn train(py: Python<'_>, json: Option<&str>) -> PyResult<(Vec<f64>, String)> {
    let cfg = config(json)?;
    let r = py.detach(|| cli::cmd_train(&cfg)).map_err(py_err)?;
    if let Some(a) = &r.run.abort {
        return Err(PyRuntimeError::new_err(format!("aborted in round {}: {}", a.round, a.error)));
    }
    Ok((r.run.accuracy_column("validation"), r.run.transcript.hash()))
}

/// Runs `infer`; returns the contents of `infer.csv`.
#[pyfunction]
#[pyo3(signature = (json=None))]
fn infer(py: Python<'_>, json: Option<&str>) -> PyResult<String> {
    let cfg = config(json)?;
    Ok(py.detach(|| cli::cmd_infer(&cfg)).map_err(py_err)?.infer_csv)
}

/// Runs `selftest`; returns (suite, cases, failures) per suite.
#[pyfunction]
#[pyo3(signature = (json=None))]
fn selftest(py: Python<'_>, json: Option<&str>) -> PyResult<Vec<(String, usize, usize)>> {
    let cfg = config(json)?;
    let r = py.detach(|| cli::cmd_selftest(&cfg, None)).map_err(py_err)?;
    Ok(r.suites.into_iter().map(|s| (s.name.to_string(), s.cases, s.failures)).collect())
}

#[pymodule]
fn smpc_fedsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<FixedPoint>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(share, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_plain, m)?)?;
    m.add_function(wrap_pyfunction!(secure_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(encrypted_predict, m)?)?;
    m.add_function(wrap_pyfunction!(config_json, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
