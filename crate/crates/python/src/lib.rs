//! Python bindings: `import ncdg`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ncdg::config::{RunConfig, DATA_ROOT_ENV};
use ncdg::coverage::{coverage_loss as cov_loss, NeuronActMap, NormScope};
use ncdg::gradcheck::{run_gradcheck, GradcheckSettings};
use ncdg::nn::checkpoint;
use ncdg::run::{load_dataset, model_spec, train_run};
use ncdg::training::{dataset_coverage, evaluate as eval, l_sim_vars};
use ncdg::{Error, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn resolve(config: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> Result<RunConfig, Error> {
    let sets: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
    let env = std::env::var(DATA_ROOT_ENV).ok();
    RunConfig::resolve(config.as_deref(), env.as_deref(), &sets)
}

fn to_json(v: impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(&v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn layer_tensor(rows: &[Vec<f64>]) -> Result<Tensor<f64>, Error> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidArgument("ragged layer output".into()));
    }
    Tensor::new(vec![rows.len(), width], rows.concat())
}

/// Resolved configuration as a dict of strings.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=None))]
fn resolve_config(
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<BTreeMap<String, String>> {
    Ok(resolve(config, overrides).map_err(py_err)?.to_map())
}

/// Runs the gradient check; returns the JSON report.
#[pyfunction]
#[pyo3(signature = (preset="mlp-small"))]
fn gradcheck(preset: &str) -> PyResult<String> {
    let s = GradcheckSettings::preset(preset).map_err(py_err)?;
    to_json(run_gradcheck(&s).map_err(py_err)?)
}

/// Trains into `out_dir`; returns the manifest JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, overrides=None))]
fn train(
    py: Python<'_>,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<String> {
    let cfg = resolve(config, overrides).map_err(py_err)?;
    let outcome = py.detach(|| train_run(&cfg, &out_dir)).map_err(py_err)?;
    to_json(outcome.manifest)
}

fn checkpoint_setup(
    ckpt: &Path,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> Result<(RunConfig, ncdg::nn::ModelSpec, ncdg::nn::ParamStore<f32>), Error> {
    let cfg = match config {
        Some(_) => resolve(config, overrides)?,
        None => {
            let mut cfg = ncdg::run::config_for_checkpoint(ckpt, resolve(None, None)?)?;
            for (k, v) in overrides.unwrap_or_default() {
                cfg.set(&k, &v)?;
            }
            cfg
        }
    };
    let spec = model_spec(&cfg)?;
    let params = checkpoint::load(ckpt, &spec)?;
    Ok((cfg, spec, params))
}

/// `(accuracy, n)` of a checkpoint on a dataset key.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, config=None, overrides=None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    dataset: &str,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<(f64, usize)> {
    py.detach(|| {
        let (cfg, spec, params) = checkpoint_setup(&checkpoint, config, overrides)?;
        let (ds, _) = load_dataset(&cfg, dataset)?;
        let r = eval(&spec, &params, &ds)?;
        Ok((r.accuracy, r.n))
    })
    .map_err(py_err)
}

/// Coverage statistics JSON of a checkpoint over one pass of a dataset.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, t, config=None, overrides=None))]
fn coverage_report(
    py: Python<'_>,
    checkpoint: PathBuf,
    dataset: &str,
    t: f64,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<String> {
    let stats = py
        .detach(|| {
            let (cfg, spec, params) = checkpoint_setup(&checkpoint, config, overrides)?;
            let (ds, _) = load_dataset(&cfg, dataset)?;
            dataset_coverage(&spec, &params, &ds, t, cfg.train.norm_scope)
        })
        .map_err(py_err)?;
    to_json(stats)
}

/// Bootstrapped coverage loss of dense layer outputs `[layer][sample][neuron]`.
///
/// Returns the loss and the updated activation map.
#[pyfunction]
#[pyo3(signature = (outputs, activated, t))]
fn coverage_loss(outputs: Vec<Vec<Vec<f64>>>, activated: Vec<Vec<bool>>, t: f64) -> PyResult<(f64, Vec<Vec<bool>>)> {
    let tape = ncdg::autodiff::Tape::<f64>::new();
    let vars = outputs
        .iter()
        .map(|l| layer_tensor(l).map(|x| tape.constant(x)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let sizes: Vec<usize> = activated.iter().map(Vec::len).collect();
    let names = (0..sizes.len()).map(|i| format!("layer{i}")).collect();
    let mut map = NeuronActMap::with_sizes(names, &sizes);
    map.activated = activated;
    let (loss, _) = cov_loss(&tape, &vars, &mut map, t, NormScope::PerSample).map_err(py_err)?;
    Ok((tape.value(loss).item(), map.activated))
}

/// L2 distance between two flattened gradient lists.
#[pyfunction]
fn l_sim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let tape = ncdg::autodiff::Tape::<f64>::new();
    let lift = |v: &[Vec<f64>]| -> Result<Vec<_>, Error> {
        v.iter()
            .map(|g| Ok(tape.constant(Tensor::new(vec![g.len()], g.clone())?)))
            .collect()
    };
    let (va, vb) = (lift(&a).map_err(py_err)?, lift(&b).map_err(py_err)?);
    let s = l_sim_vars(&tape, &va, &vb).map_err(py_err)?;
    Ok(tape.value(s).item())
}

/// Parameter count of the digits ConvNet for a resolved configuration.
#[pyfunction]
#[pyo3(signature = (overrides=None))]
fn param_count(overrides: Option<BTreeMap<String, String>>) -> PyResult<usize> {
    let cfg = resolve(None, overrides).map_err(py_err)?;
    Ok(model_spec(&cfg).map_err(py_err)?.param_count())
}

#[pymodule(name = "ncdg")]
fn ncdg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_report, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_loss, m)?)?;
    m.add_function(wrap_pyfunction!(l_sim, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    Ok(())
}
