//! Python bindings: lazy kernels, exact two-layer solutions, fluctuation
//! constants and the JSON experiment runner.

use std::path::PathBuf;

use entk_dmft::exact::{fa_fixed_point, gd_fixed_point, solve_gd, solve_rho_fa, GdOdeForm, TwoLayerTrajectory};
use entk_dmft::finite_size::nlo_constants;
use entk_dmft::harness::{parse_config, run, Mode, RunOptions};
use entk_dmft::lazy::{lazy_entk, lazy_stack};
use entk_dmft::{Activation, Error, Rule, TimeGrid};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

pub fn parse_activation(name: &str) -> Result<Activation, String> {
    match name {
        "linear" => Ok(Activation::Linear),
        "relu" | "relu_normalized" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(format!("unknown activation `{other}`")),
    }
}

pub fn parse_rule(name: &str, rho: Option<f64>) -> Result<Rule, String> {
    let rule = match (name, rho) {
        ("gd", _) => Rule::Gd,
        ("rho_fa", Some(rho)) => Rule::RhoFa { rho },
        ("rho_fa", None) => return Err("rho_fa needs rho".into()),
        ("dfa", _) => Rule::Dfa,
        ("gln", _) => Rule::Gln,
        ("hebb", _) => Rule::Hebb,
        (other, _) => return Err(format!("unknown rule `{other}`")),
    };
    rule.validate().map_err(|e| e.to_string())?;
    Ok(rule)
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err("expected a non-empty rectangular list of rows".into());
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn core_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::NonFinite { .. } | Error::Diverged { .. } | Error::SingularResolvent { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Initial eNTK of `rule` for input kernel `input_kernel`.
#[pyfunction]
#[pyo3(signature = (input_kernel, depth, activation, rule, rho=None))]
fn lazy_kernel(
    input_kernel: Vec<Vec<f64>>,
    depth: usize,
    activation: &str,
    rule: &str,
    rho: Option<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let kx = to_matrix(&input_kernel).map_err(value_err)?;
    let act = parse_activation(activation).map_err(value_err)?;
    let rule = parse_rule(rule, rho).map_err(value_err)?;
    let stack = lazy_stack(&kx, depth, act).map_err(core_err)?;
    Ok(from_matrix(&lazy_entk(&rule, &stack).map_err(core_err)?))
}

/// `(V_phi, V_g)` for a single unit input.
#[pyfunction]
fn fluctuation_constants(activation: &str) -> PyResult<(f64, f64)> {
    nlo_constants(parse_activation(activation).map_err(value_err)?).map_err(core_err)
}

/// Feature-kernel fixed point `H_y(∞)` of the two-layer linear network.
#[pyfunction]
#[pyo3(signature = (gamma0, y, rule, rho=None))]
fn two_layer_fixed_point(gamma0: f64, y: f64, rule: &str, rho: Option<f64>) -> PyResult<f64> {
    match parse_rule(rule, rho).map_err(value_err)? {
        Rule::Gd => Ok(gd_fixed_point(gamma0, y)),
        Rule::RhoFa { rho } => Ok(1.0 + fa_fixed_point(gamma0, rho, y).powi(2)),
        _ => Err(PyValueError::new_err("fixed points exist for gd and rho_fa")),
    }
}

fn trajectory_dict<'py>(py: Python<'py>, tr: &TwoLayerTrajectory) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("time", tr.times.clone())?;
    d.set_item("delta", tr.delta.clone())?;
    d.set_item("a", tr.a.clone())?;
    d.set_item("h_y", tr.h_y.clone())?;
    d.set_item("gtilde", tr.gtilde.clone())?;
    Ok(d)
}

/// Exact two-layer trajectory as a dict of lists.
#[pyfunction]
#[pyo3(signature = (gamma0, y, steps, dt, rule, rho=None))]
fn two_layer_trajectory<'py>(
    py: Python<'py>,
    gamma0: f64,
    y: f64,
    steps: usize,
    dt: f64,
    rule: &str,
    rho: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let grid = TimeGrid::new(steps, dt).map_err(core_err)?;
    let tr = match parse_rule(rule, rho).map_err(value_err)? {
        Rule::Gd => solve_gd(gamma0, y, &grid, GdOdeForm::TwoLayer).map_err(core_err)?,
        Rule::RhoFa { rho } => solve_rho_fa(gamma0, rho, y, &grid).map_err(core_err)?.trajectory,
        _ => return Err(PyValueError::new_err("trajectories exist for gd and rho_fa")),
    };
    trajectory_dict(py, &tr)
}

/// Runs an experiment from a JSON config string; returns the manifest as
/// JSON text.
#[pyfunction]
#[pyo3(signature = (mode, config_json, out_dir, seed=None))]
fn run_experiment(py: Python<'_>, mode: &str, config_json: &str, out_dir: PathBuf, seed: Option<u64>) -> PyResult<String> {
    let mode: Mode = mode.parse().map_err(core_err)?;
    let cfg = parse_config(config_json).map_err(core_err)?;
    let opts = RunOptions {
        out_dir: Some(out_dir),
        seed,
    };
    let manifest = py.detach(|| run(mode, &cfg, &opts)).map_err(core_err)?;
    serde_json::to_string(&manifest).map_err(value_err)
}

#[pymodule]
pub fn entk_dmft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lazy_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(fluctuation_constants, m)?)?;
    m.add_function(wrap_pyfunction!(two_layer_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(two_layer_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
