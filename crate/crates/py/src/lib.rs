use std::path::PathBuf;

use epispread::config::PipelineConfig;
use epispread::diagnostics;
use epispread::embedding::{self, DistanceMatrix};
use epispread::engine::{self, Family, FitOptions};
use epispread::features::{self, CoLocationMatrix};
use epispread::panel::{assemble_model_frame, FrameSpec, FrameTerms};
use epispread::pipeline::{self, Context, Stage};
use epispread::pooling::{self, NamedEstimate};
use epispread::simulator::{self, SimulationConfig};
use epispread::svg::{self, PlotKind};
use epispread::basis::SmoothSpec;
use epispread::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::NoConvergence { .. } | Error::Optimizer(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import_bound("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import_bound("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyfunction]
fn nb_logpmf(y: f64, mu: f64, phi: f64) -> f64 {
    engine::nb_logpmf(y, mu, phi)
}

#[pyfunction]
fn nb_loglik(y: Vec<f64>, mu: Vec<f64>, phi: f64) -> PyResult<f64> {
    engine::nb_loglik(&y, &mu, phi).map_err(err)
}

#[pyfunction]
fn nb_cdf(y: f64, mu: f64, phi: f64) -> f64 {
    engine::nb_cdf(y, mu, phi)
}

/// Gini index of row `i` of a co-location matrix, excluding the diagonal.
#[pyfunction]
fn gini_index(p: Vec<Vec<f64>>, i: usize) -> PyResult<f64> {
    let m = CoLocationMatrix::new(1, matrix(&p)?).map_err(err)?;
    features::gini_index(&m, i).map_err(err)
}

#[pyfunction]
fn additive_constant(d: Vec<Vec<f64>>) -> PyResult<f64> {
    let d = DistanceMatrix::new(matrix(&d)?).map_err(err)?;
    embedding::additive_constant(&d).map_err(err)
}

/// Returns `(coordinates, eigenvalues, stress)`.
#[pyfunction]
#[pyo3(signature = (d, p = 2))]
fn classical_mds(d: Vec<Vec<f64>>, p: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, f64)> {
    let d = DistanceMatrix::new(matrix(&d)?).map_err(err)?;
    let e = embedding::classical_mds(&d, p).map_err(err)?;
    Ok((rows_of(&e.coords), e.eigenvalues, e.stress))
}

#[pyfunction]
fn procrustes_align(py: Python<'_>, source: Vec<[f64; 2]>, target: Vec<[f64; 2]>) -> PyResult<(PyObject, Vec<[f64; 2]>)> {
    let (t, aligned) = embedding::procrustes_align(&source, &target).map_err(err)?;
    Ok((to_py(py, &t)?, aligned))
}

/// Pools `(names, estimate, covariance)` triples with Rubin's rules.
#[pyfunction]
fn rubin_pool(py: Python<'_>, estimates: Vec<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)>) -> PyResult<PyObject> {
    let items = estimates
        .into_iter()
        .map(|(names, est, cov)| {
            Ok(NamedEstimate {
                names,
                estimate: DVector::from_vec(est),
                covariance: matrix(&cov)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &pooling::rubin_pool(&items).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (y, mu, phi, seed, draw = 0))]
fn rq_residuals(y: Vec<f64>, mu: Vec<f64>, phi: f64, seed: u64, draw: u64) -> PyResult<Vec<f64>> {
    Ok(diagnostics::rq_residuals(&y, &mu, phi, seed, draw).map_err(err)?.residuals)
}

/// Returns `(statistic, p_value)`.
#[pyfunction]
fn ks_normal(x: Vec<f64>) -> PyResult<(f64, f64)> {
    let t = diagnostics::ks_normal(&x).map_err(err)?;
    Ok((t.statistic, t.p_value))
}

#[pyfunction]
#[pyo3(signature = (y, mu, phi, max_count = 30))]
fn rootogram(py: Python<'_>, y: Vec<f64>, mu: Vec<f64>, phi: f64, max_count: u64) -> PyResult<PyObject> {
    to_py(py, &diagnostics::rootogram(&y, &mu, phi, max_count).map_err(err)?)
}

fn sim_config(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<SimulationConfig> {
    match config {
        Some(c) => from_py(py, c),
        None => Ok(SimulationConfig::default()),
    }
}

/// Simulated panel as a dict with counts per district, group and week plus
/// the generating coefficients.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn simulate(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<PyObject> {
    let cfg = sim_config(py, config)?;
    let data = simulator::simulate(&cfg).map_err(err)?;
    let ids = data.registry.ids();
    let cells: Vec<(String, &str, &str, usize, u64)> = data
        .panel
        .cells()
        .map(|(i, g, t, y)| (ids[i].clone(), g.age_label(), g.gender_label(), t, y))
        .collect();
    let value = serde_json::json!({
        "district_ids": ids,
        "weeks": data.panel.weeks(),
        "cells": cells,
        "coefficients": data.truth.coefficients,
        "a": data.truth.a,
        "b": data.truth.b,
        "c": cfg.c,
        "phi": cfg.phi,
    });
    to_py(py, &value)
}

/// Simulates a panel and fits the full model to it with the true features
/// and social coordinates.
#[pyfunction]
#[pyo3(signature = (config = None, coord_k = 30, social_k = 30, fixed_c = None, gini = true))]
fn simulate_and_fit(
    py: Python<'_>,
    config: Option<&Bound<'_, PyAny>>,
    coord_k: usize,
    social_k: usize,
    fixed_c: Option<f64>,
    gini: bool,
) -> PyResult<PyObject> {
    let cfg = sim_config(py, config)?;
    let fit = py.allow_threads(|| {
        let data = simulator::simulate(&cfg)?;
        let spec = FrameSpec {
            coord: SmoothSpec::thinplate(coord_k),
            social: SmoothSpec::thinplate(social_k),
            terms: FrameTerms { gini, ..FrameTerms::default() },
        };
        let frame = assemble_model_frame(&data.panel, &data.truth.features, Some(&data.truth.social), &data.registry, &data.population, &spec)?;
        let opts = FitOptions { fixed_c, ..FitOptions::default() };
        engine::fit_model(&|c: f64| frame.problem_at(c), Family::NegativeBinomial, &opts)
    });
    let fit = fit.map_err(err)?;
    to_py(py, &fit)
}

/// Runs a pipeline stage; returns the written paths.
#[pyfunction]
#[pyo3(signature = (stage, config = None, out = None, seed = None, workers = 0))]
fn run_stage(py: Python<'_>, stage: &str, config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>, workers: usize) -> PyResult<Vec<PathBuf>> {
    let stage = [
        Stage::Features,
        Stage::Embed,
        Stage::Impute,
        Stage::Fit,
        Stage::Pool,
        Stage::Diagnose,
        Stage::Plot,
        Stage::Simulate,
        Stage::Pipeline,
    ]
    .into_iter()
    .find(|s| s.name() == stage)
    .ok_or_else(|| PyValueError::new_err(format!("unknown stage '{stage}'")))?;
    let mut cfg = match &config {
        Some(p) => PipelineConfig::load(p).map_err(err)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let out = cfg.output_dir(out.as_deref());
    let ctx = Context::new(cfg, out, workers);
    let report = py.allow_threads(|| pipeline::run(stage, &ctx)).map_err(err)?;
    Ok(report.outputs)
}

#[pyfunction]
fn load_pooled(py: Python<'_>, out: PathBuf) -> PyResult<PyObject> {
    to_py(py, &pipeline::load_pooled(&out).map_err(err)?)
}

#[pyfunction]
fn render_svg(artifact: PathBuf, kind: &str) -> PyResult<String> {
    let kind = PlotKind::parse(kind).map_err(err)?;
    svg::render_svg(&artifact, kind).map_err(err)
}

#[pymodule]
#[pyo3(name = "epispread")]
fn epispread_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(nb_logpmf, m)?)?;
    m.add_function(wrap_pyfunction!(nb_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(nb_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(gini_index, m)?)?;
    m.add_function(wrap_pyfunction!(additive_constant, m)?)?;
    m.add_function(wrap_pyfunction!(classical_mds, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes_align, m)?)?;
    m.add_function(wrap_pyfunction!(rubin_pool, m)?)?;
    m.add_function(wrap_pyfunction!(rq_residuals, m)?)?;
    m.add_function(wrap_pyfunction!(ks_normal, m)?)?;
    m.add_function(wrap_pyfunction!(rootogram, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_and_fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(load_pooled, m)?)?;
    m.add_function(wrap_pyfunction!(render_svg, m)?)?;
    Ok(())
}
